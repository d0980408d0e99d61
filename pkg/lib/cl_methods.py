"""Continual-learning objectives: EWC / MAS regularization, iCaRL, BiC and temporal consistency."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from lib.errors import DataError

Batch = Tuple[torch.Tensor, torch.Tensor]

BIC_DISTILL_T = 2.0


# ==========================================
# 1. Importance-based regularization (EWC, MAS)
# ==========================================


@dataclass
class ImportanceState:
    """Per-parameter importance (omega) and anchor parameters theta*.

    Both are kept as named blocks; concatenated in parameter order they form the flat
    omega / anchor vectors. Blocks of a grown head are longer in the live model than in
    the state, the missing rows count as zero importance.
    """

    omega: Dict[str, torch.Tensor]
    anchor: Dict[str, torch.Tensor]
    lambda_reg: float

    def __post_init__(self):
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        if set(self.omega) != set(self.anchor):
            raise DataError("omega and anchor cover different parameters")
        for name, w in self.omega.items():
            if w.shape != self.anchor[name].shape:
                raise DataError(f"omega/anchor shape mismatch for '{name}'")
            if bool((w < 0).any()):
                raise DataError(f"negative importance in '{name}'")

    def parameter_count(self) -> int:
        return sum(w.numel() for w in self.omega.values())

    def flat_omega(self) -> torch.Tensor:
        return torch.cat([w.reshape(-1) for w in self.omega.values()])

    def flat_anchor(self) -> torch.Tensor:
        return torch.cat([a.reshape(-1) for a in self.anchor.values()])


def _trainable(model: nn.Module) -> List[Tuple[str, torch.Tensor]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def _zeros_like(params: List[Tuple[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    return {n: torch.zeros_like(p, memory_format=torch.contiguous_format).detach() for n, p in params}


def ewc_importance(model: nn.Module, data: Iterable[Batch]) -> Dict[str, torch.Tensor]:
    """Diagonal empirical Fisher: mean over samples of the squared gradient of the
    log-likelihood of the true class. Batches are split into single samples, so the
    result does not depend on how the stream is batched or ordered."""
    params = _trainable(model)
    fisher = _zeros_like(params)
    n_samples = 0
    for x, y in data:
        for i in range(x.shape[0]):
            log_p = F.log_softmax(model(x[i:i + 1]), dim=1)
            ll = log_p[0, int(y[i])]
            grads = torch.autograd.grad(ll, [p for _, p in params], allow_unused=True)
            for (name, _), g in zip(params, grads):
                if g is not None:
                    fisher[name] += g.detach() ** 2
            n_samples += 1
    if n_samples == 0:
        raise DataError("ewc_importance needs at least one sample")
    return {n: f / n_samples for n, f in fisher.items()}


def mas_importance(model: nn.Module, data: Iterable[Union[torch.Tensor, Batch]]) -> Dict[str, torch.Tensor]:
    """Mean over samples of |d ||logits||^2 / d theta|; labels are ignored."""
    params = _trainable(model)
    omega = _zeros_like(params)
    n_samples = 0
    for item in data:
        x = item[0] if isinstance(item, (tuple, list)) else item
        for i in range(x.shape[0]):
            out = model(x[i:i + 1])
            sq_norm = out.pow(2).sum()
            grads = torch.autograd.grad(sq_norm, [p for _, p in params], allow_unused=True)
            for (name, _), g in zip(params, grads):
                if g is not None:
                    omega[name] += g.detach().abs()
            n_samples += 1
    if n_samples == 0:
        raise DataError("mas_importance needs at least one sample")
    return {n: w / n_samples for n, w in omega.items()}


def _grow_to(t: torch.Tensor, shape: torch.Size) -> torch.Tensor:
    if t.shape == shape:
        return t
    if len(t.shape) != len(shape) or t.shape[1:] != shape[1:] or t.shape[0] > shape[0]:
        raise DataError(f"cannot grow importance block {tuple(t.shape)} to {tuple(shape)}")
    out = torch.zeros(shape, dtype=t.dtype, device=t.device)
    out[: t.shape[0]] = t
    return out


def consolidate(previous: Optional[ImportanceState], new_omega: Mapping[str, torch.Tensor],
                model: nn.Module, lambda_reg: float) -> ImportanceState:
    """Sum the new importance into the running one and re-anchor at the current parameters."""
    omega: Dict[str, torch.Tensor] = {}
    for name, p in _trainable(model):
        w = new_omega[name].detach().clone()
        if previous is not None and name in previous.omega:
            w = w + _grow_to(previous.omega[name], w.shape)
        omega[name] = w
    anchor = {name: p.detach().clone() for name, p in _trainable(model)}
    return ImportanceState(omega=omega, anchor=anchor, lambda_reg=lambda_reg)


def regularization_penalty(state: ImportanceState,
                           params: Union[nn.Module, Mapping[str, torch.Tensor]]) -> torch.Tensor:
    """lambda_reg * sum_i omega_i (theta_i - theta*_i)^2."""
    named = dict(params.named_parameters()) if isinstance(params, nn.Module) else dict(params)
    missing = set(state.omega) - set(named)
    if missing:
        raise DataError(f"dimension mismatch: parameters {sorted(missing)} not in model")

    total: Optional[torch.Tensor] = None
    for name, w in state.omega.items():
        p = named[name]
        if p.shape != w.shape:
            if len(p.shape) != len(w.shape) or p.shape[1:] != w.shape[1:] or p.shape[0] < w.shape[0]:
                raise DataError(f"dimension mismatch for '{name}': {tuple(p.shape)} vs {tuple(w.shape)}")
            p = p[: w.shape[0]]  # rows added after the anchor carry no importance
        term = (w * (p - state.anchor[name]) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return state.lambda_reg * total


def save_importance(state: ImportanceState, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "parameter_count": state.parameter_count(),
            "names": list(state.omega),
            "omega": {n: w.cpu() for n, w in state.omega.items()},
            "anchor": {n: a.cpu() for n, a in state.anchor.items()},
            "lambda_reg": float(state.lambda_reg),
        },
        path,
    )
    return path


def load_importance(path: Union[str, Path]) -> ImportanceState:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    state = ImportanceState(
        omega={n: blob["omega"][n] for n in blob["names"]},
        anchor={n: blob["anchor"][n] for n in blob["names"]},
        lambda_reg=float(blob["lambda_reg"]),
    )
    if state.parameter_count() != blob["parameter_count"]:
        raise DataError(f"importance checkpoint {path} is truncated")
    return state


# ==========================================
# 2. Temporal consistency
# ==========================================


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if labels.numel() and (int(labels.max()) >= logits.shape[1] or int(labels.min()) < 0):
        raise DataError(f"label outside the current head of {logits.shape[1]} classes")


def tc_combine(loss_full: torch.Tensor, loss_down: torch.Tensor, lam: float) -> torch.Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"consistency factor must be in [0, 1], got {lam}")
    return (1.0 - lam) * loss_full + lam * loss_down


def tc_loss(model: nn.Module, clip_full: torch.Tensor, clip_down: torch.Tensor, label: torch.Tensor,
            lam: float, criterion: Optional[Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = None
            ) -> torch.Tensor:
    """(1 - lam) * L(F(X), Y) + lam * L(F(X^d), Y) with one set of weights F.

    L defaults to cross-entropy; methods with their own classification objective pass it
    as ``criterion``.
    """
    label = label.view(-1)
    logits_full = model(clip_full)
    logits_down = model(clip_down)
    _check_labels(logits_full, label)
    crit = criterion or F.cross_entropy
    return tc_combine(crit(logits_full, label), crit(logits_down, label), lam)


# ==========================================
# 3. iCaRL
# ==========================================


def icarl_distillation_targets(old_model_logits: torch.Tensor) -> torch.Tensor:
    """Sigmoid of the previous model's old-class outputs."""
    return torch.sigmoid(old_model_logits)


def icarl_loss(logits: torch.Tensor, labels: torch.Tensor, old_logits: Optional[torch.Tensor] = None
               ) -> torch.Tensor:
    """Binary cross-entropy over all seen classes; old-class targets come from the old model."""
    _check_labels(logits, labels)
    targets = F.one_hot(labels, num_classes=logits.shape[1]).to(logits.dtype)
    if old_logits is not None and old_logits.shape[1] > 0:
        n_old = old_logits.shape[1]
        targets = torch.cat([icarl_distillation_targets(old_logits.detach()), targets[:, n_old:]], dim=1)
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="sum") / logits.shape[0]


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, p=2, dim=-1)


def compute_prototypes(features_by_class: Mapping[int, torch.Tensor]) -> Tuple[List[int], torch.Tensor]:
    """L2-normalized mean of L2-normalized exemplar features, one row per class (ascending id)."""
    class_ids = sorted(features_by_class)
    rows = []
    for c in class_ids:
        feats = features_by_class[c]
        if feats.shape[0] == 0:
            raise DataError(f"class {c} has no exemplars")
        rows.append(_normalize(_normalize(feats).mean(dim=0)))
    return class_ids, torch.stack(rows)


def nearest_prototype(features: torch.Tensor, class_ids: Sequence[int], prototypes: torch.Tensor) -> List[int]:
    dist = torch.cdist(_normalize(features), prototypes)
    # argmin returns the first minimum -> lowest class id on ties
    return [class_ids[int(i)] for i in dist.argmin(dim=1)]


def nearest_mean_classify(model: nn.Module, memory, clip: torch.Tensor,
                          clip_fn: Callable[[np.ndarray], torch.Tensor],
                          seen_classes: Optional[Sequence[int]] = None) -> List[int]:
    """Nearest-mean-of-exemplars decision for a batch of clips.

    ``clip_fn`` turns one entry's stored frames into a (1, T, H, W) model input.
    """
    features_by_class = exemplar_features(model, memory, clip_fn)
    for c in seen_classes or ():
        if c not in features_by_class:
            raise DataError(f"class {c} has no exemplars")
    class_ids, protos = compute_prototypes(features_by_class)
    with torch.no_grad():
        feats = model.features(clip)
    return nearest_prototype(feats, class_ids, protos)


def exemplar_features(model: nn.Module, memory, clip_fn: Callable[[np.ndarray], torch.Tensor]
                      ) -> Dict[int, torch.Tensor]:
    out: Dict[int, torch.Tensor] = {}
    with torch.no_grad():
        for c, entries in memory.entries.items():
            if not entries:
                raise DataError(f"class {c} has no exemplars")
            out[c] = torch.cat([model.features(clip_fn(e.stored_frames)) for e in entries], dim=0)
    return out


# ==========================================
# 4. BiC
# ==========================================


@dataclass(frozen=True)
class BiasCorrectionLayer:
    """alpha * z + beta on the logits of ``new_class_ids`` (head column indices)."""

    alpha: float = 1.0
    beta: float = 0.0
    new_class_ids: FrozenSet[int] = field(default_factory=frozenset)


def apply_bias_correction(layer: BiasCorrectionLayer, logits: torch.Tensor) -> torch.Tensor:
    if not layer.new_class_ids:
        return logits
    cols = torch.tensor(sorted(layer.new_class_ids), dtype=torch.long, device=logits.device)
    out = logits.clone()
    out[..., cols] = layer.alpha * logits[..., cols] + layer.beta
    return out


def apply_bias_layers(layers: Sequence[BiasCorrectionLayer], logits: torch.Tensor) -> torch.Tensor:
    for layer in layers:
        logits = apply_bias_correction(layer, logits)
    return logits


def bic_distillation(old_logits: torch.Tensor, new_logits: torch.Tensor, T: float = BIC_DISTILL_T) -> torch.Tensor:
    """Soft cross-entropy between softened old and new old-class logits."""
    old_p = torch.softmax(old_logits.detach() / T, dim=1)
    new_log_p = torch.log_softmax(new_logits / T, dim=1)
    return -(old_p * new_log_p).sum(dim=1).mean()


def bic_loss(logits: torch.Tensor, labels: torch.Tensor, old_logits: Optional[torch.Tensor] = None) -> torch.Tensor:
    _check_labels(logits, labels)
    ce = F.cross_entropy(logits, labels)
    if old_logits is None or old_logits.shape[1] == 0:
        return ce
    n_old = old_logits.shape[1]
    w = n_old / logits.shape[1]
    return (1.0 - w) * ce + w * bic_distillation(old_logits, logits[:, :n_old])


def fit_bias_correction(logits: torch.Tensor, labels: torch.Tensor, new_class_ids: Sequence[int],
                        max_iter: int = 100) -> BiasCorrectionLayer:
    """Fit (alpha, beta) by minimizing cross-entropy of the corrected logits (backbone frozen)."""
    new_ids = sorted(int(c) for c in new_class_ids)
    present = set(labels.tolist())
    if not present & set(new_ids):
        raise DataError("bias correction held-out set has no new-class samples")
    if not present - set(new_ids):
        raise DataError("bias correction held-out set has no old-class samples")

    z = logits.detach().to(torch.float64)
    y = labels.detach().long()
    cols = torch.tensor(new_ids, dtype=torch.long)
    alpha = torch.ones((), dtype=torch.float64, requires_grad=True)
    beta = torch.zeros((), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.LBFGS([alpha, beta], lr=1.0, max_iter=max_iter, tolerance_grad=1e-10,
                            tolerance_change=1e-14, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        corrected = z.clone()
        corrected[:, cols] = alpha * z[:, cols] + beta
        loss = F.cross_entropy(corrected, y)
        loss.backward()
        return loss

    opt.step(closure)
    return BiasCorrectionLayer(float(alpha.detach()), float(beta.detach()), frozenset(new_ids))


def bic_fit(model: nn.Module, heldout: Iterable[Batch], new_class_ids: Sequence[int],
            previous_layers: Sequence[BiasCorrectionLayer] = (), max_iter: int = 100) -> BiasCorrectionLayer:
    """Second BiC stage: collect frozen-backbone logits on the balanced held-out set and fit."""
    zs, ys = [], []
    with torch.no_grad():
        for x, y in heldout:
            zs.append(apply_bias_layers(previous_layers, model(x)))
            ys.append(y)
    if not zs:
        raise DataError("bias correction held-out set is empty")
    return fit_bias_correction(torch.cat(zs), torch.cat(ys), new_class_ids, max_iter=max_iter)
