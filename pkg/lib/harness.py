"""Sequential class-incremental training and evaluation.

One ``SequenceTrainer`` owns the model, the episodic memory / importance state and the
accuracy matrix of one experiment. Every random draw comes from a seed derived from
(run seed, task, epoch, ...), so a run is reproducible and can be resumed at any task
boundary.
"""

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from lib import cl_methods
from lib.cl_methods import BiasCorrectionLayer, ImportanceState
from lib.config import RunConfig
from lib.episodic_memory import (EpisodicMemory, MemoryEntry, insert_exemplars, load_memory_snapshot, rebalance,
                                 replay_batches, save_memory_snapshot, select_exemplars_herding,
                                 select_exemplars_random, uniform_subsample)
from lib.errors import DataError
from lib.frame_sources import FrameSource
from lib.logger import LOG
from lib.manifest import DatasetManifest, VideoRecord
from lib.metrics import AccuracyMatrix, PerClassReport, per_class_report
from lib.models import SegmentConsensusNet, clips_to_tensor
from lib.task_splits import Task, TaskSequence

NME_METHODS = ("naive", "icarl")
DISTILL_METHODS = ("naive", "icarl", "bic")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ==========================================
# 1. Segment sampling
# ==========================================


def segment_sample(total_frames: int, N: int, mode: Literal["train", "eval"], seed: int = 0) -> List[int]:
    """TSN-style sampling: one frame per equal segment (random in train, center in eval)."""
    if mode == "eval":
        return uniform_subsample(total_frames, N)
    if mode != "train":
        raise ValueError(f"unknown sampling mode '{mode}'")
    if total_frames < 1 or N < 1:
        raise ValueError("segment_sample needs total_frames >= 1 and N >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(N):
        lo, hi = i * total_frames // N, (i + 1) * total_frames // N
        out.append(int(rng.integers(lo, hi)) if hi > lo else min(lo, total_frames - 1))
    return out


# ==========================================
# 2. Frame access
# ==========================================


class FrameReader:
    """Reads sampled frames of manifest videos; short videos are cached whole."""

    def __init__(self, manifest: DatasetManifest, source: FrameSource, cache_max_frames: int = 64,
                 cache_max_videos: int = 4096):
        self.manifest = manifest
        self.source = source
        self.cache_max_frames = cache_max_frames
        self.cache_max_videos = cache_max_videos
        self._cache: Dict[str, np.ndarray] = {}

    def record(self, video_id: str) -> VideoRecord:
        return self.manifest.record(video_id)

    def read(self, video_id: str, indices: Sequence[int]) -> np.ndarray:
        rec = self.record(video_id)
        if rec.total_frames <= self.cache_max_frames:
            frames = self._cache.get(video_id)
            if frames is None:
                frames = self.source.read(rec, range(rec.total_frames))
                if len(self._cache) < self.cache_max_videos:
                    self._cache[video_id] = frames
            return frames[list(indices)]
        return self.source.read(rec, indices)

    def clip(self, video_id: str, N: int, mode: str, seed: int = 0) -> np.ndarray:
        rec = self.record(video_id)
        return self.read(video_id, segment_sample(rec.total_frames, N, mode, seed))


# ==========================================
# 3. Results
# ==========================================


@dataclass
class ExperimentResult:
    accuracy_matrix: AccuracyMatrix
    per_class_accuracy: Dict[int, float]
    memory_trace: List[int]
    wall_clock: List[float]
    per_class: Optional[PerClassReport] = None
    final_predictions: List[Tuple[int, int]] = field(default_factory=list)


# ==========================================
# 4. Evaluation
# ==========================================


def _batched(items: Sequence, size: int) -> Iterator[Sequence]:
    for start in range(0, len(items), size):
        yield items[start:start + size]


def predict_videos(model: SegmentConsensusNet, memory: Optional[EpisodicMemory], method: str,
                   video_ids: Sequence[str], reader: FrameReader, class_order: Sequence[int],
                   segments_n: int = 8, bias_layers: Sequence[BiasCorrectionLayer] = (),
                   memory_clip: Optional[Callable[[np.ndarray], torch.Tensor]] = None,
                   batch_size: int = 32) -> List[Tuple[int, int]]:
    """(true class, predicted class) for each video, one center-sampled clip per video."""
    base = method.replace("+tc", "")
    model.eval()
    prototypes = None
    if base in NME_METHODS:
        if memory is None or len(memory) == 0:
            raise DataError(f"{method} classifies by exemplar means but the memory is empty")
        feats = cl_methods.exemplar_features(model, memory, memory_clip or (lambda f: clips_to_tensor(f[None])))
        prototypes = cl_methods.compute_prototypes(feats)

    out: List[Tuple[int, int]] = []
    with torch.no_grad():
        for chunk in _batched(list(video_ids), batch_size):
            clips = clips_to_tensor(np.stack([reader.clip(v, segments_n, "eval") for v in chunk]))
            if prototypes is not None:
                preds = cl_methods.nearest_prototype(model.features(clips), *prototypes)
            else:
                logits = cl_methods.apply_bias_layers(bias_layers, model(clips))
                preds = [class_order[int(i)] for i in logits.argmax(dim=1)]
            out.extend((reader.record(v).class_id, int(p)) for v, p in zip(chunk, preds))
    return out


def evaluate_task(model: SegmentConsensusNet, memory: Optional[EpisodicMemory], method: str,
                  video_ids: Sequence[str], reader: FrameReader, class_order: Sequence[int], **kwargs) -> float:
    """Fraction of videos classified correctly."""
    if not video_ids:
        raise DataError("empty evaluation set")
    preds = predict_videos(model, memory, method, video_ids, reader, class_order, **kwargs)
    return sum(int(t == p) for t, p in preds) / len(preds)


# ==========================================
# 5. Trainer
# ==========================================


class SequenceTrainer:
    def __init__(self, config: RunConfig, manifest: DatasetManifest, tasks: TaskSequence, source: FrameSource,
                 progress: bool = False,
                 on_task_end: Optional[Callable[["SequenceTrainer", int], None]] = None):
        config.validate()
        self.config = config
        self.manifest = manifest
        self.tasks = tasks
        self.reader = FrameReader(manifest, source)
        self.progress = progress
        self.on_task_end = on_task_end

        torch.manual_seed(config.seed)
        self.model = SegmentConsensusNet(width=config.model_width, feature_dim=config.feature_dim,
                                         seed=derive_seed(config.seed, 0xBACB))
        self.old_model: Optional[SegmentConsensusNet] = None
        self.memory: Optional[EpisodicMemory] = EpisodicMemory(config.budget) if config.uses_memory else None
        self.importance: Optional[ImportanceState] = None
        self.bias_layers: List[BiasCorrectionLayer] = []
        self.class_order: List[int] = []
        self.matrix = AccuracyMatrix(n_tasks=tasks.num_tasks)
        self.memory_trace: List[int] = []
        self.wall_clock: List[float] = []
        self.last_predictions: List[Tuple[int, int]] = []

    # --- helpers ---
    @property
    def head_of(self) -> Dict[int, int]:
        return {c: i for i, c in enumerate(self.class_order)}

    def _labels(self, class_ids: Sequence[int]) -> torch.Tensor:
        head = self.head_of
        return torch.tensor([head[int(c)] for c in class_ids], dtype=torch.long)

    def _memory_clip(self, stored: np.ndarray, mode: str = "eval", seed: int = 0) -> np.ndarray:
        budget = self.config.budget
        if budget is not None and not budget.downsampled:
            return stored[segment_sample(stored.shape[0], self.config.segments_n, mode, seed)]
        return stored

    def _memory_clip_tensor(self, stored: np.ndarray) -> torch.Tensor:
        return clips_to_tensor(self._memory_clip(stored)[None])

    def _old_logits(self, clips: torch.Tensor) -> Optional[torch.Tensor]:
        if self.old_model is None or self.config.base_method not in DISTILL_METHODS:
            return None
        with torch.no_grad():
            logits = self.old_model(clips)
            if self.config.base_method == "bic":
                logits = cl_methods.apply_bias_layers(self.bias_layers, logits)
        return logits

    def _objective(self, logits: torch.Tensor, labels: torch.Tensor, old_logits: Optional[torch.Tensor]
                   ) -> torch.Tensor:
        base = self.config.base_method
        if base in ("naive", "icarl"):
            return cl_methods.icarl_loss(logits, labels, old_logits)
        if base == "bic":
            return cl_methods.bic_loss(logits, labels, old_logits)
        return F.cross_entropy(logits, labels)

    def _clip_loss(self, clips: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Method objective on one batch, wrapped in the temporal-consistency loss for +tc methods."""
        full = self._objective(self.model(clips), labels, self._old_logits(clips))
        k = self.config.tc_k()
        if not self.config.uses_tc or clips.shape[1] <= k:
            return full
        down_clips = clips[:, uniform_subsample(clips.shape[1], k)]
        down = self._objective(self.model(down_clips), labels, self._old_logits(down_clips))
        return cl_methods.tc_combine(full, down, self.config.lambda_tc)

    def _replay_stream(self, memory: EpisodicMemory, task_index: int, epoch: int
                       ) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
        cycle = 0
        while True:
            seed = derive_seed(self.config.seed, task_index, epoch, 1, cycle)
            empty = True
            for b, (stacks, class_ids) in enumerate(replay_batches(memory, self.config.batch_size, seed)):
                empty = False
                clips = np.stack([self._memory_clip(s, "train", derive_seed(seed, b, j)) for j, s in enumerate(stacks)])
                yield clips_to_tensor(clips), self._labels(class_ids)
            if empty:
                return
            cycle += 1

    # --- task stages ---
    def _split_bic_heldout(self, task: Task) -> Tuple[List[str], List[str], Optional[EpisodicMemory], List[MemoryEntry]]:
        train_ids = list(task.train_ids)
        if self.config.base_method != "bic" or not self.class_order or self.memory is None or len(self.memory) == 0:
            return train_ids, [], self.memory, []

        by_class: Dict[int, List[str]] = {}
        for vid in train_ids:
            by_class.setdefault(self.reader.record(vid).class_id, []).append(vid)
        heldout_new: List[str] = []
        for c in sorted(by_class):
            vids = by_class[c]
            n = max(1, int(round(self.config.bic_heldout_fraction * len(vids))))
            if len(vids) > 1:
                heldout_new.extend(vids[: min(n, len(vids) - 1)])
        per_class = max(1, int(round(len(heldout_new) / max(1, len(by_class)))))

        heldout_old: List[MemoryEntry] = []
        replay_entries: Dict[int, Tuple[MemoryEntry, ...]] = {}
        for c, entries in self.memory.entries.items():
            ranked = sorted(entries, key=lambda e: e.selection_rank)
            m = min(per_class, max(0, len(ranked) - 1)) if len(ranked) > 1 else len(ranked)
            cut = len(ranked) - m
            heldout_old.extend(ranked[cut:])
            replay_entries[c] = tuple(ranked[:cut])
        replay_memory = EpisodicMemory(self.memory.budget, replay_entries, self.memory.classes_seen)
        held = set(heldout_new)
        return [v for v in train_ids if v not in held], heldout_new, replay_memory, heldout_old

    def _train_task(self, task: Task, train_ids: List[str], replay_memory: Optional[EpisodicMemory]) -> None:
        cfg = self.config
        opt = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate)
        use_replay = replay_memory is not None and len(replay_memory) > 0
        bar = tqdm(range(cfg.epochs), desc=f"task {task.task_index}", disable=not self.progress, leave=False)
        for epoch in bar:
            self.model.train()
            order = np.random.default_rng(derive_seed(cfg.seed, task.task_index, epoch, 0)).permutation(len(train_ids))
            replay = self._replay_stream(replay_memory, task.task_index, epoch) if use_replay else None
            epoch_loss = 0.0
            for b, chunk in enumerate(_batched(order, cfg.batch_size)):
                vids = [train_ids[i] for i in chunk]
                clips = clips_to_tensor(np.stack([
                    self.reader.clip(v, cfg.segments_n, "train", derive_seed(cfg.seed, task.task_index, epoch, 2, i))
                    for v, i in zip(vids, chunk)
                ]))
                labels = self._labels([self.reader.record(v).class_id for v in vids])
                loss = self._clip_loss(clips, labels)
                if replay is not None:
                    mem_clips, mem_labels = next(replay)
                    loss = loss + self._clip_loss(mem_clips, mem_labels)
                if self.importance is not None:
                    loss = loss + cl_methods.regularization_penalty(self.importance, self.model)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_loss += float(loss.detach())
            bar.set_postfix(loss=f"{epoch_loss:.4f}")
            LOG(f"task {task.task_index} epoch {epoch + 1}/{cfg.epochs} loss {epoch_loss:.4f}")

    def _eval_batches(self, video_ids: Sequence[str], with_labels: bool = True):
        for chunk in _batched(list(video_ids), self.config.batch_size):
            clips = clips_to_tensor(np.stack([self.reader.clip(v, self.config.segments_n, "eval") for v in chunk]))
            labels = self._labels([self.reader.record(v).class_id for v in chunk])
            yield (clips, labels) if with_labels else clips

    def _fit_bias(self, task: Task, heldout_new: List[str], heldout_old: List[MemoryEntry]) -> None:
        def stream():
            yield from self._eval_batches(heldout_new)
            for chunk in _batched(heldout_old, self.config.batch_size):
                clips = clips_to_tensor(np.stack([self._memory_clip(e.stored_frames) for e in chunk]))
                yield clips, self._labels([e.class_id for e in chunk])

        new_heads = [self.head_of[c] for c in task.class_ids]
        self.model.eval()
        layer = cl_methods.bic_fit(self.model, stream(), new_heads, self.bias_layers, self.config.bic_max_iter)
        LOG(f"task {task.task_index} bias correction alpha={layer.alpha:.4f} beta={layer.beta:.4f}")
        self.bias_layers.append(layer)

    def _update_memory(self, task: Task) -> None:
        cfg = self.config
        budget = cfg.budget
        classes_after = len(self.class_order)
        quota = budget.quota(classes_after)
        candidates = [(v, self.reader.record(v).class_id) for v in task.train_ids]

        if cfg.base_method == "naive":
            selected = select_exemplars_random(candidates, quota, derive_seed(cfg.seed, task.task_index, 3))
        else:
            selected = []
            self.model.eval()
            for c in task.class_ids:
                vids = [v for v, cls in candidates if cls == c]
                if not vids or quota == 0:
                    continue
                feats = []
                with torch.no_grad():
                    for chunk in _batched(vids, cfg.batch_size):
                        clips = clips_to_tensor(np.stack([self._stored_view(v) for v in chunk]))
                        feats.append(F.normalize(self.model.features(clips), dim=1))
                order = select_exemplars_herding(torch.cat(feats).numpy(), quota)
                selected.extend(MemoryEntry(vids[i], c, rank) for rank, i in enumerate(order))

        self.memory = rebalance(self.memory, classes_after)
        self.memory = insert_exemplars(self.memory, selected, self.manifest, self.reader.source)
        counts = self.memory.class_counts()
        LOG(f"task {task.task_index} memory: {len(self.memory)} videos, {self.memory.total_frames}/"
            f"{budget.frame_capacity} frames, per-class {min(counts.values())}-{max(counts.values())}")

    def _stored_view(self, video_id: str) -> np.ndarray:
        """Frames a video would have once stored, as the herding feature input."""
        budget = self.config.budget
        rec = self.reader.record(video_id)
        if budget.downsampled:
            return self.reader.read(video_id, uniform_subsample(rec.total_frames, int(budget.frames_per_video)))
        return self.reader.clip(video_id, self.config.segments_n, "eval")

    def _update_importance(self, task: Task) -> None:
        self.model.eval()
        if self.config.method == "ewc":
            omega = cl_methods.ewc_importance(self.model, self._eval_batches(task.train_ids))
        else:
            omega = cl_methods.mas_importance(self.model, self._eval_batches(task.train_ids, with_labels=False))
        self.importance = cl_methods.consolidate(self.importance, omega, self.model, self.config.lambda_reg)

    def _evaluate(self, upto: int) -> List[float]:
        row = []
        final_preds: List[Tuple[int, int]] = []
        for j in range(upto + 1):
            ids = self.tasks.tasks[j].ids(self.config.eval_partition)
            preds = predict_videos(
                self.model, self.memory, self.config.method, ids, self.reader, self.class_order,
                segments_n=self.config.segments_n, bias_layers=self.bias_layers,
                memory_clip=self._memory_clip_tensor, batch_size=max(self.config.batch_size, 32),
            )
            if not preds:
                raise DataError(f"task {j} has no '{self.config.eval_partition}' videos to evaluate")
            row.append(sum(int(t == p) for t, p in preds) / len(preds))
            final_preds.extend(preds)
        self.last_predictions = final_preds
        return row

    def run_task(self, t: int) -> None:
        task = self.tasks.tasks[t]
        if not task.train_ids or not task.class_ids:
            raise DataError(f"task {t} is empty")
        started = time.perf_counter()

        new_classes = [c for c in task.class_ids if c not in self.head_of]
        self.model.expand_head(len(new_classes), generator=torch.Generator().manual_seed(derive_seed(self.config.seed, t, 4)))
        self.class_order.extend(new_classes)

        train_ids, heldout_new, replay_memory, heldout_old = self._split_bic_heldout(task)
        self._train_task(task, train_ids, replay_memory)

        if heldout_new and heldout_old:
            self._fit_bias(task, heldout_new, heldout_old)
        if self.config.uses_memory:
            self._update_memory(task)
            self.memory_trace.append(self.memory.total_frames)
        else:
            self.memory_trace.append(0)
        if self.config.uses_regularization:
            self._update_importance(task)
        self.old_model = copy.deepcopy(self.model).eval()

        row = self._evaluate(t)
        self.matrix.add_row(row)
        self.wall_clock.append(time.perf_counter() - started)
        LOG(f"after task {t}: " + ", ".join(f"{a:.3f}" for a in row))
        if self.on_task_end is not None:
            self.on_task_end(self, t)

    def run(self, start_task: int = 0) -> ExperimentResult:
        for t in range(start_task, self.tasks.num_tasks):
            self.run_task(t)
        return self.result()

    def result(self) -> ExperimentResult:
        report = per_class_report(self.last_predictions, classes=self.class_order) if self.last_predictions else None
        return ExperimentResult(
            accuracy_matrix=self.matrix,
            per_class_accuracy=dict(report.accuracy) if report else {},
            memory_trace=list(self.memory_trace),
            wall_clock=list(self.wall_clock),
            per_class=report,
            final_predictions=list(self.last_predictions),
        )

    # --- checkpoints ---
    def save_checkpoint(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.save({"num_classes": self.model.num_classes, "state_dict": self.model.state_dict()}, out_dir / "model.pt")
        if self.memory is not None:
            save_memory_snapshot(self.memory, out_dir / "memory")
        if self.importance is not None:
            cl_methods.save_importance(self.importance, out_dir / "importance.pt")
        state = {
            "completed_tasks": self.matrix.completed,
            "class_order": self.class_order,
            "bias_layers": [
                {"alpha": l.alpha, "beta": l.beta, "new_class_ids": sorted(l.new_class_ids)} for l in self.bias_layers
            ],
            "accuracy_rows": self.matrix.rows,
            "memory_trace": self.memory_trace,
            "wall_clock": self.wall_clock,
        }
        with (out_dir / "trainer_state.json").open("w", encoding="utf-8") as f:
            json.dump(state, f, indent=2)
        return out_dir

    def restore_checkpoint(self, in_dir: Union[str, Path]) -> int:
        """Load a task-boundary checkpoint; returns the index of the next task to train."""
        in_dir = Path(in_dir)
        with (in_dir / "trainer_state.json").open("r", encoding="utf-8") as f:
            state = json.load(f)
        blob = torch.load(in_dir / "model.pt", map_location="cpu", weights_only=True)
        self.model.expand_head(int(blob["num_classes"]) - self.model.num_classes)
        self.model.load_state_dict(blob["state_dict"])
        self.old_model = copy.deepcopy(self.model).eval()

        if self.config.uses_memory:
            self.memory = load_memory_snapshot(in_dir / "memory")
        if self.config.uses_regularization and (in_dir / "importance.pt").exists():
            self.importance = cl_methods.load_importance(in_dir / "importance.pt")
        self.class_order = [int(c) for c in state["class_order"]]
        self.bias_layers = [
            BiasCorrectionLayer(l["alpha"], l["beta"], frozenset(l["new_class_ids"])) for l in state["bias_layers"]
        ]
        self.matrix = AccuracyMatrix(n_tasks=self.tasks.num_tasks, rows=state["accuracy_rows"])
        self.memory_trace = list(state["memory_trace"])
        self.wall_clock = list(state["wall_clock"])
        done = int(state["completed_tasks"])
        if done > 0:
            self.last_predictions = []
            self._evaluate(done - 1)
        return done


def run_sequence(config: RunConfig, manifest: DatasetManifest, tasks: TaskSequence, source: FrameSource,
                 progress: bool = False) -> ExperimentResult:
    """Train the configured method over the task sequence and evaluate after every task."""
    return SequenceTrainer(config, manifest, tasks, source, progress=progress).run()
