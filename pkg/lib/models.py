"""Reference backbone: a tiny TSN-shaped network for desk-scale runs.

Each sampled frame is encoded together with its deviation from the clip's mean frame and
its relative position in the clip. Both describe where a frame sits in the sampled span,
not how densely the span was sampled, which keeps 4 stored frames and 8 sampled frames of
one video comparable. Per-frame features are averaged over the segments
(consensus) and a linear head produces class logits. The head grows at task
boundaries without touching the weights of classes already learned.

Any model used by the harness has to provide the same surface:
``forward(clips) -> logits``, ``features(clips) -> (B, D)``, ``expand_head(n)``,
``num_classes`` and flat parameter read/write.
"""

from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters


def clips_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(B, T, H, W) uint8 frames -> float32 tensor in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(frames)).float().div_(255.0)


class SegmentConsensusNet(nn.Module):
    def __init__(self, num_classes: int = 0, width: int = 24, feature_dim: int = 48, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        gen = torch.Generator().manual_seed(seed)
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, kernel_size=5, stride=2, padding=2),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, feature_dim, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self._init_from(gen, self.encoder)
        self.head: Optional[nn.Linear] = None
        if num_classes > 0:
            self.expand_head(num_classes, generator=gen)

    @staticmethod
    def _init_from(gen: torch.Generator, module: nn.Module) -> None:
        # deterministic init independent of the global RNG
        with torch.no_grad():
            for m in module.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    bound = 1.0 / np.sqrt(fan_in)
                    m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=gen))
                    if m.bias is not None:
                        m.bias.copy_(torch.empty_like(m.bias).uniform_(-bound, bound, generator=gen))

    @property
    def num_classes(self) -> int:
        return 0 if self.head is None else self.head.out_features

    def expand_head(self, n_new: int, generator: Optional[torch.Generator] = None) -> None:
        """Add n_new output classes; existing rows are copied bit-for-bit."""
        if n_new < 1:
            return
        gen = generator if generator is not None else torch.Generator().manual_seed(self.num_classes)
        new_head = nn.Linear(self.feature_dim, self.num_classes + n_new)
        self._init_from(gen, new_head)
        if self.head is not None:
            with torch.no_grad():
                old = self.head.out_features
                new_head.weight[:old].copy_(self.head.weight)
                new_head.bias[:old].copy_(self.head.bias)
        new_head.to(self.encoder[0].weight.device)
        self.head = new_head

    def _frame_inputs(self, clips: torch.Tensor) -> torch.Tensor:
        # (B, T, H, W) -> (B*T, 3, H, W): frame, deviation from the mean frame, centered relative time
        b, t, h, w = clips.shape
        deviation = clips - clips.mean(dim=1, keepdim=True)
        rel_time = (torch.arange(t, dtype=clips.dtype, device=clips.device) + 0.5) / t - 0.5
        rel_time = rel_time.view(1, t, 1, 1).expand(b, t, h, w)
        return torch.stack([clips, deviation, rel_time], dim=2).reshape(b * t, 3, h, w)

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        b, t = clips.shape[:2]
        per_frame = self.encoder(self._frame_inputs(clips)).reshape(b, t, self.feature_dim)
        return per_frame.mean(dim=1)  # segment consensus

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        if self.head is None:
            raise RuntimeError("model has no output head yet; call expand_head first")
        return self.head(self.features(clips))

    # --- flat parameter access ---
    def parameter_vector(self) -> torch.Tensor:
        return parameters_to_vector(self.parameters()).detach().clone()

    def load_parameter_vector(self, vec: torch.Tensor) -> None:
        vector_to_parameters(vec, self.parameters())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
