from __future__ import annotations

import torch
import torch.nn as nn

from . import layers as L


class Classifier(nn.Module):
    """Common shape of every zoo model: ``logits = head(features(x))``.

    Subclasses implement ``features`` and ``relprop_features``; the final
    affine layer lives in ``self.head`` so hybrids and attribution can reach
    the penultimate representation uniformly.
    """

    feature_dim: int
    input_size: int
    head: L.Linear

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def relprop_features(self, R: torch.Tensor, eps: float = L.DEFAULT_EPS) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def relprop(self, R: torch.Tensor, eps: float = L.DEFAULT_EPS) -> torch.Tensor:
        return self.relprop_features(self.head.relprop(R, eps), eps)

    def attention_maps(self) -> torch.Tensor | None:
        """Post-softmax attention of the topmost attention layer, (B, heads, N, N)."""
        return None
