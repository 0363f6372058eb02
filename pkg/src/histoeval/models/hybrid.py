from __future__ import annotations

import torch

from . import layers as L
from .base import Classifier


class Hybrid(Classifier):
    """Two backbones whose penultimate features are concatenated and classified by one affine layer."""

    def __init__(self, m1: Classifier, m2: Classifier, n_classes: int):
        super().__init__()
        self.m1 = m1
        self.m2 = m2
        self.input_size = m1.input_size
        self.fan_out = L.Clone()
        self.cat = L.Cat(1)
        self.feature_dim = m1.feature_dim + m2.feature_dim
        self.head = L.Linear(self.feature_dim, n_classes)

    @property
    def aux_logits(self):
        return getattr(self.m1, "aux_logits", None), getattr(self.m2, "aux_logits", None)

    def features(self, x):
        x1, x2 = self.fan_out(x, 2)
        return self.cat([self.m1.features(x1), self.m2.features(x2)])

    def relprop_branches(self, R: torch.Tensor, eps: float = L.DEFAULT_EPS):
        """Input relevance of each branch, starting from relevance on the hybrid logits."""
        R1, R2 = self.cat.relprop(self.head.relprop(R, eps), eps)
        return self.m1.relprop_features(R1, eps), self.m2.relprop_features(R2, eps)

    def relprop_features(self, R, eps=L.DEFAULT_EPS):
        R1, R2 = self.cat.relprop(R, eps)
        return self.fan_out.relprop(
            [self.m1.relprop_features(R1, eps), self.m2.relprop_features(R2, eps)], eps)
