"""Inception V3 with relevance-aware layers.

Channel widths follow the reference network; ``scale`` shrinks every width
for desk-scale experiments. The auxiliary classifier is built (it carries
part of the reference parameter budget) and only contributes a training loss;
``forward`` always returns the main logits.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from . import layers as L
from .base import Classifier


def _conv(cin, cout, k, stride=1, padding=0):
    return L.Sequential(L.ConvBN(cin, cout, k, stride=stride, padding=padding, bn_eps=1e-3), L.ReLU())


class _Branched(nn.Module):
    """Parallel branches over one input, concatenated along channels."""

    def __init__(self, branches):
        super().__init__()
        self.branches = nn.ModuleList(branches)
        self.fan_out = L.Clone()
        self.cat = L.Cat(1)

    def forward(self, x):
        xs = self.fan_out(x, len(self.branches))
        return self.cat([b(xi) for b, xi in zip(self.branches, xs)])

    def relprop(self, R, eps=L.DEFAULT_EPS):
        parts = self.cat.relprop(R, eps)
        return self.fan_out.relprop([L.relprop(b, r, eps) for b, r in zip(self.branches, parts)], eps)


def _pool_branch(cin, cout):
    return L.Sequential(L.AvgPool2d(3, 1, 1), _conv(cin, cout, 1))


def inception_a(cin, pool_features, c):
    return _Branched([
        _conv(cin, c(64), 1),
        L.Sequential(_conv(cin, c(48), 1), _conv(c(48), c(64), 5, padding=2)),
        L.Sequential(_conv(cin, c(64), 1), _conv(c(64), c(96), 3, padding=1),
                     _conv(c(96), c(96), 3, padding=1)),
        _pool_branch(cin, pool_features),
    ])


def inception_b(cin, c):
    return _Branched([
        _conv(cin, c(384), 3, stride=2),
        L.Sequential(_conv(cin, c(64), 1), _conv(c(64), c(96), 3, padding=1),
                     _conv(c(96), c(96), 3, stride=2)),
        L.Sequential(L.MaxPool2d(3, 2)),
    ])


def inception_c(cin, c7, c):
    return _Branched([
        _conv(cin, c(192), 1),
        L.Sequential(_conv(cin, c7, 1), _conv(c7, c7, (1, 7), padding=(0, 3)),
                     _conv(c7, c(192), (7, 1), padding=(3, 0))),
        L.Sequential(_conv(cin, c7, 1), _conv(c7, c7, (7, 1), padding=(3, 0)),
                     _conv(c7, c7, (1, 7), padding=(0, 3)), _conv(c7, c7, (7, 1), padding=(3, 0)),
                     _conv(c7, c(192), (1, 7), padding=(0, 3))),
        _pool_branch(cin, c(192)),
    ])


def inception_d(cin, c):
    return _Branched([
        L.Sequential(_conv(cin, c(192), 1), _conv(c(192), c(320), 3, stride=2)),
        L.Sequential(_conv(cin, c(192), 1), _conv(c(192), c(192), (1, 7), padding=(0, 3)),
                     _conv(c(192), c(192), (7, 1), padding=(3, 0)), _conv(c(192), c(192), 3, stride=2)),
        L.Sequential(L.MaxPool2d(3, 2)),
    ])


def _split_pair(cin, cout):
    """1x3 and 3x1 convolutions applied to the same input, concatenated."""
    return _Branched([_conv(cin, cout, (1, 3), padding=(0, 1)), _conv(cin, cout, (3, 1), padding=(1, 0))])


def inception_e(cin, c):
    return _Branched([
        _conv(cin, c(320), 1),
        L.Sequential(_conv(cin, c(384), 1), _split_pair(c(384), c(384))),
        L.Sequential(_conv(cin, c(448), 1), _conv(c(448), c(384), 3, padding=1), _split_pair(c(384), c(384))),
        _pool_branch(cin, c(192)),
    ])


class AuxHead(nn.Module):
    def __init__(self, cin, n_classes, c):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(5)
        self.conv0 = _conv(cin, c(128), 1)
        self.conv1 = _conv(c(128), c(768), 5)
        self.fc = nn.Linear(c(768), n_classes)

    def forward(self, x):
        x = self.conv1(self.conv0(self.pool(x)))
        return self.fc(torch.flatten(x, 1))


class InceptionV3(Classifier):
    min_input_size = 75

    def __init__(self, n_classes: int, input_size: int, scale: float = 1.0, aux_head: bool = True,
                 dropout: float = 0.5):
        super().__init__()
        self.input_size = input_size

        def c(n):
            return max(4, int(round(n * scale)))

        self.stem = L.Sequential(
            _conv(3, c(32), 3, stride=2), _conv(c(32), c(32), 3), _conv(c(32), c(64), 3, padding=1),
            L.MaxPool2d(3, 2), _conv(c(64), c(80), 1), _conv(c(80), c(192), 3), L.MaxPool2d(3, 2))

        a_out = lambda pf: c(64) + c(64) + c(96) + pf  # noqa: E731
        self.mixed_5 = L.Sequential(
            inception_a(c(192), c(32), c),
            inception_a(a_out(c(32)), c(64), c),
            inception_a(a_out(c(64)), c(64), c))
        cin = a_out(c(64))
        b_out = c(384) + c(96) + cin
        c_out = 4 * c(192)
        self.mixed_6 = L.Sequential(
            inception_b(cin, c),
            inception_c(b_out, c(128), c),
            inception_c(c_out, c(160), c),
            inception_c(c_out, c(160), c),
            inception_c(c_out, c(192), c))
        self.aux = AuxHead(c_out, n_classes, c) if aux_head else None
        d_out = c(320) + c(192) + c_out
        e_out = c(320) + 2 * c(384) + 2 * c(384) + c(192)
        self.mixed_7 = L.Sequential(inception_d(c_out, c), inception_e(d_out, c), inception_e(e_out, c))
        self.pool = L.Sequential(L.AdaptiveAvgPool2d(1), L.Flatten(), L.Dropout(dropout))
        self.feature_dim = e_out
        self.head = L.Linear(e_out, n_classes)
        self.aux_logits: torch.Tensor | None = None
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.trunc_normal_(m.weight, mean=0.0, std=0.1, a=-2, b=2)

    def features(self, x):
        x = self.mixed_6(self.mixed_5(self.stem(x)))
        self.aux_logits = self.aux(x) if (self.aux is not None and self.training) else None
        return self.pool(self.mixed_7(x))

    def relprop_features(self, R, eps=L.DEFAULT_EPS):
        for part in (self.pool, self.mixed_7, self.mixed_6, self.mixed_5, self.stem):
            R = part.relprop(R, eps)
        return R
