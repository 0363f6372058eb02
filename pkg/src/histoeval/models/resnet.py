"""ResNet50 and BoTNet50 trunks built from relevance-aware layers."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from . import layers as L
from .base import Classifier


class RelPosMHSA(nn.Module):
    """Multi-head self-attention over a 2D feature map with relative position logits.

    Logits are ``q·k + q·(r_h[dy] + r_w[dx])`` where ``dy, dx`` are the key-minus-query
    offsets on the grid.
    """

    def __init__(self, dim: int, fmap_size: int, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.dim_head = dim // heads
        self.fmap_size = fmap_size
        self.scale = self.dim_head ** -0.5
        self.to_q = L.Conv2d(dim, dim, 1, bias=False)
        self.to_k = L.Conv2d(dim, dim, 1, bias=False)
        self.to_v = L.Conv2d(dim, dim, 1, bias=False)
        self.rel_height = nn.Parameter(torch.randn(2 * fmap_size - 1, self.dim_head) * self.scale)
        self.rel_width = nn.Parameter(torch.randn(2 * fmap_size - 1, self.dim_head) * self.scale)
        coords = torch.arange(fmap_size)
        yy, xx = torch.meshgrid(coords, coords, indexing="ij")
        yy, xx = yy.flatten(), xx.flatten()
        self.register_buffer("idx_h", (yy[None, :] - yy[:, None]) + fmap_size - 1, persistent=False)
        self.register_buffer("idx_w", (xx[None, :] - xx[:, None]) + fmap_size - 1, persistent=False)
        self.fan_out = L.Clone()
        self.q_fan = L.Clone()
        self.content = L.Einsum("bhid,bhjd->bhij")
        self.position = L.Einsum("bhid,ijd->bhij")
        self.logits = L.Add()
        self.softmax = L.Softmax(dim=-1)
        self.mix = L.Einsum("bhij,bhjd->bhid")
        self.attn_probs: torch.Tensor | None = None

    def _split(self, t):
        b, c, h, w = t.shape
        return t.reshape(b, self.heads, self.dim_head, h * w).transpose(2, 3)

    def _merge(self, t, h, w):
        b = t.shape[0]
        return t.transpose(2, 3).reshape(b, self.heads * self.dim_head, h, w)

    def forward(self, x):
        b, c, h, w = x.shape
        if h != self.fmap_size or w != self.fmap_size:
            raise ValueError(f"MHSA built for {self.fmap_size}x{self.fmap_size}, got {h}x{w}")
        xq, xk, xv = self.fan_out(x, 3)
        q = self._split(self.to_q(xq)) * self.scale
        k = self._split(self.to_k(xk))
        v = self._split(self.to_v(xv))
        q1, q2 = self.q_fan(q, 2)
        rel = self.rel_height[self.idx_h] + self.rel_width[self.idx_w]
        logits = self.logits([self.content(q1, k), self.position(q2, rel)])
        attn = self.softmax(logits)
        self.attn_probs = attn
        out = self.mix(attn, v)
        self._hw = (h, w)
        return self._merge(out, h, w)

    def relprop(self, R, eps=L.DEFAULT_EPS):
        h, w = self._hw
        R = self._split(R)
        R_attn, R_v = self.mix.relprop(R, eps)
        R_content, R_pos = self.logits.relprop(self.softmax.relprop(R_attn, eps), eps)
        R_q1, R_k = self.content.relprop(R_content, eps)
        R_q2, _ = self.position.relprop(R_pos, eps)
        R_q = self.q_fan.relprop([R_q1, R_q2], eps)
        R_xq = self.to_q.relprop(self._merge(R_q, h, w), eps)
        R_xk = self.to_k.relprop(self._merge(R_k, h, w), eps)
        R_xv = self.to_v.relprop(self._merge(R_v, h, w), eps)
        return self.fan_out.relprop([R_xq, R_xk, R_xv], eps)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes: int, planes: int, stride: int = 1, mhsa_fmap: int | None = None,
                 heads: int = 4):
        super().__init__()
        out = planes * self.expansion
        self.conv1 = L.ConvBN(inplanes, planes, 1)
        self.relu1 = L.ReLU()
        if mhsa_fmap is None:
            self.conv2 = L.ConvBN(planes, planes, 3, stride=stride, padding=1)
        else:
            parts = [RelPosMHSA(planes, mhsa_fmap, heads)]
            if stride == 2:
                parts.append(L.AvgPool2d(2, 2))
            parts.append(L.BatchNorm2d(planes))
            self.conv2 = L.Sequential(*parts)
        self.relu2 = L.ReLU()
        self.conv3 = L.ConvBN(planes, out, 1)
        self.downsample = None
        if stride != 1 or inplanes != out:
            self.downsample = L.ConvBN(inplanes, out, 1, stride=stride)
        self.fan_out = L.Clone()
        self.add = L.Add()
        self.relu3 = L.ReLU()

    def forward(self, x):
        x_main, x_skip = self.fan_out(x, 2)
        y = self.relu1(self.conv1(x_main))
        y = self.relu2(self.conv2(y))
        y = self.conv3(y)
        skip = self.downsample(x_skip) if self.downsample is not None else x_skip
        return self.relu3(self.add([y, skip]))

    def relprop(self, R, eps=L.DEFAULT_EPS):
        R = self.relu3.relprop(R, eps)
        R_main, R_skip = self.add.relprop(R, eps)
        if self.downsample is not None:
            R_skip = self.downsample.relprop(R_skip, eps)
        R_main = self.conv3.relprop(R_main, eps)
        R_main = L.relprop(self.conv2, R_main, eps)
        R_main = self.conv1.relprop(R_main, eps)
        return self.fan_out.relprop([R_main, R_skip], eps)


class ResNetTrunk(Classifier):
    """Bottleneck ResNet; optionally with self-attention in the last stage (BoTNet).

    ``neck_dim`` inserts a hidden affine+ReLU layer between pooling and the
    classification layer; the penultimate features are then ``neck_dim`` wide.
    """

    def __init__(self, n_classes: int, input_size: int, blocks=(3, 4, 6, 3), width: int = 64,
                 mhsa_last_stage: bool = False, heads: int = 4, neck_dim: int | None = None):
        super().__init__()
        self.input_size = input_size
        self.stem = L.Sequential(
            L.ConvBN(3, width, 7, stride=2, padding=3), L.ReLU(), L.MaxPool2d(3, 2, 1))
        size = _after_stem(input_size)
        inplanes = width
        stages = []
        for i, n in enumerate(blocks):
            planes = width * 2 ** i
            stride = 1 if i == 0 else 2
            use_mhsa = mhsa_last_stage and i == len(blocks) - 1
            stage = []
            for j in range(n):
                s = stride if j == 0 else 1
                stage.append(Bottleneck(inplanes, planes, s, mhsa_fmap=size if use_mhsa else None,
                                        heads=heads))
                inplanes = planes * Bottleneck.expansion
                if s == 2:
                    size = math.ceil(size / 2) if not use_mhsa else size // 2
            stages.append(L.Sequential(*stage))
        self.layer1, self.layer2, self.layer3, self.layer4 = stages
        self.pool = L.Sequential(L.AdaptiveAvgPool2d(1), L.Flatten())
        if neck_dim:
            self.neck = L.Sequential(L.Linear(inplanes, neck_dim), L.ReLU())
            self.feature_dim = neck_dim
        else:
            self.neck = L.Sequential(L.Identity())
            self.feature_dim = inplanes
        self.head = L.Linear(self.feature_dim, n_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def stages(self):
        return {"stem": self.stem, "layer1": self.layer1, "layer2": self.layer2,
                "layer3": self.layer3, "layer4": self.layer4}

    def features(self, x):
        x = self.stem(x)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return self.neck(self.pool(x))

    def relprop_features(self, R, eps=L.DEFAULT_EPS):
        for part in (self.neck, self.pool, self.layer4, self.layer3, self.layer2, self.layer1, self.stem):
            R = part.relprop(R, eps)
        return R

    def attention_maps(self):
        last = self.layer4[-1].conv2
        if isinstance(last, L.Sequential) and isinstance(last[0], RelPosMHSA):
            return last[0].attn_probs
        return None


def _after_stem(size: int) -> int:
    size = (size + 2 * 3 - 7) // 2 + 1
    return (size + 2 - 3) // 2 + 1


def botnet_fmap(input_size: int) -> int:
    """Side length of the feature map entering the last stage."""
    size = _after_stem(input_size)
    for _ in range(2):
        size = (size - 1) // 2 + 1
    return size
