"""Relevance-aware building blocks.

Every layer caches the input of its latest forward pass and implements
``relprop(R, eps)``, which maps relevance on the layer output back onto that
input. Affine layers use the epsilon rule, computed with autograd as
``x * J^T (R / stab(z))`` so the same code serves linear, convolutional and
pooling layers. Pointwise nonlinearities pass relevance through unchanged.
"""
from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import RuleCoverageError

DEFAULT_EPS = 1e-6


def safe_divide(num: torch.Tensor, den: torch.Tensor, eps: float) -> torch.Tensor:
    """``num / (den + eps * sign(den))`` with zero wherever the denominator vanishes."""
    stab = den + eps * torch.where(den >= 0, torch.ones_like(den), -torch.ones_like(den))
    safe = torch.where(stab == 0, torch.ones_like(stab), stab)
    return torch.where(stab == 0, torch.zeros_like(num), num / safe)


def epsilon_rule(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                 R: torch.Tensor, eps: float) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        z = fn(x)
        s = safe_divide(R, z.detach(), eps)
        (c,) = torch.autograd.grad(z, x, grad_outputs=s)
    return x.detach() * c


def relprop(module: nn.Module, R, eps: float = DEFAULT_EPS):
    """Dispatch relevance propagation, failing loudly on uncovered layers."""
    fn = getattr(module, "relprop", None)
    if fn is None:
        raise RuleCoverageError(f"no relevance rule registered for layer {type(module).__name__}")
    return fn(R, eps)


class _Cached:
    X: torch.Tensor

    def _keep(self, x):
        self.X = x
        return x


class Linear(nn.Linear, _Cached):
    def forward(self, x):
        return super().forward(self._keep(x))

    def relprop(self, R, eps=DEFAULT_EPS):
        return epsilon_rule(super().forward, self.X, R, eps)


class Conv2d(nn.Conv2d, _Cached):
    def forward(self, x):
        return super().forward(self._keep(x))

    def relprop(self, R, eps=DEFAULT_EPS):
        return epsilon_rule(super().forward, self.X, R, eps)


class BatchNorm2d(nn.BatchNorm2d, _Cached):
    def forward(self, x):
        return super().forward(self._keep(x))

    def relprop(self, R, eps=DEFAULT_EPS):
        return epsilon_rule(super().forward, self.X, R, eps)


class ConvBN(nn.Module, _Cached):
    """Convolution followed by batch normalization.

    For relevance, the pair is treated as one affine map (normalization folded
    into the convolution), so the epsilon rule sees the post-BN pre-activation.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_size, stride=1, padding=0,
                 groups: int = 1, bn_eps: float = 1e-5):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=padding,
                              groups=groups, bias=False)
        self.bn = nn.BatchNorm2d(out_ch, eps=bn_eps)

    def _affine(self, x):
        return self.bn(self.conv(x))

    def forward(self, x):
        return self._affine(self._keep(x))

    def relprop(self, R, eps=DEFAULT_EPS):
        if self.training:
            raise RuntimeError("relevance propagation requires eval mode (BN must be affine)")
        return epsilon_rule(self._affine, self.X, R, eps)


class _PassThrough(_Cached):
    def relprop(self, R, eps=DEFAULT_EPS):
        return R


class ReLU(nn.ReLU, _PassThrough):
    pass


class GELU(nn.GELU, _PassThrough):
    pass


class Dropout(nn.Dropout, _PassThrough):
    pass


class Identity(nn.Identity, _PassThrough):
    pass


class Softmax(nn.Softmax, _PassThrough):
    pass


class LayerNorm(nn.LayerNorm, _Cached):
    def forward(self, x):
        return super().forward(self._keep(x))

    def relprop(self, R, eps=DEFAULT_EPS):
        return epsilon_rule(super().forward, self.X, R, eps)


class MaxPool2d(nn.MaxPool2d, _Cached):
    """Relevance is routed to the winning input of each pooling window."""

    def forward(self, x):
        return super().forward(self._keep(x))

    def relprop(self, R, eps=DEFAULT_EPS):
        return epsilon_rule(super().forward, self.X, R, eps)


class AvgPool2d(nn.AvgPool2d, _Cached):
    def forward(self, x):
        return super().forward(self._keep(x))

    def relprop(self, R, eps=DEFAULT_EPS):
        return epsilon_rule(super().forward, self.X, R, eps)


class AdaptiveAvgPool2d(nn.AdaptiveAvgPool2d, _Cached):
    def forward(self, x):
        return super().forward(self._keep(x))

    def relprop(self, R, eps=DEFAULT_EPS):
        return epsilon_rule(super().forward, self.X, R, eps)


class Flatten(nn.Module, _Cached):
    def forward(self, x):
        self._keep(x)
        return torch.flatten(x, 1)

    def relprop(self, R, eps=DEFAULT_EPS):
        return R.reshape(self.X.shape)


class Add(nn.Module):
    """Sum of two tensors; relevance split in proportion to each summand."""

    def forward(self, inputs: Sequence[torch.Tensor]):
        self.X = [t for t in inputs]
        return self.X[0] + self.X[1]

    def relprop(self, R, eps=DEFAULT_EPS):
        a, b = self.X
        s = safe_divide(R, (a + b).detach(), eps)
        return [a.detach() * s, b.detach() * s]


class Cat(nn.Module):
    """Channel concatenation; relevance routed back to the branch that produced each channel."""

    def __init__(self, dim: int = 1):
        super().__init__()
        self.dim = dim

    def forward(self, inputs: Sequence[torch.Tensor]):
        self.sizes = [t.shape[self.dim] for t in inputs]
        return torch.cat(list(inputs), dim=self.dim)

    def relprop(self, R, eps=DEFAULT_EPS):
        return list(torch.split(R, self.sizes, dim=self.dim))


class Clone(nn.Module):
    """Fan-out point: the relevance arriving from every consumer is summed."""

    def forward(self, x, num: int):
        self.num = num
        return [x for _ in range(num)]

    def relprop(self, R, eps=DEFAULT_EPS):
        out = R[0]
        for r in R[1:]:
            out = out + r
        return out


class Einsum(nn.Module):
    """Bilinear product of two activations.

    Each operand receives the epsilon-rule share computed with the other
    operand held fixed; both shares are halved so the total is conserved.
    """

    def __init__(self, equation: str):
        super().__init__()
        self.equation = equation

    def forward(self, a, b):
        self.X = [a, b]
        return torch.einsum(self.equation, a, b)

    def relprop(self, R, eps=DEFAULT_EPS):
        a = self.X[0].detach().requires_grad_(True)
        b = self.X[1].detach().requires_grad_(True)
        with torch.enable_grad():
            z = torch.einsum(self.equation, a, b)
            s = safe_divide(R, z.detach(), eps)
            ca, cb = torch.autograd.grad(z, (a, b), grad_outputs=s)
        return [a.detach() * ca / 2, b.detach() * cb / 2]


class Sequential(nn.Sequential):
    def relprop(self, R, eps=DEFAULT_EPS):
        for module in reversed(self):
            R = relprop(module, R, eps)
        return R


def conv_bn_relu(in_ch: int, out_ch: int, kernel_size, stride=1, padding=0, bn_eps=1e-5) -> Sequential:
    return Sequential(ConvBN(in_ch, out_ch, kernel_size, stride, padding, bn_eps=bn_eps), ReLU())


def hardtanh01(x: torch.Tensor) -> torch.Tensor:
    return F.hardtanh(x, 0.0, 1.0)
