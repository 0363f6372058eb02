"""Vision transformers: patch-embedding ViT and ViT with a convolutional stem."""
from __future__ import annotations

import torch
import torch.nn as nn

from . import layers as L
from .base import Classifier


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.dim_head = dim // heads
        self.scale = self.dim_head ** -0.5
        self.qkv = L.Linear(dim, 3 * dim)
        self.qk = L.Einsum("bhid,bhjd->bhij")
        self.softmax = L.Softmax(dim=-1)
        self.av = L.Einsum("bhij,bhjd->bhid")
        self.proj = L.Linear(dim, dim)
        self.attn_probs: torch.Tensor | None = None
        self.attn_grad: torch.Tensor | None = None
        self.attn_relevance: torch.Tensor | None = None

    def _save_grad(self, grad):
        self.attn_grad = grad

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.dim_head).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * self.scale, qkv[1], qkv[2]
        attn = self.softmax(self.qk(q, k))
        if attn.requires_grad:
            attn.register_hook(self._save_grad)
        self.attn_probs = attn
        out = self.av(attn, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))

    def relprop(self, R, eps=L.DEFAULT_EPS):
        R = self.proj.relprop(R, eps)
        b, n, d = R.shape
        R = R.reshape(b, n, self.heads, self.dim_head).transpose(1, 2)
        R_attn, R_v = self.av.relprop(R, eps)
        self.attn_relevance = R_attn
        R_q, R_k = self.qk.relprop(self.softmax.relprop(R_attn, eps), eps)
        R_qkv = torch.stack([R_q, R_k, R_v]).permute(1, 3, 0, 2, 4).reshape(b, n, 3 * d)
        return self.qkv.relprop(R_qkv, eps)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int, dropout: float = 0.0):
        super().__init__()
        self.fan1 = L.Clone()
        self.norm1 = L.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.add1 = L.Add()
        self.fan2 = L.Clone()
        self.norm2 = L.LayerNorm(dim, eps=1e-6)
        self.mlp = L.Sequential(L.Linear(dim, mlp_dim), L.GELU(), L.Dropout(dropout),
                                L.Linear(mlp_dim, dim), L.Dropout(dropout))
        self.add2 = L.Add()

    def forward(self, x):
        x_skip, x_in = self.fan1(x, 2)
        x = self.add1([x_skip, self.attn(self.norm1(x_in))])
        x_skip, x_in = self.fan2(x, 2)
        return self.add2([x_skip, self.mlp(self.norm2(x_in))])

    def relprop(self, R, eps=L.DEFAULT_EPS):
        R_skip, R_in = self.add2.relprop(R, eps)
        R_in = self.norm2.relprop(self.mlp.relprop(R_in, eps), eps)
        R = self.fan2.relprop([R_skip, R_in], eps)
        R_skip, R_in = self.add1.relprop(R, eps)
        R_in = self.norm1.relprop(self.attn.relprop(R_in, eps), eps)
        return self.fan1.relprop([R_skip, R_in], eps)


class ConvStem(L.Sequential):
    """Stride-2 3x3 conv/BN/ReLU stack followed by a 1x1 projection to the token width."""

    def __init__(self, dim: int, channels=(64, 128, 256, 512)):
        parts = []
        cin = 3
        for c in channels:
            parts += [L.ConvBN(cin, c, 3, stride=2, padding=1), L.ReLU()]
            cin = c
        parts.append(L.Conv2d(cin, dim, 1))
        super().__init__(*parts)
        self.stride = 2 ** len(channels)


class _TokenSelect(nn.Module, L._Cached):
    def forward(self, x):
        self._keep(x)
        return x[:, 0]

    def relprop(self, R, eps=L.DEFAULT_EPS):
        out = torch.zeros_like(self.X)
        out[:, 0] = R
        return out


class VisionTransformer(Classifier):
    """ViT classifier whose penultimate features are the normalized CLS token.

    ``embed`` is either a single patchifying convolution (vanilla ViT) or a
    :class:`ConvStem`; both yield a (B, dim, G, G) grid that is flattened into tokens.
    """

    def __init__(self, n_classes: int, input_size: int, embed: nn.Module, grid: int, dim: int,
                 depth: int, heads: int, mlp_dim: int, dropout: float = 0.0):
        super().__init__()
        self.input_size = input_size
        self.grid = grid
        self.heads = heads
        self.embed = embed
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, grid * grid + 1, dim))
        self.cat = L.Cat(1)
        self.add_pos = L.Add()
        self.blocks = nn.ModuleList([Block(dim, heads, mlp_dim, dropout) for _ in range(depth)])
        self.norm = L.LayerNorm(dim, eps=1e-6)
        self.select = _TokenSelect()
        self.feature_dim = dim
        self.head = L.Linear(dim, n_classes)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def features(self, x):
        t = self.embed(x)
        self._grid_shape = t.shape
        t = t.flatten(2).transpose(1, 2)
        t = self.cat([self.cls_token.expand(t.shape[0], -1, -1), t])
        t = self.add_pos([t, self.pos_embed.expand(t.shape[0], -1, -1)])
        for blk in self.blocks:
            t = blk(t)
        return self.select(self.norm(t))

    def relprop_features(self, R, eps=L.DEFAULT_EPS):
        R = self.norm.relprop(self.select.relprop(R, eps), eps)
        for blk in reversed(self.blocks):
            R = blk.relprop(R, eps)
        R, _ = self.add_pos.relprop(R, eps)
        _, R = self.cat.relprop(R, eps)
        R = R.transpose(1, 2).reshape(self._grid_shape)
        return L.relprop(self.embed, R, eps)

    def attention_maps(self):
        return self.blocks[-1].attn.attn_probs
