"""Standard pre-norm ViT block over one-pixel tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import ops
from .nn import LayerNorm, Linear, Module, uniform_init
from .tensor import ShapeError, Tensor, _grad_enabled, make_op, no_grad

# above this many attention-matrix entries, grad-free attention runs in query chunks
_CHUNK_ELEMENTS = 1 << 24


@dataclass(frozen=True)
class TokenSeq:
    """``tokens`` is ``L x C`` (or ``N x L x C``) in row-major raster order of ``origin``."""

    tokens: Tensor
    origin: Tuple[int, int]

    def __post_init__(self):
        h, w = self.origin
        if self.tokens.ndim not in (2, 3) or self.tokens.shape[-2] != h * w:
            raise ShapeError(f"token sequence {self.tokens.shape} does not match origin {self.origin}")

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    def with_tokens(self, tokens: Tensor) -> "TokenSeq":
        return TokenSeq(tokens, self.origin)


def tokenize(x: Tensor) -> TokenSeq:
    """Flatten an ``H x W x C`` map to ``HW x C`` tokens, row-major."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"tokenize expects a feature map, got {x.shape}")
    h, w, c = x.shape[-3:]
    return TokenSeq(x.reshape(x.shape[:-3] + (h * w, c)), (h, w))


def detokenize(t: TokenSeq) -> Tensor:
    h, w = t.origin
    tok = t.tokens
    return tok.reshape(tok.shape[:-2] + (h, w, tok.shape[-1]))


class ViTParams(Module):
    """Weights of one ViT block: attention projections, MLP, two layernorms,
    and an optional learnable positional table."""

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 4, mlp_ratio: int = 4,
                 pos_length: Optional[int] = None, dtype=np.float32):
        if dim % heads:
            raise ShapeError(f"ViT width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.ln1 = LayerNorm(dim, dtype)
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.mlp_in = Linear(dim, mlp_ratio * dim, rng, dtype)
        self.mlp_out = Linear(mlp_ratio * dim, dim, rng, dtype)
        self.pos_embed = None
        if pos_length is not None:
            self.pos_embed = uniform_init(rng, (pos_length, dim), dim, dtype)

    def zero_residual_branches(self) -> None:
        """Zero the attention and MLP output projections (block becomes identity)."""
        for lin in (self.proj, self.mlp_out):
            lin.weight.data = np.zeros_like(lin.weight.data)
            lin.bias.data = np.zeros_like(lin.bias.data)

    def forward(self, t: TokenSeq) -> TokenSeq:
        return vit_block(t, self)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, dim = x.shape
    x = x.reshape(tuple(lead) + (length, heads, dim // heads))
    nd = x.ndim
    return x.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    x = x.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    *lead, length, heads, d = x.shape
    return x.reshape(tuple(lead) + (length, heads * d))


def _chunked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    length = q.shape[-2]
    per_row = int(np.prod(q.shape[:-2])) * k.shape[-2]
    step = max(1, _CHUNK_ELEMENTS // max(per_row, 1))
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=q.dtype)
    kt = np.swapaxes(k, -1, -2)
    for s in range(0, length, step):
        sc = q[..., s : s + step, :] @ kt
        sc *= scale
        sc -= sc.max(axis=-1, keepdims=True)
        np.exp(sc, out=sc)
        sc /= sc.sum(axis=-1, keepdims=True)
        out[..., s : s + step, :] = sc @ v
    return out


def mhsa(t: TokenSeq, p: ViTParams, need_weights: bool = False):
    """Multi-head self-attention ``softmax(Q K^T / sqrt(d_head)) V`` then output projection.

    With ``need_weights`` the attention matrix (``... x heads x L x L``) is
    returned alongside the output.
    """
    x = t.tokens
    if x.shape[-1] != p.dim:
        raise ShapeError(f"mhsa: token width {x.shape[-1]} != block width {p.dim}")
    q = _split_heads(p.q(x), p.heads)
    k = _split_heads(p.k(x), p.heads)
    v = _split_heads(p.v(x), p.heads)
    scale = 1.0 / np.sqrt(p.dim // p.heads)
    attn = None
    big = q.shape[-2] * q.shape[-2] * int(np.prod(q.shape[:-2])) > _CHUNK_ELEMENTS
    if not _grad_enabled() and big and not need_weights:
        ctx = make_op(_chunked_attention(q.data, k.data, v.data, scale), (), lambda g: (), "attention")
    else:
        attn = ops.softmax((q @ k.transpose(_swap_last(k.ndim))) * scale, axis=-1)
        ctx = attn @ v
    out = t.with_tokens(p.proj(_merge_heads(ctx)))
    if need_weights:
        return out, attn.data
    return out


def _swap_last(nd: int):
    return tuple(range(nd - 2)) + (nd - 1, nd - 2)


def vit_block(t: TokenSeq, p: ViTParams) -> TokenSeq:
    """``t + mhsa(ln1(t))`` then ``+ mlp(ln2(.))``; adds the positional table first if present."""
    x = t.tokens
    if x.shape[-1] != p.dim:
        raise ShapeError(f"vit_block: token width {x.shape[-1]} != block width {p.dim}")
    if p.pos_embed is not None:
        if p.pos_embed.shape[0] != t.length:
            raise ShapeError(f"positional table length {p.pos_embed.shape[0]} != sequence length {t.length}")
        x = x + p.pos_embed
    h = x + mhsa(t.with_tokens(p.ln1(x)), p).tokens
    h = h + p.mlp_out(ops.gelu(p.mlp_in(p.ln2(h))))
    return t.with_tokens(h)


def vit_stack(t: TokenSeq, blocks: Sequence[ViTParams]) -> TokenSeq:
    for p in blocks:
        t = vit_block(t, p)
    return t


__all__ = ["TokenSeq", "tokenize", "detokenize", "ViTParams", "mhsa", "vit_block", "vit_stack", "no_grad"]
