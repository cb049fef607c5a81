"""Attention stack: fixed sinusoidal position tables, multi-head attention,
post-norm transformer layers, and the three token stages of the pipeline
(per-image refinement, cross-image group encoding, consensus fusion).

Position handling is the load-bearing design rule here. The per-image and
fusion stages add their position table to queries and keys at every
attention call; the cross-image group encoder never does, which is what
makes its output equivariant to the order of images in the group. On top of
that, the group encoder runs its softmax and attention-times-value
contractions in canonical (sorted) order, so reordering the group changes
its output by exactly zero bits, not merely by float noise.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, UsageError
from .modules import Linear, Conv, LayerNorm, Module


def positional_encoding_2d(h: int, w: int, d: int, dtype=np.float32) -> np.ndarray:
    """[h*w, d] table, row-major tokens. Channels [0,d/2) encode the column
    coordinate, [d/2,d) the row; within each half even channels carry
    sin(pos/10000^(2i/(d/2))) and odd channels the matching cos."""
    if d % 4 != 0:
        raise ConfigError(f"position table needs d divisible by 4, got {d}")
    if h < 1 or w < 1:
        raise ConfigError(f"position table needs positive grid, got {h}x{w}")
    dh = d // 2
    inv_freq = 10000.0 ** (-2.0 * np.arange(dh // 2, dtype=np.float64) / dh)

    def half(n: int) -> np.ndarray:
        angles = np.arange(n, dtype=np.float64)[:, None] * inv_freq[None, :]
        out = np.zeros((n, dh), dtype=np.float64)
        out[:, 0::2] = np.sin(angles)
        out[:, 1::2] = np.cos(angles)
        return out

    col = half(w)
    row = half(h)
    table = np.zeros((h * w, d), dtype=np.float64)
    for y in range(h):
        table[y * w : (y + 1) * w, :dh] = col
        table[y * w : (y + 1) * w, dh:] = row[y]
    return table.astype(dtype)


def positional_encoding_1d(n: int, d: int, dtype=np.float32) -> np.ndarray:
    """[n, d] table over flat sequence index; the debug injection used to
    demonstrate that position information destroys group-order equivariance."""
    if d % 2 != 0:
        raise ConfigError(f"1-d position table needs even d, got {d}")
    inv_freq = 10000.0 ** (-2.0 * np.arange(d // 2, dtype=np.float64) / d)
    angles = np.arange(n, dtype=np.float64)[:, None] * inv_freq[None, :]
    out = np.zeros((n, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out.astype(dtype)


def _check_pe(pe: Tensor | None, like: Tensor, what: str) -> None:
    if pe is not None and pe.shape != like.shape:
        raise ShapeError(f"{what} position table shape {pe.shape} != tokens {like.shape}")


class MultiHeadAttention(Module):
    """Scaled dot-product attention over [T, d] tokens.

    Position tables are added to the query/key inputs only; values always
    see the raw tokens. canonical=True makes the softmax normalization and
    the attention-times-value sum order-independent bit for bit.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if d % heads != 0:
            raise ConfigError(f"d={d} not divisible by heads={heads}")
        self.wq = Linear(d, d, rng, dtype)
        self.wk = Linear(d, d, rng, dtype)
        self.wv = Linear(d, d, rng, dtype)
        self.wo = Linear(d, d, rng, dtype)
        self.d = d
        self.heads = heads
        self.dim_head = d // heads
        self.scale = 1.0 / float(np.sqrt(self.dim_head))

    def _split(self, x: Tensor, t: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (t, self.heads, self.dim_head)), (1, 0, 2))

    def __call__(
        self,
        q_in: Tensor,
        kv_in: Tensor,
        pe_q: Tensor | None = None,
        pe_k: Tensor | None = None,
        canonical: bool = False,
        capture: dict | None = None,
    ) -> Tensor:
        if q_in.shape[-1] != self.d or kv_in.shape[-1] != self.d:
            raise ShapeError(f"attention expects width {self.d}, got {q_in.shape} / {kv_in.shape}")
        _check_pe(pe_q, q_in, "query")
        _check_pe(pe_k, kv_in, "key")
        tq, tk = q_in.shape[0], kv_in.shape[0]

        q = self.wq(q_in if pe_q is None else q_in + pe_q)
        k = self.wk(kv_in if pe_k is None else kv_in + pe_k)
        v = self.wv(kv_in)

        qh = self._split(q, tq)
        kh = self._split(k, tk)
        vh = self._split(v, tk)

        scores = ad.matmul(qh, ad.transpose(kh, (0, 2, 1))) * self.scale
        attention = ad.softmax(scores, axis=-1, order_canonical=canonical)
        if capture is not None:
            capture["attention"] = attention
        ctx = ad.matmul(attention, vh, order_canonical=canonical)
        merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (tq, self.d))
        return self.wo(merged)


class TransformerLayer(Module):
    """Post-norm block: Norm(x + MHA(x)) then Norm(x' + FFN(x'))."""

    def __init__(self, d: int, heads: int, ffn_multiplier: int, rng: np.random.Generator, dtype=np.float32):
        self.attn = MultiHeadAttention(d, heads, rng, dtype)
        self.norm_attn = LayerNorm(d, dtype)
        self.ffn_in = Linear(d, ffn_multiplier * d, rng, dtype)
        self.ffn_out = Linear(ffn_multiplier * d, d, rng, dtype)
        self.norm_ffn = LayerNorm(d, dtype)

    def __call__(self, x: Tensor, pe: Tensor | None = None, canonical: bool = False, capture: dict | None = None) -> Tensor:
        h = self.norm_attn(x + self.attn(x, x, pe, pe, canonical, capture))
        return self.norm_ffn(h + self.ffn_out(ad.relu(self.ffn_in(h))))


def tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    q, d = tokens.shape
    if q != h * w:
        raise ShapeError(f"{q} tokens do not tile a {h}x{w} grid")
    return ad.reshape(ad.transpose(tokens, (1, 0)), (d, h, w))


def map_to_tokens(feature_map: Tensor) -> Tensor:
    d, h, w = feature_map.shape
    return ad.transpose(ad.reshape(feature_map, (d, h * w)), (1, 0))


class ImageTokenRefiner(Module):
    """Per-image stage: 1x1-project the deepest feature map to width d,
    refine the tokens with position-aware attention layers, and fuse the
    result with the projected input through a skip connection."""

    def __init__(self, c_in: int, d: int, heads: int, ffn_multiplier: int, n_layers: int, rng: np.random.Generator, dtype=np.float32):
        self.proj = Conv(c_in, d, 1, rng, dtype=dtype)
        self.layers = [TransformerLayer(d, heads, ffn_multiplier, rng, dtype) for _ in range(n_layers)]

    def __call__(self, f_top: Tensor, pe: Tensor) -> Tensor:
        _, h, w = f_top.shape
        base = map_to_tokens(self.proj(f_top))
        x = base
        for layer in self.layers:
            x = layer(x, pe)
        return x + base


class GroupTokenEncoder(Module):
    """Cross-image stage over the concatenated group sequence [N*Q, d].

    No position table: tokens interact purely by content, so permuting the
    image blocks permutes the output blocks exactly. debug_positions=True
    deliberately injects a 1-d table to break that property.
    """

    def __init__(self, d: int, heads: int, ffn_multiplier: int, n_layers: int, rng: np.random.Generator, dtype=np.float32):
        self.layers = [TransformerLayer(d, heads, ffn_multiplier, rng, dtype) for _ in range(n_layers)]
        self._dtype = dtype

    def __call__(self, stacked: Tensor, debug_positions: bool = False) -> Tensor:
        if len(stacked.shape) != 3:
            raise ShapeError(f"group encoder expects [N,Q,d], got {stacked.shape}")
        n, q, d = stacked.shape
        if n < 2:
            raise UsageError(f"group encoder needs N >= 2 images, got {n}")
        x = ad.reshape(stacked, (n * q, d))
        pe = Tensor(positional_encoding_1d(n * q, d, self._dtype)) if debug_positions else None
        for layer in self.layers:
            x = layer(x, pe, canonical=True)
        return x


class ConsensusFusion(Module):
    """Fusion stage: average the group sequence over the image axis into Q
    consensus tokens, project them, and run position-aware attention over
    the per-image tokens concatenated with the consensus. The first Q output
    tokens are the fused per-image representation."""

    def __init__(self, d: int, heads: int, ffn_multiplier: int, n_layers: int, rng: np.random.Generator, dtype=np.float32):
        self.proj = Linear(d, d, rng, dtype)
        self.layers = [TransformerLayer(d, heads, ffn_multiplier, rng, dtype) for _ in range(n_layers)]

    def __call__(self, s_n: Tensor, group_seq: Tensor, pe: Tensor, n_images: int) -> Tensor:
        q, d = s_n.shape
        if group_seq.shape != (n_images * q, d):
            raise ShapeError(f"group sequence {group_seq.shape} does not reshape to [{n_images},{q},{d}]")
        blocks = ad.reshape(group_seq, (n_images, q, d))
        consensus = self.proj(ad.reduce(blocks, "mean", axis=0, order_canonical=True))
        x = ad.concat([s_n, consensus], axis=0)
        pe2 = ad.concat([pe, pe], axis=0)
        for layer in self.layers:
            x = layer(x, pe2, canonical=False)
        return ad.narrow(x, 0, 0, q)
