"""Three interchangeable caption decoders plus teacher forcing and greedy decode.

All decoders share a word embedding, a final norm, and an output projection;
they differ in how token positions see the visual embeddings:

  * ``mamba``: visual rows prefixed to the token sequence, causal selective
    scan blocks;
  * ``gpt_style``: same prefixing, causal self-attention blocks;
  * ``cross_attention``: causal self-attention over tokens only, with the
    visual rows injected as cross-attention keys/values.

Visual rows receive no extra positional encoding here (the encoder output
already carries position), so cross-attention is permutation-invariant over
visual rows. Internals are batched (B, T, ...); the public entry points take
a single sample, matching how the rest of the package talks about sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import (DepthwiseConv1d, LayerNorm, Linear, init_depthwise_conv,
                 init_embedding, init_layer_norm, init_linear)
from .ssm import SelectiveSsmParams, directional_ssm, init_selective_params
from .tensor import ConfigError, ShapeError, Tensor
from .vocabulary import BOS, EOS, PAD

KINDS = ("mamba", "gpt_style", "cross_attention")
_NEG_INF = -1e9


def causal_mask(rows: int, cols: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: query row i may attend to key columns <= i (+ offset)."""
    offset = cols - rows
    i = np.arange(rows)[:, None]
    j = np.arange(cols)[None, :]
    return np.where(j > i + offset, _NEG_INF, 0.0).astype(dtype)


@dataclass
class MultiHeadAttention:
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    n_heads: int

    def __call__(self, q_in: Tensor, kv_in: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        batch, t_q, width = q_in.shape
        t_k = kv_in.shape[-2]
        dk = width // self.n_heads

        def split(x, t):
            x = ops.reshape(x, (batch, t, self.n_heads, dk))
            return ops.transpose(x, (0, 2, 1, 3))  # (B, H, T, dk)

        q = split(self.wq(q_in), t_q)
        k = split(self.wk(kv_in), t_k)
        v = split(self.wv(kv_in), t_k)
        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
        if mask is not None:
            scores = scores + Tensor(mask.astype(scores.dtype))
        attn = ops.softmax(scores, axis=-1)
        ctx = ops.matmul(attn, v)  # (B, H, Tq, dk)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (batch, t_q, width))
        return self.wo(ctx)


@dataclass
class AttentionBlock:
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    ln_self: LayerNorm
    self_attn: MultiHeadAttention
    ln_cross: LayerNorm | None
    cross_attn: MultiHeadAttention | None
    ln_ffn: LayerNorm
    ffn_in: Linear
    ffn_out: Linear

    def __call__(self, x: Tensor, visual: Tensor | None = None,
                 mask: np.ndarray | None = None) -> Tensor:
        a = self.ln_self(x)
        x = x + self.self_attn(a, a, mask=mask)
        if self.cross_attn is not None:
            if visual is None:
                raise ValueError("cross-attention block needs visual keys/values")
            x = x + self.cross_attn(self.ln_cross(x), visual)
        f = self.ln_ffn(x)
        return x + self.ffn_out(ops.silu(self.ffn_in(f)))


@dataclass
class MambaLmBlock:
    """Causal selective-scan language-model block with a multiplicative gate."""

    norm: LayerNorm
    in_proj: Linear   # D -> 2D, split into main | gate
    conv: DepthwiseConv1d  # causal padding keeps the block autoregressive
    ssm: SelectiveSsmParams
    out_proj: Linear

    def __call__(self, x: Tensor) -> Tensor:
        width = x.shape[-1]
        z = self.in_proj(self.norm(x))
        main = ops.slice_axis(z, -1, 0, width)
        gate = ops.slice_axis(z, -1, width, None)
        main = ops.silu(self.conv(main))
        y = directional_ssm(main, self.ssm, "forward")
        y = y * ops.silu(gate)
        return self.out_proj(y) + x


def mamba_lm_block(x: Tensor, block: MambaLmBlock) -> Tensor:
    return block(x)


@dataclass
class Decoder:
    kind: str
    word_embed: Tensor          # (V, D)
    tok_pos: Tensor | None      # (max_len, D); None for the mamba kind
    blocks: list
    final_norm: LayerNorm
    out_proj: Linear            # D -> V
    max_len: int = 24

    @property
    def vocab_size(self) -> int:
        return self.word_embed.shape[0]


def init_decoder(kind: str, vocab_size: int, width: int, rng: np.random.Generator,
                 num_blocks: int = 2, n_heads: int = 4, state_size: int = 16,
                 max_len: int = 24, dtype=np.float32) -> Decoder:
    if kind not in KINDS:
        raise ConfigError(f"decoder kind must be one of {KINDS}, got '{kind}'")
    if kind != "mamba" and width % n_heads != 0:
        raise ConfigError(f"width {width} not divisible by {n_heads} heads")

    def attention():
        # no key bias: softmax is invariant to per-query constant score
        # shifts, so a key bias is an exactly gradient-dead parameter
        return MultiHeadAttention(
            wq=init_linear(width, width, rng, dtype=dtype),
            wk=init_linear(width, width, rng, dtype=dtype, bias=False),
            wv=init_linear(width, width, rng, dtype=dtype),
            wo=init_linear(width, width, rng, dtype=dtype),
            n_heads=n_heads,
        )

    blocks: list = []
    for _ in range(num_blocks):
        if kind == "mamba":
            blocks.append(MambaLmBlock(
                norm=init_layer_norm(width, dtype=dtype),
                in_proj=init_linear(width, 2 * width, rng, dtype=dtype),
                conv=init_depthwise_conv(width, rng, 3, "causal", dtype=dtype),
                ssm=init_selective_params(width, state_size, rng, dtype=dtype),
                out_proj=init_linear(width, width, rng, dtype=dtype),
            ))
        else:
            cross = kind == "cross_attention"
            blocks.append(AttentionBlock(
                ln_self=init_layer_norm(width, dtype=dtype),
                self_attn=attention(),
                ln_cross=init_layer_norm(width, dtype=dtype) if cross else None,
                cross_attn=attention() if cross else None,
                ln_ffn=init_layer_norm(width, dtype=dtype),
                ffn_in=init_linear(width, 4 * width, rng, dtype=dtype),
                ffn_out=init_linear(4 * width, width, rng, dtype=dtype),
            ))

    return Decoder(
        kind=kind,
        word_embed=init_embedding(vocab_size, width, rng, dtype=dtype),
        tok_pos=None if kind == "mamba" else init_embedding(max_len, width, rng, dtype=dtype),
        blocks=blocks,
        final_norm=init_layer_norm(width, dtype=dtype),
        out_proj=init_linear(width, vocab_size, rng, dtype=dtype),
        max_len=max_len,
    )


def _check_tokens(tokens: np.ndarray, max_len: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.shape[-1] == 0:
        raise ValueError("token sequence must be non-empty")
    if tokens.shape[-1] > max_len:
        raise ConfigError(f"sequence length {tokens.shape[-1]} exceeds max_len {max_len}")
    if not np.all(tokens[..., 0] == BOS):
        raise ValueError("token sequences must begin with BOS")
    return tokens


def teacher_forced_logits_batch(dec: Decoder, visual: Tensor,
                                tokens: np.ndarray) -> Tensor:
    """Logits (B, T, V); position t sees the visual prefix and tokens <= t."""
    tokens = _check_tokens(tokens, dec.max_len)
    if visual.ndim != 3:
        raise ShapeError(f"batched visual must be (B, L, D), got {visual.shape}")
    batch, t_len = tokens.shape
    prefix_len = visual.shape[-2]
    emb = ops.embedding(dec.word_embed, tokens)  # (B, T, D)

    if dec.kind == "mamba":
        x = ops.concat([visual, emb], axis=-2)
        for blk in dec.blocks:
            x = blk(x)
    elif dec.kind == "gpt_style":
        emb = emb + ops.row_slice(dec.tok_pos, 0, t_len)
        x = ops.concat([visual, emb], axis=-2)
        mask = causal_mask(prefix_len + t_len, prefix_len + t_len)
        for blk in dec.blocks:
            x = blk(x, mask=mask)
    else:  # cross_attention
        x = emb + ops.row_slice(dec.tok_pos, 0, t_len)
        mask = causal_mask(t_len, t_len)
        for blk in dec.blocks:
            x = blk(x, visual=visual, mask=mask)

    x = dec.final_norm(x)
    logits = dec.out_proj(x)
    if dec.kind in ("mamba", "gpt_style"):
        logits = ops.row_slice(logits, prefix_len, prefix_len + t_len)
    return logits


def teacher_forced_logits(dec: Decoder, visual: Tensor,
                          tokens: np.ndarray) -> Tensor:
    """Single-sample wrapper: visual (L, D), tokens (T,) -> logits (T, V)."""
    if visual.ndim != 2:
        raise ShapeError(f"visual must be (L, D), got {visual.shape}")
    tokens = np.asarray(tokens)
    batched = teacher_forced_logits_batch(
        dec, ops.reshape(visual, (1,) + visual.shape), tokens[None, :])
    return ops.reshape(batched, batched.shape[1:])


def caption_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean NLL over non-PAD target positions (targets = tokens shifted left)."""
    targets = np.asarray(targets)
    mask = targets != PAD
    if not mask.any():
        raise ValueError("caption_loss: all target positions are PAD")
    return ops.softmax_cross_entropy(logits, targets, mask=mask)


def greedy_decode_batch(dec: Decoder, visual: Tensor, max_len: int) -> list[list[int]]:
    """Deterministic argmax decoding; ties resolve to the lowest token id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    batch = visual.shape[0]
    tokens = np.full((batch, 1), BOS, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    # sequence length at which each sample stopped (EOS emitted); PAD fills after
    stopped_at = np.full(batch, 1 + max_len, dtype=np.int64)
    for step in range(max_len):
        logits = teacher_forced_logits_batch(dec, visual, tokens)
        nxt = logits.data[:, -1, :].argmax(axis=-1)
        nxt = np.where(done, PAD, nxt)
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        newly_done = ~done & (nxt == EOS)
        stopped_at[newly_done] = step + 2  # keep BOS..EOS inclusive
        done |= nxt == EOS
        if done.all():
            break
    stopped_at = np.minimum(stopped_at, tokens.shape[1])
    out = []
    for row, fill_start in zip(tokens, stopped_at):
        ids = [int(t) for t in row[:fill_start]]
        out.append(ids)
    return out


def greedy_decode(dec: Decoder, visual: Tensor, max_len: int) -> list[int]:
    """Single-sample greedy decode starting from BOS, stopping at EOS/max_len."""
    if visual.ndim != 2:
        raise ShapeError(f"visual must be (L, D), got {visual.shape}")
    return greedy_decode_batch(dec, ops.reshape(visual, (1,) + visual.shape), max_len)[0]
