"""Bi-temporal encoder: positional embedding, stacked refinement layers, projection.

Each layer refines the two temporal token sequences in two stages:

  * a spatial-difference stage gates bidirectional scan outputs with a
    sigmoid of the temporal feature difference (or of the branch's own
    features, for the self-gating ablation), then adds a residual;
  * a temporal-traversal stage interleaves the two sequences token-wise
    (or concatenates them along length, or is disabled), runs one
    bidirectional scan block over the merged sequence, and splits back.

After the last layer the two sequences are concatenated on the channel
axis and projected back to width D by a linear + residual-conv head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import (DepthwiseConv1d, LayerNorm, Linear, init_depthwise_conv,
                 init_embedding, init_layer_norm, init_linear)
from .ssm import BidirectionalSsm, init_bidirectional
from .tensor import ConfigError, ShapeError, Tensor

GATE_VARIANTS = ("differential", "self")
TEMPORAL_VARIANTS = ("interleave", "length_concat", "off")
DECODER_KINDS = ("mamba", "gpt_style", "cross_attention")


@dataclass
class EncoderStackConfig:
    """Shape and variant switches for the encoder stack."""

    num_layers: int = 3
    width: int = 128
    state_size: int = 16
    gate_variant: str = "differential"
    temporal_variant: str = "interleave"
    decoder_kind: str = "cross_attention"
    conv_kernel: int = 3
    tie_directions: bool = False
    tt_conv: bool = True

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.width < 1 or self.state_size < 1:
            raise ConfigError("width and state_size must be positive")
        if self.gate_variant not in GATE_VARIANTS:
            raise ConfigError(f"gate_variant must be one of {GATE_VARIANTS}")
        if self.temporal_variant not in TEMPORAL_VARIANTS:
            raise ConfigError(f"temporal_variant must be one of {TEMPORAL_VARIANTS}")
        if self.decoder_kind not in DECODER_KINDS:
            raise ConfigError(f"decoder_kind must be one of {DECODER_KINDS}")


@dataclass
class BiTemporalPair:
    """Two aligned token sequences of identical shape (..., L, D)."""

    t1: Tensor
    t2: Tensor

    def __post_init__(self):
        if self.t1.shape != self.t2.shape:
            raise ShapeError(f"temporal branches differ: {self.t1.shape} vs {self.t2.shape}")


def add_positional(pair: BiTemporalPair, pos: Tensor) -> BiTemporalPair:
    """Add one shared learnable position table to both temporal branches."""
    return BiTemporalPair(pair.t1 + pos, pair.t2 + pos)


def interleave(pair: BiTemporalPair) -> Tensor:
    """Rows [t1[0], t2[0], t1[1], t2[1], ...] of shape (..., 2L, D)."""
    return ops.interleave_rows(pair.t1, pair.t2)


def deinterleave(s: Tensor) -> BiTemporalPair:
    """Inverse of :func:`interleave`: even rows -> t1, odd rows -> t2."""
    if s.shape[-2] % 2 != 0:
        raise ShapeError(f"cannot deinterleave odd-length sequence {s.shape}")
    return BiTemporalPair(ops.row_slice(s, 0, None, 2), ops.row_slice(s, 1, None, 2))


@dataclass
class SpatialDifferenceBlock:
    """Difference-gated bidirectional scan stage with residual output."""

    norm: LayerNorm
    in_proj: Linear
    conv: DepthwiseConv1d
    ssm: BidirectionalSsm
    gate_proj: Linear
    out_proj: Linear
    gate_variant: str = "differential"

    def gate(self, pair: BiTemporalPair) -> Tensor:
        """The shared sigmoid gate computed from the temporal difference."""
        return ops.sigmoid(self.gate_proj(pair.t2 - pair.t1))

    def __call__(self, pair: BiTemporalPair) -> BiTemporalPair:
        # Both branches share every trunk parameter, so they ride through one
        # stacked scan on a fresh leading axis.
        def lead(t: Tensor) -> Tensor:
            return ops.reshape(t, (1,) + t.shape)

        both = ops.concat([lead(pair.t1), lead(pair.t2)], axis=0)  # (2, ..., L, D)
        p = ops.silu(self.conv(self.in_proj(self.norm(both))))
        f, b = self.ssm(p)
        if self.gate_variant == "differential":
            gate = self.gate(pair)  # broadcasts across the branch axis
        else:
            gate = ops.sigmoid(self.gate_proj(both))  # per-branch self gates
        out = self.out_proj(f * gate + b * gate) + both
        o1 = ops.reshape(ops.slice_axis(out, 0, 0, 1), pair.t1.shape)
        o2 = ops.reshape(ops.slice_axis(out, 0, 1, 2), pair.t2.shape)
        return BiTemporalPair(o1, o2)


@dataclass
class TemporalTraverseBlock:
    """Merged-sequence bidirectional scan stage; variant picks the merge."""

    norm: LayerNorm
    in_proj: Linear
    conv: DepthwiseConv1d | None
    ssm: BidirectionalSsm
    out_proj: Linear
    variant: str = "interleave"

    def __call__(self, pair: BiTemporalPair) -> BiTemporalPair:
        if self.variant == "off":
            return pair
        if self.variant == "interleave":
            s = interleave(pair)
        else:  # length_concat
            s = ops.concat([pair.t1, pair.t2], axis=-2)
        z = self.in_proj(self.norm(s))
        if self.conv is not None:
            z = self.conv(z)
        z = ops.silu(z)
        f, b = self.ssm(z)
        out = self.out_proj(f + b) + s
        if self.variant == "interleave":
            return deinterleave(out)
        half = pair.t1.shape[-2]
        return BiTemporalPair(ops.row_slice(out, 0, half),
                              ops.row_slice(out, half, None))


@dataclass
class RefinementLayer:
    spatial: SpatialDifferenceBlock
    temporal: TemporalTraverseBlock

    def __call__(self, pair: BiTemporalPair) -> BiTemporalPair:
        return self.temporal(self.spatial(pair))


@dataclass
class ProjectionHead:
    """Channel-concat reducer: linear 2D->D, then a residual conv block."""

    reduce: Linear
    conv: DepthwiseConv1d
    pointwise: Linear

    def __call__(self, z: Tensor) -> Tensor:
        y = self.reduce(z)
        return y + self.pointwise(self.conv(y))


@dataclass
class ChangeEncoder:
    pos: Tensor  # (L, D), shared by both temporal branches
    layers: list[RefinementLayer] = field(default_factory=list)
    head: ProjectionHead | None = None

    def __call__(self, pair: BiTemporalPair) -> Tensor:
        pair = add_positional(pair, self.pos)
        for layer in self.layers:
            pair = layer(pair)
        fused = ops.concat([pair.t1, pair.t2], axis=-1)  # (..., L, 2D)
        return self.head(fused)


def encode(pair: BiTemporalPair, encoder: ChangeEncoder) -> Tensor:
    """Visual embedding sequence (..., L, D) for the decoder."""
    return encoder(pair)


def init_spatial_block(cfg: EncoderStackConfig, rng: np.random.Generator,
                       dtype=np.float32) -> SpatialDifferenceBlock:
    d = cfg.width
    return SpatialDifferenceBlock(
        norm=init_layer_norm(d, dtype=dtype),
        in_proj=init_linear(d, d, rng, dtype=dtype),
        conv=init_depthwise_conv(d, rng, cfg.conv_kernel, "same", dtype=dtype),
        ssm=init_bidirectional(d, cfg.state_size, rng, dtype=dtype,
                               tie_directions=cfg.tie_directions),
        gate_proj=init_linear(d, d, rng, dtype=dtype),
        out_proj=init_linear(d, d, rng, dtype=dtype),
        gate_variant=cfg.gate_variant,
    )


def init_temporal_block(cfg: EncoderStackConfig, rng: np.random.Generator,
                        dtype=np.float32) -> TemporalTraverseBlock:
    d = cfg.width
    return TemporalTraverseBlock(
        norm=init_layer_norm(d, dtype=dtype),
        in_proj=init_linear(d, d, rng, dtype=dtype),
        conv=(init_depthwise_conv(d, rng, cfg.conv_kernel, "same", dtype=dtype)
              if cfg.tt_conv else None),
        ssm=init_bidirectional(d, cfg.state_size, rng, dtype=dtype,
                               tie_directions=cfg.tie_directions),
        out_proj=init_linear(d, d, rng, dtype=dtype),
        variant=cfg.temporal_variant,
    )


def init_encoder(cfg: EncoderStackConfig, seq_len: int, rng: np.random.Generator,
                 dtype=np.float32, num_layers: int | None = None) -> ChangeEncoder:
    """Build the full stack; ``num_layers=0`` is allowed for internal tests."""
    cfg.validate()
    n = cfg.num_layers if num_layers is None else num_layers
    d = cfg.width
    layers = [RefinementLayer(init_spatial_block(cfg, rng, dtype),
                        init_temporal_block(cfg, rng, dtype))
              for _ in range(n)]
    head = ProjectionHead(
        reduce=init_linear(2 * d, d, rng, dtype=dtype),
        conv=init_depthwise_conv(d, rng, 3, "same", dtype=dtype),
        pointwise=init_linear(d, d, rng, dtype=dtype),
    )
    return ChangeEncoder(pos=init_embedding(seq_len, d, rng, dtype=dtype),
                         layers=layers, head=head)
