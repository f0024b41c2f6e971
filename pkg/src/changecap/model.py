"""Full captioning pipeline: patch embedding -> change encoder -> decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .decoders import Decoder, caption_loss, init_decoder, teacher_forced_logits_batch
from .encoder import BiTemporalPair, EncoderStackConfig, ChangeEncoder, init_encoder
from .rng import stream
from .tensor import Tensor
from .toyworld import GRID_SIZE, PatchEmbed, init_patch_embed
from .vocabulary import Vocabulary


@dataclass
class CaptionModel:
    patch: PatchEmbed
    encoder: ChangeEncoder
    decoder: Decoder

    def visual_from_patches(self, p1: np.ndarray, p2: np.ndarray) -> Tensor:
        """(B, L, P*P) pre-extracted patches for both times -> (B, L, D)."""
        dtype = self.patch.proj.w.dtype
        t1 = self.patch.proj(Tensor(p1, dtype=dtype))
        t2 = self.patch.proj(Tensor(p2, dtype=dtype))
        return self.encoder(BiTemporalPair(t1, t2))

    def visual_from_images(self, img1: np.ndarray, img2: np.ndarray) -> Tensor:
        t1 = self.patch(img1)
        t2 = self.patch(img2)
        return self.encoder(BiTemporalPair(t1, t2))

    def batch_loss(self, p1: np.ndarray, p2: np.ndarray,
                   tokens_in: np.ndarray, targets: np.ndarray) -> Tensor:
        visual = self.visual_from_patches(p1, p2)
        logits = teacher_forced_logits_batch(self.decoder, visual, tokens_in)
        return caption_loss(logits, targets)


def stack_config(cfg: RunConfig) -> EncoderStackConfig:
    return EncoderStackConfig(
        num_layers=cfg.layers,
        width=cfg.width,
        state_size=cfg.state_size,
        gate_variant=cfg.gate_variant,
        temporal_variant=cfg.temporal_variant,
        decoder_kind=cfg.decoder,
        tie_directions=cfg.tie_directions,
        tt_conv=cfg.tt_conv,
    )


def build_model(cfg: RunConfig, vocab: Vocabulary | int, dtype=np.float32) -> CaptionModel:
    """Deterministic model construction from (config, seed)."""
    vocab_size = len(vocab) if isinstance(vocab, Vocabulary) else int(vocab)
    seq_len = (GRID_SIZE // cfg.patch) ** 2
    rng = stream(cfg.seed, "model-init")
    patch = init_patch_embed(cfg.width, rng, patch=cfg.patch, dtype=dtype)
    encoder = init_encoder(stack_config(cfg), seq_len, rng, dtype=dtype)
    decoder = init_decoder(cfg.decoder, vocab_size, cfg.width, rng,
                           num_blocks=cfg.decoder_blocks, n_heads=cfg.heads,
                           state_size=cfg.state_size, max_len=cfg.max_decode_len,
                           dtype=dtype)
    return CaptionModel(patch=patch, encoder=encoder, decoder=decoder)
