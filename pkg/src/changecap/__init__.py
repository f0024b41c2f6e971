"""Bi-temporal change captioning with selective state-space sequence models.

Subpackage map:
  tensor / ops / gradcheck  -- reverse-mode autodiff engine and its oracle
  ssm                       -- discretization, selective scans, direction wrappers
  encoder                   -- difference-gated + temporal-traversal layer stack
  decoders                  -- mamba / gpt-style / cross-attention caption heads
  toyworld                  -- synthetic bi-temporal scenes with exact captions
  metrics                   -- BLEU, ROUGE_L, CIDEr-D, simplified METEOR
  train / cli               -- Adam training loop, evaluation, command line
"""

from .tensor import Tape, Tensor

__all__ = ["Tape", "Tensor"]
