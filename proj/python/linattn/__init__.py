"""Linear attention engine: blocked decay-masked kernels with analytic
gradients, constant-memory recurrent decoding, and a toy byte-level language
model."""

from linattn._core import (
    LmModel,
    RecurrentHead,
    apply_lrpe,
    attention_lightning,
    attention_lightning_grads,
    attention_reference,
    decay_mask,
    decay_rate,
    right_product,
    sglu,
    srmsnorm,
)

__all__ = [
    "LmModel",
    "RecurrentHead",
    "apply_lrpe",
    "attention_lightning",
    "attention_lightning_grads",
    "attention_reference",
    "decay_mask",
    "decay_rate",
    "right_product",
    "sglu",
    "srmsnorm",
]
