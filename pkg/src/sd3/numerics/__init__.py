"""Numeric substrate: seeded PCG32 streams, categorical helpers, a small
reverse-mode tape, finite-difference gradient checking, and AdamW."""

from .rng import Rng, rng_stream
from .ops import kl_categorical, log_softmax, logsumexp, normalize, one_hot, softmax
from .autodiff import (
    ParamStore, Tensor, concat, constant, embedding, gather_last, layer_norm,
    normal_init, st_round, stop_grad,
)
from .gradcheck import grad_check
from .optim import AdamW, linear_warmup

__all__ = [
    "Rng", "rng_stream",
    "softmax", "log_softmax", "logsumexp", "kl_categorical", "one_hot", "normalize",
    "Tensor", "ParamStore", "constant", "concat", "embedding", "gather_last",
    "layer_norm", "normal_init", "st_round", "stop_grad",
    "grad_check", "AdamW", "linear_warmup",
]
