"""Encoder with switchable age/time embeddings, positions and feed-forward units."""

from .attention import attention_forward, attention_weights
from .batch import Batch, collate
from .config import ModelConfig
from .encoder import (
    CHECKPOINT_VERSION,
    TOKEN_TABLE,
    Encoder,
    embed_sequence,
    encoder_forward,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .layers import gelu_ffn, rope_angles, rope_rotate, swiglu_ffn, time2vec

__all__ = [
    "CHECKPOINT_VERSION",
    "TOKEN_TABLE",
    "Batch",
    "Encoder",
    "ModelConfig",
    "attention_forward",
    "attention_weights",
    "collate",
    "embed_sequence",
    "encoder_forward",
    "gelu_ffn",
    "init_parameters",
    "load_checkpoint",
    "rope_angles",
    "rope_rotate",
    "save_checkpoint",
    "swiglu_ffn",
    "time2vec",
]
