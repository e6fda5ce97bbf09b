from __future__ import annotations

import dataclasses
from dataclasses import dataclass

_CHOICES = {
    "age_embedding": ("discrete", "time2vec"),
    "abstime_embedding": ("none", "time2vec"),
    "position": ("learned", "rope"),
    "ffn": ("gelu", "swiglu"),
    "segment_style": ("binary", "visit-number"),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches for the encoder. Defaults are the baseline model."""

    vocab_size: int
    layers: int = 6
    heads: int = 6
    hidden: int = 192
    intermediate: int = 64
    context_length: int = 512
    age_embedding: str = "discrete"
    abstime_embedding: str = "none"
    position: str = "learned"
    ffn: str = "gelu"
    segment_style: str = "binary"
    rope_base: float = 10000.0
    t2v_age_scale: float = 1e-2
    t2v_time_scale: float = 1e-4
    t2v_clip: float = 100.0
    max_age: int = 120
    dropout: float = 0.1
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name, options in _CHOICES.items():
            if getattr(self, name) not in options:
                raise ValueError(f"{name} must be one of {options}, got {getattr(self, name)!r}")
        if self.vocab_size < 7:
            raise ValueError("vocab_size must cover the 7 reserved tokens")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if self.position == "rope" and self.head_dim % 2:
            raise ValueError(f"rope needs an even head dimension, got {self.head_dim}")
        if self.layers < 0 or self.intermediate < 1 or self.context_length < 1:
            raise ValueError("layers, intermediate and context_length must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - fields
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)
