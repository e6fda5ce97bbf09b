"""Embedding stack, pre-norm transformer encoder and checkpoint files."""

from __future__ import annotations

import json
import os
from typing import Iterator

import numpy as np

from ..numerics import Parameter, Tensor, embedding, layer_norm
from .attention import attention_forward
from .batch import Batch
from .config import ModelConfig
from .layers import ffn_forward, time2vec

CHECKPOINT_VERSION = 1
TOKEN_TABLE = "embed.token"


def init_parameters(config: ModelConfig, seed: int = 0) -> dict[str, Parameter]:
    """Fresh parameters in a fixed order; normal(0, init_std) weights, zero biases, unit gains."""
    rng = np.random.default_rng(seed)
    h, i, std = config.hidden, config.intermediate, config.init_std
    params: dict[str, Parameter] = {}

    def weight(name, *shape, decay=True):
        params[name] = Parameter(rng.normal(0.0, std, size=shape), name=name, decay=decay)

    def const(name, value, *shape):
        params[name] = Parameter(np.full(shape, value, dtype=np.float64), name=name, decay=False)

    weight(TOKEN_TABLE, config.vocab_size, h)
    if config.age_embedding == "discrete":
        weight("embed.age", config.max_age + 1, h)
    else:
        params["embed.age_t2v.omega"] = Parameter(rng.normal(0.0, 1.0, size=h), "embed.age_t2v.omega", decay=False)
        params["embed.age_t2v.phi"] = Parameter(rng.uniform(0.0, 2 * np.pi, size=h), "embed.age_t2v.phi", decay=False)
    if config.abstime_embedding == "time2vec":
        params["embed.time_t2v.omega"] = Parameter(rng.normal(0.0, 1.0, size=h), "embed.time_t2v.omega", decay=False)
        params["embed.time_t2v.phi"] = Parameter(rng.uniform(0.0, 2 * np.pi, size=h), "embed.time_t2v.phi", decay=False)
    weight("embed.segment", 2 if config.segment_style == "binary" else config.context_length, h)
    if config.position == "learned":
        weight("embed.position", config.context_length, h)
    for layer in range(config.layers):
        p = f"layer{layer}"
        const(f"{p}.ln1.gain", 1.0, h)
        const(f"{p}.ln1.bias", 0.0, h)
        for proj in ("q", "k", "v", "o"):
            weight(f"{p}.attn.w{proj}", h, h)
            const(f"{p}.attn.b{proj}", 0.0, h)
        const(f"{p}.ln2.gain", 1.0, h)
        const(f"{p}.ln2.bias", 0.0, h)
        if config.ffn == "swiglu":
            weight(f"{p}.ffn.w1", h, i)
            weight(f"{p}.ffn.w2", h, i)
            weight(f"{p}.ffn.w3", i, h)
        else:
            weight(f"{p}.ffn.w_in", h, i)
            const(f"{p}.ffn.b_in", 0.0, i)
            weight(f"{p}.ffn.w_out", i, h)
            const(f"{p}.ffn.b_out", 0.0, h)
    return params


def embed_sequence(batch: Batch, params: dict, config: ModelConfig) -> Tensor:
    """Sum of token, age, optional abstime, segment and (learned) position terms; PAD rows are zero."""
    b, l = batch.shape
    if l > config.context_length:
        raise ValueError(f"sequence length {l} exceeds context length {config.context_length}")
    x = embedding(params[TOKEN_TABLE], batch.tokens)
    if config.age_embedding == "discrete":
        years = np.floor(np.where(batch.mask, batch.ages, 0.0)).astype(np.int64)
        if years.min() < 0 or years.max() > config.max_age:
            raise ValueError(f"age outside the discrete table [0, {config.max_age}]")
        x = x + embedding(params["embed.age"], years)
    else:
        x = x + time2vec(batch.ages, params["embed.age_t2v.omega"], params["embed.age_t2v.phi"],
                         config.t2v_age_scale, config.t2v_clip)
    if config.abstime_embedding == "time2vec":
        x = x + time2vec(batch.abstimes, params["embed.time_t2v.omega"], params["embed.time_t2v.phi"],
                         config.t2v_time_scale, config.t2v_clip)
    table = params["embed.segment"]
    segments = np.where(batch.mask, batch.segments, 0)
    if segments.size and (segments.min() < 0 or segments.max() >= table.shape[0]):
        raise ValueError(f"segment {segments.max()} outside the segment table of size {table.shape[0]}")
    x = x + embedding(table, segments)
    if config.position == "learned":
        x = x + embedding(params["embed.position"], np.broadcast_to(np.arange(l), (b, l)))
    return x * batch.mask[..., None]


def encoder_forward(batch: Batch, params: dict, config: ModelConfig, training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Hidden states ``[B, L, hidden]`` from pre-norm residual blocks (no final norm)."""
    x = embed_sequence(batch, params, config)
    p_drop = config.dropout if training else 0.0
    for layer in range(config.layers):
        p = f"layer{layer}"
        h = layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"], config.ln_eps)
        x = x + attention_forward(h, batch.mask, params, f"{p}.attn", config.heads, config.position,
                                  config.rope_base, p_drop, rng, training)
        h = layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"], config.ln_eps)
        x = x + ffn_forward(h, params, f"{p}.ffn", config.ffn, p_drop, rng, training) * batch.mask[..., None]
    return x


class Encoder:
    """Parameters plus config; ``__call__`` runs :func:`encoder_forward`."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, Parameter] | None = None):
        self.config = config
        self.params = init_parameters(config, seed) if params is None else params

    def __call__(self, batch: Batch, training: bool = False, rng=None) -> Tensor:
        return encoder_forward(batch, self.params, self.config, training, rng)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        return iter(self.params.items())

    def parameter_count(self, include_embeddings: bool = True) -> int:
        return sum(p.size for name, p in self.params.items() if include_embeddings or name != TOKEN_TABLE)


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | os.PathLike, params: dict[str, Parameter], config: ModelConfig,
                    extra: dict | None = None) -> None:
    """Write named tensors and the config (as JSON) into one ``.npz`` container."""
    meta = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "extra": extra or {},
            "no_decay": sorted(name for name, p in params.items() if not p.decay)}
    arrays = {f"param/{name}": p.data for name, p in params.items()}
    try:
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
                     **arrays)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike, config: ModelConfig | None = None
                    ) -> tuple[ModelConfig, dict[str, Parameter], dict]:
    """Read a checkpoint, checking its version and every tensor shape against ``config``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        stored = ModelConfig.from_dict(meta["config"])
        config = stored if config is None else config
        expected = init_parameters(config, seed=0)
        names = [k[len("param/"):] for k in data.files if k.startswith("param/")]
        extra_names = sorted(set(names) - set(expected))
        missing = sorted(set(expected) - set(names))
        if missing:
            raise ValueError(f"{path}: checkpoint lacks parameters {missing[:5]}")
        params: dict[str, Parameter] = {}
        for name, ref in expected.items():
            arr = data[f"param/{name}"]
            if arr.shape != ref.shape:
                raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, expected {ref.shape}")
            params[name] = Parameter(arr, name=name, decay=ref.decay)
        no_decay = set(meta.get("no_decay", ()))
        for name in extra_names:
            params[name] = Parameter(data[f"param/{name}"], name=name, decay=name not in no_decay)
    return config, params, meta.get("extra", {})
