"""Task heads: the MLM decoder, the PLOS probe and seven sequence pooling strategies."""

from __future__ import annotations

import numpy as np

from ..model.encoder import TOKEN_TABLE
from ..numerics import Parameter, Tensor, as_tensor, concat, layer_norm, linear, masked_softmax, where

POOLING = ("cls", "mean", "max", "sum", "attention-weighted", "bigru", "bilstm")


def _normal(rng, std, *shape):
    return rng.normal(0.0, std, size=shape)


def _add(params, name, data, decay=True):
    params[name] = Parameter(np.asarray(data, dtype=np.float64), name=name, decay=decay)


# --------------------------------------------------------------------------- pretraining heads

def init_mlm_head(hidden: int) -> dict[str, Parameter]:
    """Norm before the decoder; the decoder itself is the token embedding table."""
    params: dict[str, Parameter] = {}
    _add(params, "head.mlm.ln.gain", np.ones(hidden), decay=False)
    _add(params, "head.mlm.ln.bias", np.zeros(hidden), decay=False)
    return params


def mlm_logits(states: Tensor, rows: np.ndarray, params: dict, eps: float = 1e-5) -> Tensor:
    """Vocabulary logits ``[len(rows), V]`` at flattened positions ``rows`` of ``states[B, L, H]``."""
    b, l, h = states.shape
    picked = states.reshape(b * l, h)[np.asarray(rows, dtype=np.int64)]
    normed = layer_norm(picked, params["head.mlm.ln.gain"], params["head.mlm.ln.bias"], eps)
    return normed @ params[TOKEN_TABLE].T


def init_plos_head(hidden: int, rng: np.random.Generator, std: float = 0.02) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    _add(params, "head.plos.w", _normal(rng, std, hidden, 1))
    _add(params, "head.plos.b", np.zeros(1), decay=False)
    return params


def plos_logits(states: Tensor, params: dict) -> Tensor:
    """One logit per sequence from the CLS position."""
    return linear(states[:, 0, :], params["head.plos.w"], params["head.plos.b"]).reshape(states.shape[0])


# --------------------------------------------------------------------------- pooling

def init_pool_head(strategy: str, hidden: int, rng: np.random.Generator, std: float = 0.02
                   ) -> dict[str, Parameter]:
    """Pooling parameters (if any) followed by the ``hidden -> 1`` classifier."""
    if strategy not in POOLING:
        raise ValueError(f"unknown pooling {strategy!r}; expected one of {POOLING}")
    params: dict[str, Parameter] = {}
    if strategy == "attention-weighted":
        _add(params, "head.pool.wk", _normal(rng, std, hidden, hidden))
        _add(params, "head.pool.bk", np.zeros(hidden), decay=False)
        _add(params, "head.pool.query", _normal(rng, std, hidden))
    elif strategy in ("bigru", "bilstm"):
        if hidden % 2:
            raise ValueError("bidirectional pooling needs an even hidden size")
        d = hidden // 2
        gates = 3 if strategy == "bigru" else 4
        scale = 1.0 / np.sqrt(d)
        for direction in ("fwd", "bwd"):
            p = f"head.pool.{direction}"
            _add(params, f"{p}.wx", rng.uniform(-scale, scale, size=(hidden, gates * d)))
            _add(params, f"{p}.wh", rng.uniform(-scale, scale, size=(d, gates * d)))
            _add(params, f"{p}.b", np.zeros(gates * d), decay=False)
            if strategy == "bigru":
                _add(params, f"{p}.bh", np.zeros(gates * d), decay=False)
    _add(params, "head.cls.w", _normal(rng, std, hidden, 1))
    _add(params, "head.cls.b", np.zeros(1), decay=False)
    return params


def _lengths(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise ValueError("cannot pool a sequence with no non-PAD positions")
    if not np.array_equal(mask, np.arange(mask.shape[1])[None, :] < lengths[:, None]):
        raise ValueError("recurrent pooling needs left-aligned (trailing) padding")
    return lengths


def _gru_step(x_t: Tensor, h: Tensor, params: dict, prefix: str, d: int) -> Tensor:
    gx = x_t
    gh = linear(h, params[f"{prefix}.wh"], params[f"{prefix}.bh"])
    z = (gx[:, :d] + gh[:, :d]).sigmoid()
    r = (gx[:, d:2 * d] + gh[:, d:2 * d]).sigmoid()
    n = (gx[:, 2 * d:] + r * gh[:, 2 * d:]).tanh()
    return (1.0 - z) * n + z * h


def _lstm_step(x_t: Tensor, h: Tensor, c: Tensor, params: dict, prefix: str, d: int) -> tuple[Tensor, Tensor]:
    g = x_t + h @ params[f"{prefix}.wh"]
    i = g[:, :d].sigmoid()
    f = g[:, d:2 * d].sigmoid()
    cand = g[:, 2 * d:3 * d].tanh()
    o = g[:, 3 * d:].sigmoid()
    c = f * c + i * cand
    return o * c.tanh(), c


def _recurrence(states: Tensor, mask: np.ndarray, params: dict, prefix: str, kind: str) -> Tensor:
    """Final state of one direction; rows stop updating past their length."""
    b, l, _ = states.shape
    d = params[f"{prefix}.wh"].shape[0]
    # input projections for every step at once, laid out time-major
    xs = linear(states, params[f"{prefix}.wx"], params[f"{prefix}.b"]).transpose(1, 0, 2)
    h = as_tensor(np.zeros((b, d)))
    c = as_tensor(np.zeros((b, d)))
    for t in range(l):
        live = mask[:, t:t + 1]
        if kind == "bigru":
            h = where(live, _gru_step(xs[t], h, params, prefix, d), h)
        else:
            h_new, c_new = _lstm_step(xs[t], h, c, params, prefix, d)
            h, c = where(live, h_new, h), where(live, c_new, c)
    return h


def pool(states, mask, strategy: str, params: dict) -> Tensor:
    """Reduce ``states[B, L, H]`` to ``[B, H]`` using only non-PAD positions."""
    states = as_tensor(states)
    mask = np.asarray(mask, dtype=bool)
    if (mask.sum(axis=1) == 0).any():
        raise ValueError("cannot pool a sequence with no non-PAD positions")
    m = mask[..., None]
    if strategy == "cls":
        return states[:, 0, :]
    if strategy == "sum":
        return (states * m).sum(axis=1)
    if strategy == "mean":
        return (states * m).sum(axis=1) / mask.sum(axis=1, keepdims=True)
    if strategy == "max":
        return where(m, states, -np.inf).max(axis=1)
    if strategy == "attention-weighted":
        keys = linear(states, params["head.pool.wk"], params["head.pool.bk"])
        weights = masked_softmax(keys @ params["head.pool.query"], mask, axis=1)
        return (states * weights.reshape(*weights.shape, 1)).sum(axis=1)
    if strategy in ("bigru", "bilstm"):
        lengths = _lengths(mask)
        b, l = mask.shape
        steps = np.arange(l)[None, :]
        reverse = np.where(steps < lengths[:, None], lengths[:, None] - 1 - steps, steps)
        backward_states = states[np.arange(b)[:, None], reverse]
        fwd = _recurrence(states, mask, params, "head.pool.fwd", strategy)
        bwd = _recurrence(backward_states, mask, params, "head.pool.bwd", strategy)
        return concat([fwd, bwd], axis=-1)
    raise ValueError(f"unknown pooling {strategy!r}; expected one of {POOLING}")


def classifier_logits(pooled: Tensor, params: dict) -> Tensor:
    return linear(pooled, params["head.cls.w"], params["head.cls.b"]).reshape(pooled.shape[0])
