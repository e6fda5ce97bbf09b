"""Pretraining and fine-tuning loops with warmup, early stopping and CSV history."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from ..cohort import example_sampling_probabilities
from ..evaluation import auroc
from ..model import Batch, ModelConfig, collate, encoder_forward, init_parameters, load_checkpoint, save_checkpoint
from ..numerics import IGNORE_INDEX, AdamW, Parameter, bce_with_logits, cross_entropy, no_grad, zero_grad
from ..pipeline import TokenSequence
from .heads import (
    POOLING,
    classifier_logits,
    init_mlm_head,
    init_plos_head,
    init_pool_head,
    mlm_logits,
    plos_logits,
    pool,
)
from .masking import mask_tokens

PHASES = ("pretrain", "finetune")


@dataclass(frozen=True)
class TrainSpec:
    phase: str = "pretrain"
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    warmup_epochs: int = 5
    patience: int = 5
    masking_ratio: float = 0.15
    plos: bool = False
    plos_weight: float = 1.0
    pooling: str = "cls"
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not 0.0 < self.masking_ratio <= 1.0:
            raise ValueError(f"masking_ratio must lie in (0, 1], got {self.masking_ratio}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_epochs < 0 or self.patience < 1:
            raise ValueError("warmup_epochs must be >= 0 and patience >= 1")
        if self.pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}, got {self.pooling!r}")

    @classmethod
    def pretrain(cls, **overrides) -> "TrainSpec":
        return cls(**{"phase": "pretrain", "batch_size": 256, "lr": 1e-3, **overrides})

    @classmethod
    def finetune(cls, **overrides) -> "TrainSpec":
        return cls(**{"phase": "finetune", "batch_size": 512, "lr": 2e-5, **overrides})

    @classmethod
    def from_dict(cls, data: dict) -> "TrainSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TrainSpec":
        return replace(self, **changes)


def lr_at_epoch(spec: TrainSpec, epoch: int) -> float:
    """Linear warmup ``lr * (e + 1) / warmup`` for the first epochs, constant afterwards."""
    if epoch < spec.warmup_epochs:
        return spec.lr * (epoch + 1) / spec.warmup_epochs
    return spec.lr


class EarlyStopping:
    """Tracks the best epoch; ``update`` returns True once ``patience`` epochs pass without improvement."""

    def __init__(self, patience: int = 5, mode: str = "min"):
        if mode not in ("min", "max"):
            raise ValueError("mode must be 'min' or 'max'")
        self.patience = patience
        self.mode = mode
        self.best_value: float | None = None
        self.best_epoch: int | None = None
        self.stale = 0

    def improved(self, value: float) -> bool:
        if self.best_value is None:
            return True
        return value < self.best_value if self.mode == "min" else value > self.best_value

    def update(self, epoch: int, value: float) -> bool:
        if self.improved(value):
            self.best_value, self.best_epoch, self.stale = value, epoch, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


# --------------------------------------------------------------------------- models

def _fresh(params: dict[str, Parameter]) -> dict[str, Parameter]:
    """Independent copies with cleared optimizer state."""
    return {n: Parameter(p.data.copy(), name=n, decay=p.decay) for n, p in params.items()}


def _snapshot(params: dict[str, Parameter]) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in params.items()}


def _restore(params: dict[str, Parameter], snapshot: dict[str, np.ndarray]) -> None:
    for n, data in snapshot.items():
        params[n].data = data.copy()


def encoder_only(params: dict[str, Parameter]) -> dict[str, Parameter]:
    return {n: p for n, p in params.items() if not n.startswith("head.")}


class PretrainModel:
    """Encoder plus the tied MLM decoder and an optional PLOS probe."""

    def __init__(self, config: ModelConfig, seed: int = 0, plos: bool = False,
                 params: dict[str, Parameter] | None = None):
        self.config = config
        self.plos = plos
        if params is None:
            rng = np.random.default_rng([seed, 1])
            params = init_parameters(config, seed)
            params.update(init_mlm_head(config.hidden))
            if plos:
                params.update(init_plos_head(config.hidden, rng, config.init_std))
        self.params = params

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.params, self.config, {"kind": "pretrain", "plos": self.plos, **(extra or {})})

    @classmethod
    def load(cls, path) -> "PretrainModel":
        config, params, extra = load_checkpoint(path)
        return cls(config, plos=bool(extra.get("plos")), params=params)


class SequenceClassifier:
    """Encoder, a pooling strategy and a single-logit classifier."""

    def __init__(self, config: ModelConfig, pooling: str = "cls", seed: int = 0,
                 encoder_params: dict[str, Parameter] | None = None):
        self.config = config
        self.pooling = pooling
        params = init_parameters(config, seed) if encoder_params is None else _fresh(encoder_only(encoder_params))
        params.update(init_pool_head(pooling, config.hidden, np.random.default_rng([seed, 2]), config.init_std))
        self.params = params

    @classmethod
    def from_pretrained(cls, model: PretrainModel, pooling: str = "cls", seed: int = 0) -> "SequenceClassifier":
        return cls(model.config, pooling, seed, encoder_params=model.params)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def logits(self, batch: Batch, training: bool = False, rng=None):
        states = encoder_forward(batch, self.params, self.config, training, rng)
        return classifier_logits(pool(states, batch.mask, self.pooling, self.params), self.params)

    def decision_function(self, sequences: Sequence[TokenSequence], batch_size: int = 256) -> np.ndarray:
        """Logits, computed without building a graph."""
        out = []
        with no_grad():
            for start in range(0, len(sequences), batch_size):
                out.append(self.logits(collate(sequences[start:start + batch_size])).data)
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, sequences: Sequence[TokenSequence], batch_size: int = 256) -> np.ndarray:
        """Positive-class probabilities."""
        return expit(self.decision_function(sequences, batch_size))

    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, self.params, self.config, {"kind": "finetune", "pooling": self.pooling, **(extra or {})})

    @classmethod
    def load(cls, path) -> "SequenceClassifier":
        config, params, extra = load_checkpoint(path)
        model = cls.__new__(cls)
        model.config, model.pooling, model.params = config, extra.get("pooling", "cls"), params
        return model


# --------------------------------------------------------------------------- steps

@dataclass
class MaskedBatch:
    batch: Batch  # tokens already corrupted
    targets: np.ndarray
    plos: np.ndarray | None = None


def mask_batch(batch: Batch, ratio: float, vocab_size: int, rng: np.random.Generator,
               plos: np.ndarray | None = None) -> MaskedBatch:
    masked, targets = mask_tokens(batch.tokens, ratio, vocab_size, rng)
    return MaskedBatch(replace(batch, tokens=masked), targets, plos)


def pretrain_losses(mb: MaskedBatch, model: PretrainModel, spec: TrainSpec, training: bool = False, rng=None):
    states = encoder_forward(mb.batch, model.params, model.config, training, rng)
    rows = np.nonzero(mb.targets.reshape(-1) != IGNORE_INDEX)[0]
    if rows.size:
        mlm = cross_entropy(mlm_logits(states, rows, model.params, model.config.ln_eps), mb.targets.reshape(-1)[rows])
    else:
        mlm = (states * 0.0).sum()
    losses = {"mlm": mlm}
    total = mlm
    if spec.plos and model.plos:
        if mb.plos is None:
            raise ValueError("PLOS is enabled but the batch carries no PLOS labels")
        plos = bce_with_logits(plos_logits(states, model.params), mb.plos)
        losses["plos"] = plos
        total = total + plos * spec.plos_weight
    losses["total"] = total
    return losses


def pretrain_step(mb: MaskedBatch, model: PretrainModel, spec: TrainSpec, rng=None) -> dict[str, float]:
    """Forward, backward; gradients are left on the parameters for the optimizer."""
    zero_grad(model.parameters())
    losses = pretrain_losses(mb, model, spec, training=True, rng=rng)
    losses["total"].backward()
    return {k: v.item() for k, v in losses.items()}


def finetune_step(batch: Batch, labels, model: SequenceClassifier, rng=None) -> float:
    zero_grad(model.parameters())
    loss = bce_with_logits(model.logits(batch, training=True, rng=rng), np.asarray(labels, dtype=np.float64))
    loss.backward()
    return loss.item()


# --------------------------------------------------------------------------- fitting

HISTORY_COLUMNS = ("epoch", "split", "metric", "value")


@dataclass
class FitResult:
    history: list[tuple[int, str, str, float]] = field(default_factory=list)
    best_epoch: int | None = None
    best_value: float | None = None
    epochs_run: int = 0

    def record(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.history.append((epoch, split, metric, float(value)))

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for epoch, split, metric, value in self.history:
            writer.writerow((epoch, split, metric, format(value, ".17g")))
        return buf.getvalue()

    def write_history(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.history_csv())


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield order[start:start + size]


def _masked_validation(sequences, plos, spec, vocab_size) -> list[MaskedBatch]:
    # one fixed corruption so the validation loss is comparable across epochs
    rng = np.random.default_rng([spec.seed, 7])
    out = []
    for start in range(0, len(sequences), spec.batch_size):
        chunk = sequences[start:start + spec.batch_size]
        labels = None if plos is None else np.asarray(plos[start:start + spec.batch_size], dtype=np.float64)
        out.append(mask_batch(collate(chunk), spec.masking_ratio, vocab_size, rng, labels))
    return out


def fit_pretrain(model: PretrainModel, train: Sequence[TokenSequence], validation: Sequence[TokenSequence],
                 spec: TrainSpec, plos_train=None, plos_validation=None) -> FitResult:
    """MLM (plus optional PLOS) training; restores the epoch with the lowest validation loss."""
    if spec.phase != "pretrain":
        raise ValueError("fit_pretrain needs a pretrain spec")
    if not train or not validation:
        raise ValueError("pretraining needs non-empty train and validation sets")
    vocab = model.config.vocab_size
    rng = np.random.default_rng(spec.seed)
    optimizer = AdamW(model.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    val_batches = _masked_validation(list(validation), plos_validation, spec, vocab)
    stopper = EarlyStopping(spec.patience, "min")
    result = FitResult()
    best = _snapshot(model.params)
    for epoch in range(spec.epochs):
        optimizer.lr = lr_at_epoch(spec, epoch)
        totals: dict[str, float] = {}
        seen = 0
        for rows in _batches(len(train), spec.batch_size, rng.permutation(len(train))):
            labels = None if plos_train is None else np.asarray([plos_train[i] for i in rows], dtype=np.float64)
            mb = mask_batch(collate([train[i] for i in rows]), spec.masking_ratio, vocab, rng, labels)
            losses = pretrain_step(mb, model, spec, rng)
            optimizer.step()
            for k, v in losses.items():
                totals[k] = totals.get(k, 0.0) + v * len(rows)
            seen += len(rows)
        val_totals: dict[str, float] = {}
        with no_grad():
            for mb in val_batches:
                for k, v in pretrain_losses(mb, model, spec).items():
                    val_totals[k] = val_totals.get(k, 0.0) + v.item() * mb.targets.shape[0]
        n_val = len(validation)
        result.record(epoch, "train", "lr", optimizer.lr)
        for k in sorted(totals):
            result.record(epoch, "train", f"{k}_loss", totals[k] / seen)
        for k in sorted(val_totals):
            result.record(epoch, "validation", f"{k}_loss", val_totals[k] / n_val)
        result.epochs_run = epoch + 1
        monitored = val_totals["total"] / n_val
        if stopper.improved(monitored):
            best = _snapshot(model.params)
        if stopper.update(epoch, monitored):
            break
    _restore(model.params, best)
    result.best_epoch, result.best_value = stopper.best_epoch, stopper.best_value
    return result


def fit_finetune(model: SequenceClassifier, train: Sequence[TokenSequence], train_labels,
                 validation: Sequence[TokenSequence], validation_labels, spec: TrainSpec) -> FitResult:
    """Weighted-sampling fine-tuning; restores the epoch with the highest validation AUROC."""
    if spec.phase != "finetune":
        raise ValueError("fit_finetune needs a finetune spec")
    train_labels = np.asarray(train_labels, dtype=np.int64)
    validation_labels = np.asarray(validation_labels, dtype=np.int64)
    if len(train) != train_labels.size or len(validation) != validation_labels.size:
        raise ValueError("sequences and labels differ in length")
    if len(np.unique(validation_labels)) < 2:
        raise ValueError("the validation set needs both classes to compute AUROC")
    rng = np.random.default_rng(spec.seed)
    probs = example_sampling_probabilities(train_labels)
    optimizer = AdamW(model.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    stopper = EarlyStopping(spec.patience, "max")
    result = FitResult()
    best = _snapshot(model.params)
    for epoch in range(spec.epochs):
        optimizer.lr = lr_at_epoch(spec, epoch)
        draws = rng.choice(len(train), size=len(train), replace=True, p=probs)
        total, seen = 0.0, 0
        for rows in _batches(len(draws), spec.batch_size, draws):
            loss = finetune_step(collate([train[i] for i in rows]), train_labels[rows], model, rng)
            optimizer.step()
            total += loss * len(rows)
            seen += len(rows)
        scores = model.decision_function(list(validation), spec.batch_size)
        val_auc = auroc(scores, validation_labels)
        val_loss = bce_with_logits(scores, validation_labels).item()
        result.record(epoch, "train", "lr", optimizer.lr)
        result.record(epoch, "train", "loss", total / seen)
        result.record(epoch, "validation", "loss", val_loss)
        result.record(epoch, "validation", "auroc", val_auc)
        result.epochs_run = epoch + 1
        if stopper.improved(val_auc):
            best = _snapshot(model.params)
        if stopper.update(epoch, val_auc):
            break
    _restore(model.params, best)
    result.best_epoch, result.best_value = stopper.best_epoch, stopper.best_value
    return result
