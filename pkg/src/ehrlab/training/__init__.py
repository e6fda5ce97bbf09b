"""Masked-language-model pretraining and pooled binary fine-tuning."""

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
from .loop import (
    HISTORY_COLUMNS,
    EarlyStopping,
    FitResult,
    MaskedBatch,
    PretrainModel,
    SequenceClassifier,
    TrainSpec,
    finetune_step,
    fit_finetune,
    fit_pretrain,
    lr_at_epoch,
    mask_batch,
    pretrain_losses,
    pretrain_step,
)
from .masking import admission_spans, mask_tokens, maskable, plos_label

__all__ = [
    "HISTORY_COLUMNS",
    "POOLING",
    "EarlyStopping",
    "FitResult",
    "MaskedBatch",
    "PretrainModel",
    "SequenceClassifier",
    "TrainSpec",
    "admission_spans",
    "classifier_logits",
    "finetune_step",
    "fit_finetune",
    "fit_pretrain",
    "init_mlm_head",
    "init_plos_head",
    "init_pool_head",
    "lr_at_epoch",
    "mask_batch",
    "mask_tokens",
    "maskable",
    "mlm_logits",
    "plos_label",
    "plos_logits",
    "pool",
    "pretrain_losses",
    "pretrain_step",
]
