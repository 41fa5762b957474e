"""Training loops: text-only pretraining, audio-embedding pretraining,
and LoRA + head fine-tuning.

All three loops share the same skeleton: seeded minibatch shuffling, AdamW
steps on a ParamStore, an early stopper watching a held-out quantity, and
restoration of the best snapshot before returning.  What differs is which
tensors the store exposes as trainable:

  stage 0: everything (builds the "pretrained" text model)
  stage 2: exactly the audio embedding table
  stage 3: adapter and head tensors only, tracked in a store that shares
           the adapters' and head's own arrays

The stage-2 and stage-3 freezing contracts are bit-exact: tensors outside
the trainable set are never touched by the optimizer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import EmptySplit, NoTrainableParams
from .metrics import confusion_matrix, macro_f1
from .model import (
    Batch,
    ClassifierHead,
    FusedSequence,
    LmConfig,
    LoraAdapter,
    classification_loss,
    classify,
    clm_loss,
    masked_next_token_loss,
    pad_batch,
)
from .numerics import ParamStore, adamw_step

logger = logging.getLogger("speechsel.training")


@dataclass
class TrainResult:
    """Loss/metric curve and the epoch whose snapshot was kept."""

    curve: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_value: float = float("nan")
    n_epochs: int = 0


class _EarlyStopper:
    """Tracks the best value of a watched quantity with patience."""

    def __init__(self, mode: str, patience: int, min_delta: float = 0.0):
        assert mode in ("min", "max")
        self.mode = mode
        self.patience = patience
        self.min_delta = min_delta
        self.best: Optional[float] = None
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one observation; returns True when this is a new best."""
        improved = (
            self.best is None
            or (self.mode == "min" and value < self.best - self.min_delta)
            or (self.mode == "max" and value > self.best + self.min_delta)
        )
        if improved:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _text_target_mask(batch: Batch, config: LmConfig) -> np.ndarray:
    mask = batch.ids != config.pad_id
    mask[:, 0] = False
    return mask


def evaluate_text_clm(seqs: Sequence[FusedSequence], params: ParamStore,
                      config: LmConfig, batch_size: int = 64) -> float:
    """Dataset-mean NLL over all non-pad positions past the first."""
    total, count = 0.0, 0
    for start in range(0, len(seqs), batch_size):
        batch = pad_batch(seqs[start:start + batch_size], config)
        mask = _text_target_mask(batch, config)
        loss, _ = masked_next_token_loss(batch, mask, params, config)
        n = int(mask.sum())
        total += loss * n
        count += n
    return total / max(count, 1)


def evaluate_clm(seqs: Sequence[FusedSequence], params: ParamStore,
                 config: LmConfig, batch_size: int = 64) -> float:
    """Dataset-mean NLL over all audio positions."""
    total, count = 0.0, 0
    for start in range(0, len(seqs), batch_size):
        batch = pad_batch(seqs[start:start + batch_size], config)
        loss, _ = clm_loss(batch, params, config)
        n = int(batch.audio_mask.sum())
        total += loss * n
        count += n
    return total / max(count, 1)


def predict_classes(seqs: Sequence[FusedSequence], params: ParamStore,
                    config: LmConfig,
                    adapters: Optional[Dict[str, LoraAdapter]],
                    head: ClassifierHead,
                    batch_size: int = 64) -> np.ndarray:
    """Class probabilities for every sequence, in input order."""
    out = []
    for start in range(0, len(seqs), batch_size):
        batch = pad_batch(seqs[start:start + batch_size], config)
        out.append(classify(batch, params, config, adapters, head))
    return np.concatenate(out, axis=0)


def _labels_of(seqs: Sequence[FusedSequence]) -> np.ndarray:
    labels = [s.label for s in seqs]
    if any(l is None for l in labels):
        raise ValueError("every sequence needs a label")
    return np.asarray(labels, dtype=np.int64)


def _val_macro_f1(seqs, params, config, adapters, head, n_classes,
                  batch_size) -> float:
    probs = predict_classes(seqs, params, config, adapters, head, batch_size)
    preds = probs.argmax(axis=1)
    cm = confusion_matrix(_labels_of(seqs), preds, n_classes)
    return macro_f1(cm)


# --- stage 0: text-only pretraining ----------------------------------------------


def train_text_clm(params: ParamStore, config: LmConfig,
                   train_seqs: Sequence[FusedSequence],
                   val_seqs: Sequence[FusedSequence],
                   lr: float = 3e-3, batch_size: int = 32,
                   max_epochs: int = 20, patience: int = 3,
                   seed: int = 0) -> TrainResult:
    """Full-parameter CLM training on text-only sequences (in place).

    Targets are all non-pad positions past the first, so SEP/CLS rows are
    trained too: fused layouts downstream reuse them.
    """
    if not train_seqs or not val_seqs:
        raise EmptySplit("stage-0 training needs non-empty train and val")
    store_names = sorted(params.trainable_names())
    if not store_names:
        raise NoTrainableParams("no trainable tensors")
    rng = np.random.default_rng(seed)
    stopper = _EarlyStopper("min", patience)
    best: Dict[str, np.ndarray] = {}
    result = TrainResult()
    train_list = list(train_seqs)
    for epoch in range(max_epochs):
        losses = []
        for idx in _minibatches(len(train_list), batch_size, rng):
            batch = pad_batch([train_list[i] for i in idx], config)
            mask = _text_target_mask(batch, config)
            loss, grads = masked_next_token_loss(
                batch, mask, params, config, want=set(store_names))
            adamw_step(params, grads, lr=lr)
            losses.append(loss)
        val = evaluate_text_clm(val_seqs, params, config, batch_size)
        result.curve.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                             "val_loss": val})
        logger.info("stage0 epoch %d train %.4f val %.4f", epoch,
                    np.mean(losses), val)
        if stopper.update(epoch, val):
            best = {n: params[n].copy() for n in store_names}
        if stopper.should_stop:
            break
    for n, w in best.items():
        params.params[n][...] = w
    result.best_epoch = stopper.best_epoch
    result.best_value = float(stopper.best)
    result.n_epochs = len(result.curve)
    return result


# --- stage 2: audio-embedding pretraining -----------------------------------------


def freeze_for_audio_pretraining(params: ParamStore) -> ParamStore:
    """Mark exactly the audio embedding table trainable."""
    params.freeze_all()
    params.set_trainable("emb_audio", True)
    return params


def pretrain_audio_embeddings(params: ParamStore, config: LmConfig,
                              train_seqs: Sequence[FusedSequence],
                              val_seqs: Sequence[FusedSequence],
                              lr: float = 1e-2, batch_size: int = 32,
                              max_epochs: int = 50, patience: int = 5,
                              seed: int = 0) -> TrainResult:
    """AdamW on the audio-position CLM loss with everything else frozen.

    Requires the store's trainable set to be exactly {emb_audio}; every
    other tensor is bit-identical afterwards.  Early stopping watches the
    held-out CLM loss and the best audio table is restored.
    """
    if not train_seqs or not val_seqs:
        raise EmptySplit("stage-2 training needs non-empty train and val")
    trainable = sorted(params.trainable_names())
    if not trainable:
        raise NoTrainableParams(
            "audio pretraining requires emb_audio to be trainable")
    if trainable != ["emb_audio"]:
        raise ValueError(
            f"stage 2 trains only emb_audio, got trainable set {trainable}")
    rng = np.random.default_rng(seed)
    stopper = _EarlyStopper("min", patience)
    best = params["emb_audio"].copy()
    result = TrainResult()
    train_list = list(train_seqs)
    for epoch in range(max_epochs):
        losses = []
        for idx in _minibatches(len(train_list), batch_size, rng):
            batch = pad_batch([train_list[i] for i in idx], config)
            loss, grads = clm_loss(batch, params, config,
                                   want={"emb_audio"})
            adamw_step(params, grads, lr=lr)
            losses.append(loss)
        val = evaluate_clm(val_seqs, params, config, batch_size)
        result.curve.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                             "val_loss": val})
        logger.info("stage2 epoch %d train %.4f val %.4f", epoch,
                    np.mean(losses), val)
        if stopper.update(epoch, val):
            best = params["emb_audio"].copy()
        if stopper.should_stop:
            break
    params.params["emb_audio"][...] = best
    result.best_epoch = stopper.best_epoch
    result.best_value = float(stopper.best)
    result.n_epochs = len(result.curve)
    return result


# --- stage 3: LoRA + head fine-tuning ---------------------------------------------


def tuning_store(adapters: Dict[str, LoraAdapter],
                 head: ClassifierHead) -> ParamStore:
    """A store whose tensors ARE the adapter and head arrays (shared memory),
    so optimizer steps update the live objects directly."""
    store = ParamStore()
    for target in sorted(adapters):
        store.add(f"lora.{target}.a", adapters[target].a)
        store.add(f"lora.{target}.b", adapters[target].b)
    store.add("head.weight", head.weight)
    store.add("head.bias", head.bias)
    return store


def finetune(params: ParamStore, config: LmConfig,
             adapters: Dict[str, LoraAdapter], head: ClassifierHead,
             train_seqs: Sequence[FusedSequence],
             val_seqs: Sequence[FusedSequence],
             lr: float = 1e-3, batch_size: int = 32,
             max_epochs: int = 30, patience: int = 4,
             seed: int = 0,
             metric: Optional[Callable[..., float]] = None) -> TrainResult:
    """Classification fine-tuning touching only adapters and head (in place).

    Early stopping maximizes the validation task metric (macro-F1 unless
    another callable is given); the best adapter/head snapshot is restored
    before returning.  Base parameters and audio embeddings stay
    bit-identical throughout.
    """
    if not train_seqs or not val_seqs:
        raise EmptySplit("fine-tuning needs non-empty train and val")
    labels = _labels_of(list(train_seqs))
    n_classes = head.n_classes
    if labels.max() >= n_classes:
        raise ValueError("label outside head range")
    tune = tuning_store(adapters, head)
    want: Set[str] = set(tune.names())
    rng = np.random.default_rng(seed)
    stopper = _EarlyStopper("max", patience)
    best = {n: tune[n].copy() for n in tune.names()}
    result = TrainResult()
    train_list = list(train_seqs)

    def val_metric() -> float:
        if metric is not None:
            return metric(val_seqs, params, config, adapters, head)
        return _val_macro_f1(list(val_seqs), params, config, adapters, head,
                             n_classes, batch_size)

    for epoch in range(max_epochs):
        losses = []
        for idx in _minibatches(len(train_list), batch_size, rng):
            batch = pad_batch([train_list[i] for i in idx], config)
            loss, grads = classification_loss(
                batch, params, config, adapters, head, want=want)
            grads = {k: np.asarray(v, dtype=tune[k].dtype)
                     for k, v in grads.items()}
            adamw_step(tune, grads, lr=lr)
            losses.append(loss)
        value = val_metric()
        result.curve.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                             "val_metric": value})
        logger.info("stage3 epoch %d train %.4f val %.4f", epoch,
                    np.mean(losses), value)
        if stopper.update(epoch, value):
            best = {n: tune[n].copy() for n in tune.names()}
        if stopper.should_stop:
            break
    for n, w in best.items():
        tune.params[n][...] = w
    result.best_epoch = stopper.best_epoch
    result.best_value = float(stopper.best)
    result.n_epochs = len(result.curve)
    return result
