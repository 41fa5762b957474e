"""Seeded multi-run orchestration, probability-average bagging, and the
seven-row ablation grid.

A run = stage-0 text backbone, optional token selection, optional stage-2
audio-embedding pretraining, stage-3 adapter/head fine-tuning, test-set
metrics.  ``run_seeded`` repeats the whole thing per seed and aggregates;
``ablation_grid`` sweeps the published seven-row combination table:

    text-only
    pretraining off, semantic filter on,  random / lasso
    pretraining on,  semantic filter off, random / lasso
    pretraining on,  semantic filter on,  random / lasso

The stage-0 backbone depends only on (corpus text, model shape, stage-0
settings, seed), so it is trained once per seed and shared across grid rows
through an in-process cache.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import TASKS, CorpusBundle, Task, UtteranceRecord
from .errors import (
    EmptySplit,
    HeterogeneousHeads,
    InvalidSpec,
    LengthMismatch,
    MissingPrerequisite,
)
from .metrics import confusion_matrix, macro_f1, metrics_summary, positive_f1
from .model import (
    ClassifierHead,
    FusedSequence,
    LmConfig,
    LoraAdapter,
    attach_lora,
    build_fused_sequence,
    default_lora_targets,
    init_head,
    init_params,
)
from .numerics import ParamStore
from .selection import (
    MultimodalVocab,
    SelectionResult,
    build_bow,
    select_tokens_l1,
    select_tokens_random,
)
from .training import (
    TrainResult,
    finetune,
    freeze_for_audio_pretraining,
    predict_classes,
    pretrain_audio_embeddings,
    train_text_clm,
)

logger = logging.getLogger("speechsel.experiment")

MODALITIES = ("text", "text+audio", "continuous-baseline")
SELECTION_METHODS = ("lasso", "random", "none")
METRIC_NAMES = ("macro_f1", "positive_f1")

# token-selection modalities need an actual method; the others have no
# discrete audio tokens to select from
_TOKEN_MODALITY = "text+audio"


@dataclass(frozen=True)
class TrainSettings:
    """Per-stage optimizer settings; defaults sized for desk-scale corpora."""

    batch_size: int = 32
    stage0_lr: float = 3e-3
    stage0_epochs: int = 12
    stage0_patience: int = 3
    stage2_lr: float = 1e-2
    stage2_epochs: int = 20
    stage2_patience: int = 4
    stage3_lr: float = 1e-2
    stage3_epochs: int = 25
    stage3_patience: int = 5
    lora_rank: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidSpec("batch_size must be positive")
        for name in ("stage0_epochs", "stage0_patience", "stage2_epochs",
                     "stage2_patience", "stage3_epochs", "stage3_patience",
                     "lora_rank"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be positive")
        for name in ("stage0_lr", "stage2_lr", "stage3_lr", "lora_alpha"):
            if not getattr(self, name) > 0:
                raise InvalidSpec(f"{name} must be positive")


@dataclass(frozen=True)
class RunSpec:
    """Everything that determines a seeded run, minus the corpus itself.

    ``n_layers`` and ``n_codewords`` describe the token-grid geometry behind
    the corpus's flat audio ids: global id = (layer - 1) * n_codewords +
    index, so the semantic filter drops ids below ``n_codewords``.
    """

    task: str = "afd"
    modality: str = "text+audio"
    selection: str = "lasso"
    semantic_filter: bool = True
    audio_pretraining: bool = True
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    target_count: int = 73
    metric: Optional[str] = None  # default chosen per task
    lm: LmConfig = field(default_factory=LmConfig)
    n_layers: int = 5
    n_codewords: int = 100
    selection_band: float = 0.1
    selection_max_bisect: int = 30
    train: TrainSettings = field(default_factory=TrainSettings)

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidSpec(f"unknown task {self.task!r}")
        if self.modality not in MODALITIES:
            raise InvalidSpec(f"unknown modality {self.modality!r}")
        if self.selection not in SELECTION_METHODS:
            raise InvalidSpec(f"unknown selection method {self.selection!r}")
        if (self.selection == "none") != (self.modality != _TOKEN_MODALITY):
            raise InvalidSpec(
                "selection 'none' is for modalities without discrete audio "
                "tokens; token runs need 'lasso' or 'random'")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise InvalidSpec("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidSpec("seeds must be distinct")
        if self.metric is not None and self.metric not in METRIC_NAMES:
            raise InvalidSpec(f"unknown metric {self.metric!r}")
        if self.selection != "none" and self.target_count < 1:
            raise InvalidSpec("target_count must be positive for token runs")
        if self.n_layers < 1 or self.n_codewords < 1:
            raise InvalidSpec("token-grid geometry must be positive")
        if self.selection_band <= 0:
            raise InvalidSpec("selection_band must be positive")
        if self.selection_max_bisect < 1:
            raise InvalidSpec("selection_max_bisect must be at least 1")
        if self.semantic_filter and self.n_layers < 2:
            raise InvalidSpec(
                "semantic filtering drops layer 1; need at least 2 layers")

    @property
    def metric_name(self) -> str:
        if self.metric is not None:
            return self.metric
        return "positive_f1" if self.task == "afd" else "macro_f1"

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        return out


def spec_hash(spec: RunSpec) -> str:
    """12-hex digest naming the run directory; stable across processes.

    Seeds are excluded: per-seed artifacts live in seed subdirectories of
    one run directory, so working seed-by-seed composes with aggregating
    over the full seed list later.
    """
    payload = spec.to_dict()
    payload.pop("seeds")
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


# --- corpus plumbing ---------------------------------------------------------------


def _require_splits(corpus: CorpusBundle) -> None:
    for name in ("train", "val", "test"):
        if not corpus.splits.get(name):
            raise EmptySplit(f"corpus split {name!r} is empty")


def _corpus_digest(corpus: CorpusBundle) -> str:
    h = hashlib.sha256()
    for split in ("train", "val", "test"):
        for r in corpus.splits.get(split, []):
            h.update(r.id.encode())
            h.update(np.asarray(r.tokens or (), dtype=np.int64).tobytes())
            h.update(np.asarray(r.audio_tokens or (), dtype=np.int64).tobytes())
            h.update(str(r.label).encode())
    return h.hexdigest()


def _metric_value(name: str, gold: np.ndarray, preds: np.ndarray,
                  n_classes: int) -> float:
    cm = confusion_matrix(gold, preds, n_classes)
    if name == "macro_f1":
        return macro_f1(cm)
    return positive_f1(cm, 1)


def _semantic_keep(tokens: Sequence[int], n_codewords: int) -> Tuple[int, ...]:
    # layer 1 occupies global ids [0, n_codewords)
    return tuple(t for t in tokens if t >= n_codewords)


def _selection_pool(spec: RunSpec, corpus: CorpusBundle):
    """(samples, labels, vocab) for the BoW selection fit on the train split."""
    meta = corpus.meta or {}
    n_text = int(meta.get("n_text", spec.lm.n_text))
    if "n_audio" in meta:
        expect = spec.n_layers * spec.n_codewords
        if int(meta["n_audio"]) != expect:
            raise InvalidSpec(
                f"corpus audio vocabulary {meta['n_audio']} does not match "
                f"spec grid geometry {spec.n_layers} x {spec.n_codewords}")
    if spec.semantic_filter:
        vocab = MultimodalVocab.for_grid(n_text, spec.n_layers - 1,
                                         spec.n_codewords, layer_offset=2)
    else:
        vocab = MultimodalVocab.for_grid(n_text, spec.n_layers,
                                         spec.n_codewords, layer_offset=1)
    task = TASKS[spec.task]
    samples, labels = [], []
    for r in corpus.splits["train"]:
        audio = r.audio_tokens or ()
        if spec.semantic_filter:
            audio = _semantic_keep(audio, spec.n_codewords)
        samples.append((tuple(r.tokens or ()), audio))
        labels.append(task.label_index(r.label))
    return samples, np.asarray(labels, dtype=np.int64), vocab


def select_audio_tokens(spec: RunSpec, corpus: CorpusBundle,
                        seed: int) -> SelectionResult:
    """Fit the selector on the train split and return the kept global ids."""
    samples, labels, vocab = _selection_pool(spec, corpus)
    if spec.target_count > vocab.n_audio:
        suffix = (" after semantic filtering" if spec.semantic_filter else "")
        raise InvalidSpec(
            f"target_count {spec.target_count} exceeds the "
            f"{vocab.n_audio}-token audio vocabulary{suffix}")
    bow = build_bow(samples, vocab)
    n_classes = len(TASKS[spec.task].class_names)
    if spec.selection == "lasso":
        # the l1 fit is deterministic given the corpus, so every seed of a
        # run shares the same selected set (the selector is not resampled)
        return select_tokens_l1(bow, labels, spec.target_count,
                                n_classes=n_classes,
                                band=spec.selection_band,
                                max_bisect=spec.selection_max_bisect)
    return select_tokens_random(bow.observed_audio_ids(), spec.target_count,
                                seed)


def fused_dataset(records: Sequence[UtteranceRecord], task: Task,
                  config: LmConfig,
                  selection: Optional[SelectionResult]) -> List[FusedSequence]:
    """Fused sequences for a record list; audio kept only where selected.

    Selected global ids map to the model's dense audio range by rank, so
    the embedding table holds exactly the selected vocabulary.
    """
    selected = None
    if selection is not None:
        selected = np.asarray(selection.selected_ids, dtype=np.int64)
    seqs = []
    for r in records:
        audio_lm: Sequence[int] = ()
        if selected is not None and r.audio_tokens:
            toks = np.asarray(r.audio_tokens, dtype=np.int64)
            kept = toks[np.isin(toks, selected)]
            audio_lm = config.n_text + np.searchsorted(selected, kept)
        seqs.append(build_fused_sequence(
            list(r.tokens or ()), audio_lm, config,
            label=task.label_index(r.label)))
    return seqs


# --- stage-0 backbone cache ---------------------------------------------------------

_STAGE0_CACHE: Dict[Tuple, Dict] = {}


def clear_stage0_cache() -> None:
    _STAGE0_CACHE.clear()


def _stage0_backbone(spec: RunSpec, corpus: CorpusBundle,
                     config: LmConfig) -> Tuple[ParamStore, TrainResult]:
    """Text-only pretrained parameters for this (corpus, config, settings, seed).

    Cached because every ablation row reuses the same backbone; the cache
    hands out copies so callers can train on the result freely.
    """
    ts = spec.train
    key = (
        _corpus_digest(corpus),
        json.dumps(config.to_dict(), sort_keys=True),
        ts.batch_size, ts.stage0_lr, ts.stage0_epochs, ts.stage0_patience,
    )
    if key not in _STAGE0_CACHE:
        params = init_params(config)
        task = TASKS[spec.task]
        train_seqs = fused_dataset(corpus.splits["train"], task, config, None)
        val_seqs = fused_dataset(corpus.splits["val"], task, config, None)
        result = train_text_clm(
            params, config, train_seqs, val_seqs, lr=ts.stage0_lr,
            batch_size=ts.batch_size, max_epochs=ts.stage0_epochs,
            patience=ts.stage0_patience, seed=config.seed)
        _STAGE0_CACHE[key] = {
            "params": {n: params[n].copy() for n in params.names()},
            "result": result,
        }
        logger.info("stage0 backbone trained (seed %d, best val %.4f)",
                    config.seed, result.best_value)
    entry = _STAGE0_CACHE[key]
    params = init_params(config)
    for name in params.names():
        params.params[name][...] = entry["params"][name]
    return params, entry["result"]


# --- single seeded run ---------------------------------------------------------------


@dataclass
class ModelBundle:
    """Everything needed to predict with one trained run."""

    params: ParamStore
    config: LmConfig
    adapters: Dict[str, LoraAdapter]
    head: ClassifierHead
    selection: Optional[SelectionResult]
    task: Task

    def predict_probs(self, records: Sequence[UtteranceRecord]) -> np.ndarray:
        seqs = fused_dataset(records, self.task, self.config, self.selection)
        return predict_classes(seqs, self.params, self.config, self.adapters,
                               self.head)


@dataclass
class SeedOutcome:
    seed: int
    metrics: Dict
    bundle: ModelBundle
    curves: Dict[str, TrainResult]


def prepare_run(spec: RunSpec, corpus: CorpusBundle, seed: int):
    """Stage 0, token selection, and optional stage-2 pretraining.

    Returns ``(params, config, selection, curves)`` ready for fine-tuning.
    """
    if spec.modality == "continuous-baseline":
        raise MissingPrerequisite(
            "continuous-baseline runs need per-utterance feature vectors "
            "from a pretrained audio encoder, which is outside this "
            "package; use project_continuous_audio with your own vectors")
    _require_splits(corpus)
    task = TASKS[spec.task]
    meta = corpus.meta or {}
    n_text = int(meta.get("n_text", spec.lm.n_text))
    ts = spec.train
    multimodal = spec.modality == _TOKEN_MODALITY
    # n_audio stays fixed across modalities so every grid row shares one
    # config, and with it the cached stage-0 backbone
    config = replace(spec.lm, n_text=n_text, n_audio=spec.target_count,
                     seed=seed)

    params, stage0 = _stage0_backbone(spec, corpus, config)
    curves: Dict[str, TrainResult] = {"stage0": stage0}

    selection = None
    if multimodal:
        selection = select_audio_tokens(spec, corpus, seed)

    if multimodal and spec.audio_pretraining:
        train_seqs = fused_dataset(corpus.splits["train"], task, config,
                                   selection)
        val_seqs = fused_dataset(corpus.splits["val"], task, config,
                                 selection)
        # the audio CLM objective is defined only on sequences that kept at
        # least one selected token; the rest carry no stage-2 signal
        s2_train = [s for s in train_seqs if s.n_audio_positions > 0]
        s2_val = [s for s in val_seqs if s.n_audio_positions > 0]
        if not s2_train or not s2_val:
            raise EmptySplit(
                "no sequences carry selected audio tokens; nothing for "
                "stage-2 pretraining to fit")
        freeze_for_audio_pretraining(params)
        curves["stage2"] = pretrain_audio_embeddings(
            params, config, s2_train, s2_val, lr=ts.stage2_lr,
            batch_size=ts.batch_size, max_epochs=ts.stage2_epochs,
            patience=ts.stage2_patience, seed=seed)
    return params, config, selection, curves


def finetune_run(spec: RunSpec, corpus: CorpusBundle, seed: int,
                 params: ParamStore, config: LmConfig,
                 selection: Optional[SelectionResult]):
    """Stage 3 on a prepared backbone; returns (bundle, stage-3 curve)."""
    _require_splits(corpus)
    task = TASKS[spec.task]
    n_classes = len(task.class_names)
    ts = spec.train
    metric_name = spec.metric_name
    train_seqs = fused_dataset(corpus.splits["train"], task, config, selection)
    val_seqs = fused_dataset(corpus.splits["val"], task, config, selection)

    adapters = attach_lora(params, default_lora_targets(config),
                           rank=ts.lora_rank, alpha=ts.lora_alpha, seed=seed)
    head = init_head(config, n_classes, seed=seed)

    def val_metric(seqs, params_, config_, adapters_, head_):
        probs = predict_classes(seqs, params_, config_, adapters_, head_)
        gold = np.asarray([s.label for s in seqs], dtype=np.int64)
        return _metric_value(metric_name, gold, probs.argmax(axis=1),
                             n_classes)

    curve = finetune(
        params, config, adapters, head, train_seqs, val_seqs,
        lr=ts.stage3_lr, batch_size=ts.batch_size,
        max_epochs=ts.stage3_epochs, patience=ts.stage3_patience,
        seed=seed, metric=val_metric)
    bundle = ModelBundle(params=params, config=config, adapters=adapters,
                         head=head, selection=selection, task=task)
    return bundle, curve


def evaluate_bundle(spec: RunSpec, corpus: CorpusBundle,
                    bundle: ModelBundle,
                    seed: Optional[int] = None) -> Dict:
    """Test-split metrics for one trained bundle."""
    _require_splits(corpus)
    task = bundle.task
    n_classes = len(task.class_names)
    metric_name = spec.metric_name
    records = corpus.splits["test"]
    probs = bundle.predict_probs(records)
    preds = probs.argmax(axis=1)
    gold = np.asarray([task.label_index(r.label) for r in records],
                      dtype=np.int64)
    summary = metrics_summary(gold, preds, n_classes,
                              class_names=list(task.class_names))
    metrics = {
        "task": spec.task,
        "metric_name": metric_name,
        "value": _metric_value(metric_name, gold, preds, n_classes),
        **summary,
    }
    if seed is not None:
        metrics["seed"] = seed
    if bundle.selection is not None:
        metrics["selection"] = {"method": bundle.selection.method,
                                "n_selected": bundle.selection.n_selected}
    return metrics


def run_single(spec: RunSpec, corpus: CorpusBundle, seed: int) -> SeedOutcome:
    """One full pipeline pass at one seed; deterministic end to end."""
    params, config, selection, curves = prepare_run(spec, corpus, seed)
    bundle, stage3 = finetune_run(spec, corpus, seed, params, config,
                                  selection)
    curves["stage3"] = stage3
    metrics = evaluate_bundle(spec, corpus, bundle, seed=seed)
    logger.info("run seed=%d %s=%.4f", seed, spec.metric_name,
                metrics["value"])
    return SeedOutcome(seed=seed, metrics=metrics, bundle=bundle,
                       curves=curves)


# --- bagging -------------------------------------------------------------------------


def average_probabilities(prob_sets: Sequence[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-member probability matrices (float64)."""
    if not prob_sets:
        raise ValueError("need at least one probability matrix")
    first = np.asarray(prob_sets[0], dtype=np.float64)
    if first.ndim != 2:
        raise LengthMismatch("probability matrices must be 2-D")
    total = np.zeros_like(first)
    for p in prob_sets:
        p = np.asarray(p, dtype=np.float64)
        if p.shape[1] != first.shape[1]:
            raise HeterogeneousHeads(
                f"member class counts differ: {p.shape[1]} vs {first.shape[1]}")
        if p.shape[0] != first.shape[0]:
            raise LengthMismatch(
                f"member sample counts differ: {p.shape[0]} vs {first.shape[0]}")
        total += p
    return total / len(prob_sets)


def bag_predict(members: Sequence[ModelBundle],
                records: Sequence[UtteranceRecord]) -> np.ndarray:
    """Probability-average ensemble; argmax ties go to the lowest class."""
    if not members:
        raise ValueError("need at least one member model")
    counts = {m.head.n_classes for m in members}
    if len(counts) > 1:
        raise HeterogeneousHeads(f"member class counts differ: {sorted(counts)}")
    probs = average_probabilities([m.predict_probs(records) for m in members])
    return probs.argmax(axis=1)


# --- seeded aggregation ---------------------------------------------------------------


@dataclass
class SeededResult:
    spec: RunSpec
    outcomes: List[SeedOutcome]
    metric_name: str
    mean: float
    stdev: float
    bagged: float

    @property
    def values(self) -> List[float]:
        return [o.metrics["value"] for o in self.outcomes]


def run_seeded(spec: RunSpec, corpus: CorpusBundle) -> SeededResult:
    """Independent full runs per seed, plus mean/stdev and the bagged score."""
    outcomes = [run_single(spec, corpus, seed) for seed in spec.seeds]
    values = [o.metrics["value"] for o in outcomes]
    mean = float(np.mean(values))
    if len(values) > 1:
        stdev = float(np.std(values, ddof=1))
    else:
        logger.warning("single-seed spec: stdev reported as 0")
        stdev = 0.0
    task = TASKS[spec.task]
    records = corpus.splits["test"]
    gold = np.asarray([task.label_index(r.label) for r in records],
                      dtype=np.int64)
    preds = bag_predict([o.bundle for o in outcomes], records)
    bagged = _metric_value(spec.metric_name, gold, preds,
                           len(task.class_names))
    logger.info("seeded run: mean %.4f stdev %.4f bagged %.4f",
                mean, stdev, bagged)
    return SeededResult(spec=spec, outcomes=outcomes,
                        metric_name=spec.metric_name, mean=mean,
                        stdev=stdev, bagged=bagged)


# --- ablation grid --------------------------------------------------------------------

# (audio_pretraining, semantic_filter, selection); None = text-only row
GRID_ROWS: Tuple[Optional[Tuple[bool, bool, str]], ...] = (
    None,
    (False, True, "random"),
    (False, True, "lasso"),
    (True, False, "random"),
    (True, False, "lasso"),
    (True, True, "random"),
    (True, True, "lasso"),
)


def _row_label(row: Optional[Tuple[bool, bool, str]]) -> str:
    if row is None:
        return "text-only"
    pt, sf, sel = row
    return (f"pt={'on' if pt else 'off'} "
            f"filter={'on' if sf else 'off'} {sel}")


def _row_spec(base: RunSpec, row: Optional[Tuple[bool, bool, str]]) -> RunSpec:
    if row is None:
        return replace(base, modality="text", selection="none",
                       audio_pretraining=False, semantic_filter=False)
    pt, sf, sel = row
    return replace(base, modality="text+audio", selection=sel,
                   audio_pretraining=pt, semantic_filter=sf)


@dataclass
class GridRowResult:
    label: str
    audio_pretraining: Optional[bool]
    semantic_filter: Optional[bool]
    selection: Optional[str]
    result: SeededResult

    def to_dict(self) -> Dict:
        return {
            "label": self.label,
            "audio_pretraining": self.audio_pretraining,
            "semantic_filter": self.semantic_filter,
            "selection": self.selection,
            "metric_name": self.result.metric_name,
            "mean": self.result.mean,
            "stdev": self.result.stdev,
            "bagged": self.result.bagged,
            "values": self.result.values,
        }


@dataclass
class AblationReport:
    rows: List[GridRowResult]

    def to_dict(self) -> Dict:
        return {"rows": [r.to_dict() for r in self.rows]}

    def to_markdown(self) -> str:
        return render_markdown(self.to_dict())

    def to_csv(self) -> str:
        return render_csv(self.to_dict())


def _cell(flag: Optional[bool]) -> str:
    if flag is None:
        return "-"
    return "yes" if flag else "no"


def render_markdown(report: Dict) -> str:
    """Markdown table from a stored report dict (no models needed)."""
    lines = [
        "| configuration | audio PT | semantic filter | selection | mean | stdev | bagged |",
        "|---|---|---|---|---|---|---|",
    ]
    for row in report["rows"]:
        sel = row["selection"] if row["selection"] not in (None, "none") else "-"
        lines.append(
            f"| {row['label']} | {_cell(row['audio_pretraining'])} "
            f"| {_cell(row['semantic_filter'])} | {sel} "
            f"| {row['mean']:.4f} | {row['stdev']:.4f} | {row['bagged']:.4f} |")
    return "\n".join(lines) + "\n"


def render_csv(report: Dict) -> str:
    """CSV with the same columns as the Markdown table."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["label", "audio_pretraining", "semantic_filter",
                     "selection", "metric_name", "mean", "stdev", "bagged"])
    for row in report["rows"]:
        writer.writerow([
            row["label"], _cell(row["audio_pretraining"]),
            _cell(row["semantic_filter"]),
            row["selection"] if row["selection"] not in (None, "none") else "-",
            row["metric_name"],
            f"{row['mean']:.6f}", f"{row['stdev']:.6f}", f"{row['bagged']:.6f}",
        ])
    return buf.getvalue()


def ablation_grid(base: RunSpec, corpus: CorpusBundle) -> AblationReport:
    """Run all seven rows with the base spec's task/seeds/settings."""
    rows = []
    for row in GRID_ROWS:
        spec = _row_spec(base, row)
        label = _row_label(row)
        logger.info("grid row: %s", label)
        seeded = run_seeded(spec, corpus)
        rows.append(GridRowResult(
            label=label,
            audio_pretraining=None if row is None else row[0],
            semantic_filter=None if row is None else row[1],
            selection=None if row is None else row[2],
            result=seeded))
    return AblationReport(rows=rows)
