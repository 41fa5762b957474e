"""Corpus ingestion, synthetic corpus generation, and corpus statistics.

Records live in a line-oriented JSONL file, one utterance per line, with a
sidecar ``<path>.meta.json`` carrying generator metadata (planted ids,
spec parameters) when the corpus is synthetic.  Each record names its
split, so official partitionings survive a round trip unchanged.

A record's audio can be referenced three ways: a waveform file path, a
precomputed token-grid file path, or an inline list of flattened audio
token ids (the form the synthetic generator emits, skipping the waveform
stage entirely).
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    EmptyCorpus,
    InvalidSpec,
    SchemaError,
    UnknownLabel,
)

logger = logging.getLogger("speechsel.corpus")

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Task:
    """A classification task: its name and ordered class names."""

    name: str
    class_names: Tuple[str, ...]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def label_index(self, label) -> int:
        """Accept an integer index or a class name; return the index."""
        if isinstance(label, bool):
            raise UnknownLabel(f"boolean label {label!r} for task {self.name}")
        if isinstance(label, int):
            if not 0 <= label < self.n_classes:
                raise UnknownLabel(
                    f"label {label} outside [0, {self.n_classes}) for {self.name}")
            return label
        if isinstance(label, str) and label in self.class_names:
            return self.class_names.index(label)
        raise UnknownLabel(f"label {label!r} unknown for task {self.name}")


TASKS: Dict[str, Task] = {
    "afd": Task("afd", ("not_fallacious", "fallacious")),
    "afc": Task("afc", ("ad_hominem", "appeal_to_authority", "appeal_to_emotion",
                        "false_cause", "slippery_slope", "slogan")),
}


class WhitespaceTokenizer:
    """Deterministic hashing tokenizer: word -> crc32(word) mod n_text.

    A stand-in for a trained tokenizer; stable across runs and machines,
    no vocabulary files.  Lowercases and splits on whitespace.
    """

    def __init__(self, n_text: int):
        if n_text < 1:
            raise ValueError("n_text must be positive")
        self.n_text = n_text

    def __call__(self, text: str) -> Tuple[int, ...]:
        return tuple(
            zlib.crc32(w.encode("utf-8")) % self.n_text
            for w in text.lower().split()
        )


@dataclass(frozen=True)
class UtteranceRecord:
    """One utterance: text (raw and/or tokenized), audio reference, label, split."""

    id: str
    label: int
    split: str
    text: Optional[str] = None
    tokens: Optional[Tuple[int, ...]] = None
    audio_path: Optional[str] = None
    grid_path: Optional[str] = None
    audio_tokens: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split {self.split!r} not in {SPLITS}")
        if self.label < 0:
            raise ValueError("label must be a non-negative class index")
        if self.text is None and self.tokens is None:
            raise ValueError(f"record {self.id}: neither text nor tokens present")
        if self.tokens is not None:
            object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.audio_tokens is not None:
            object.__setattr__(self, "audio_tokens",
                               tuple(int(t) for t in self.audio_tokens))


@dataclass
class CorpusBundle:
    """Records grouped by split plus corpus-level metadata."""

    splits: Dict[str, List[UtteranceRecord]]
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        seen: Dict[str, str] = {}
        for split, records in self.splits.items():
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
            for r in records:
                if r.id in seen:
                    raise ValueError(
                        f"record id {r.id!r} appears in both "
                        f"{seen[r.id]!r} and {split!r}")
                seen[r.id] = split

    @property
    def n_records(self) -> int:
        return sum(len(v) for v in self.splits.values())

    def all_records(self) -> List[UtteranceRecord]:
        return [r for s in SPLITS for r in self.splits.get(s, [])]


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the planted-token verification corpus.

    ``planted`` maps a class index to the audio ids that mark it; classes
    may be absent (no marker tokens).  Each sample of a marked class draws
    one audio "tell" tier: the planted ids (probability ``audio_coverage``),
    one of the ``weak_planted`` groups (its ``weak_coverage`` entry), or no
    tell at all (the remaining mass).  The chosen tier's ids are emitted
    independently at that tier's emission rate.  Tiers are exclusive so no
    subset of audio ids fully separates the classes: the lasso path then
    climbs group by group, with a wide stable support plateau at each
    cumulative tier size, instead of avalanching from the first planted set
    straight into noise.  A ``text_coverage`` fraction of each class's
    samples carry that class's marker text tokens at rate ``text_signal``;
    markers also leak into other classes at rate ``text_leak``.  Covered
    samples are textually decisive while uncovered ones are textually
    blank, so a text-only model trains reliably (no majority-class
    collapse) yet its recall is capped by the coverage, pinning the
    text-only plateau near 0.7 macro-F1 and leaving audio measurable
    headroom.
    """

    n_samples: int = 2000
    n_classes: int = 2
    prior: Tuple[float, ...] = (0.8823, 0.1177)
    planted: Dict[int, Tuple[int, ...]] = field(
        default_factory=lambda: {1: tuple(range(100, 200, 10))})
    emission: float = 0.8
    audio_coverage: float = 0.6
    weak_planted: Dict[int, Tuple[Tuple[int, ...], ...]] = field(
        default_factory=lambda: {1: (tuple(range(200, 263)),
                                     tuple(range(270, 277)))})
    weak_coverage: Tuple[float, ...] = (0.25, 0.10)
    weak_emission: Tuple[float, ...] = (0.35, 0.45)
    n_text: int = 300
    n_audio: int = 500
    mean_text_len: float = 12.0
    mean_audio_len: float = 16.0
    text_markers_per_class: int = 4
    text_signal: float = 0.85
    text_coverage: float = 0.4
    text_leak: float = 0.05
    split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidSpec("n_samples must be positive")
        if self.n_classes < 2:
            raise InvalidSpec("need at least two classes")
        if len(self.prior) != self.n_classes:
            raise InvalidSpec("prior length must equal n_classes")
        if any(not 0.0 < p <= 1.0 for p in self.prior):
            raise InvalidSpec("prior entries must lie in (0, 1]")
        if abs(sum(self.prior) - 1.0) > 1e-9:
            raise InvalidSpec("prior must sum to 1")
        if not 0.0 < self.emission <= 1.0:
            raise InvalidSpec("emission probability must lie in (0, 1]")
        if not 0.0 < self.audio_coverage <= 1.0:
            raise InvalidSpec("audio_coverage must lie in (0, 1]")
        if not 0.0 <= self.text_signal <= 1.0:
            raise InvalidSpec("text_signal must lie in [0, 1]")
        if not 0.0 < self.text_coverage <= 1.0:
            raise InvalidSpec("text_coverage must lie in (0, 1]")
        if not 0.0 <= self.text_leak <= 1.0:
            raise InvalidSpec("text_leak must lie in [0, 1]")
        if self.text_leak > self.text_signal:
            raise InvalidSpec(
                "text_leak above text_signal would invert the text labels")
        n_groups = len(self.weak_coverage)
        if len(self.weak_emission) != n_groups:
            raise InvalidSpec(
                "weak_emission and weak_coverage must align per group")
        if any(not 0.0 < p <= 1.0 for p in self.weak_emission):
            raise InvalidSpec("weak emission rates must lie in (0, 1]")
        if any(p < 0.0 for p in self.weak_coverage):
            raise InvalidSpec("weak_coverage entries must be non-negative")
        # group coverages only occupy tier intervals when groups exist
        if (self.weak_planted
                and self.audio_coverage + sum(self.weak_coverage) > 1.0 + 1e-9):
            raise InvalidSpec("tier coverages must sum to at most 1")
        all_planted: List[int] = []
        for c, ids in self.planted.items():
            if not 0 <= c < self.n_classes:
                raise InvalidSpec(f"planted class {c} out of range")
            if any(not 0 <= i < self.n_audio for i in ids):
                raise InvalidSpec("planted ids must lie in the audio vocabulary")
            all_planted.extend(ids)
        for c, groups in self.weak_planted.items():
            if not 0 <= c < self.n_classes:
                raise InvalidSpec(f"weak planted class {c} out of range")
            if len(groups) != n_groups:
                raise InvalidSpec(
                    f"class {c} needs {n_groups} weak groups to match "
                    "weak_coverage")
            for ids in groups:
                if any(not 0 <= i < self.n_audio for i in ids):
                    raise InvalidSpec(
                        "weak planted ids must lie in the audio vocabulary")
                all_planted.extend(ids)
        if len(set(all_planted)) != len(all_planted):
            raise InvalidSpec(
                "planted and weak-planted ids must be disjoint")
        if self.text_markers_per_class * self.n_classes > self.n_text:
            raise InvalidSpec("not enough text vocabulary for class markers")
        if len(self.split_fractions) != 3:
            raise InvalidSpec("split_fractions must have three entries")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise InvalidSpec("split_fractions must sum to 1")
        if min(self.split_fractions) < 0:
            raise InvalidSpec("split_fractions must be non-negative")

    def spec_hash(self) -> str:
        payload = json.dumps(_spec_to_jsonable(self), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _spec_to_jsonable(spec: SyntheticSpec) -> Dict:
    d = asdict(spec)
    d["planted"] = {str(c): list(ids) for c, ids in spec.planted.items()}
    d["weak_planted"] = {str(c): [list(ids) for ids in groups]
                         for c, groups in spec.weak_planted.items()}
    d["prior"] = list(spec.prior)
    d["weak_coverage"] = list(spec.weak_coverage)
    d["weak_emission"] = list(spec.weak_emission)
    d["split_fractions"] = list(spec.split_fractions)
    return d


def _spec_from_jsonable(d: Dict) -> SyntheticSpec:
    d = dict(d)
    d["planted"] = {int(c): tuple(ids) for c, ids in d["planted"].items()}
    d["weak_planted"] = {int(c): tuple(tuple(ids) for ids in groups)
                         for c, groups in d["weak_planted"].items()}
    d["prior"] = tuple(d["prior"])
    d["weak_coverage"] = tuple(d["weak_coverage"])
    d["weak_emission"] = tuple(d["weak_emission"])
    d["split_fractions"] = tuple(d["split_fractions"])
    return SyntheticSpec(**d)


def _draw_tell_tier(spec: SyntheticSpec, y: int,
                    rng: np.random.Generator) -> Tuple[Tuple[int, ...], float]:
    """Pick the sample's tell tier: (ids to emit, their emission rate).

    Consumes one rng draw only when the class actually has a tier choice,
    so fully-covered single-tier specs keep their historical streams.
    """
    strong = spec.planted.get(y, ())
    groups = spec.weak_planted.get(y, ())
    if not strong and not groups:
        return (), 0.0
    if not groups and spec.audio_coverage >= 1.0:
        return strong, spec.emission
    # fixed tier intervals on [0, 1): strong, then each group, then none;
    # a class without ids for some tier simply emits nothing there
    u = rng.random()
    edge = spec.audio_coverage
    if u < edge:
        return (strong, spec.emission) if strong else ((), 0.0)
    for g, ids in enumerate(groups):
        edge += spec.weak_coverage[g]
        if u < edge:
            return ids, spec.weak_emission[g]
    return (), 0.0


def synth_generate(spec: SyntheticSpec) -> CorpusBundle:
    """Deterministic planted-token corpus.

    Every sample draws a label from the prior and pads its audio with
    uniform noise ids drawn outside every planted set.  Samples of a marked
    class additionally draw one tell tier (planted ids, a weak group, or
    none) and emit that tier's ids independently at its emission rate.
    Class-marker text tokens appear with probability ``text_signal`` each,
    giving text a weaker label signal than audio.
    """
    rng = np.random.default_rng(spec.seed)
    planted_all = sorted(
        {i for ids in spec.planted.values() for i in ids}
        | {i for groups in spec.weak_planted.values()
           for ids in groups for i in ids})
    noise_pool = np.setdiff1d(np.arange(spec.n_audio), planted_all)
    if noise_pool.size == 0:
        raise InvalidSpec("planted sets cover the whole audio vocabulary")
    # class markers occupy the top of the text id range so noise text
    # (drawn from the full range) can still collide with them
    markers = {
        c: tuple(range(spec.n_text - (c + 1) * spec.text_markers_per_class,
                       spec.n_text - c * spec.text_markers_per_class))
        for c in range(spec.n_classes)
    }
    prior = np.asarray(spec.prior, dtype=np.float64)
    records: List[UtteranceRecord] = []
    labels = rng.choice(spec.n_classes, size=spec.n_samples, p=prior)
    split_bounds = np.cumsum(
        np.asarray(spec.split_fractions[:2]) * spec.n_samples).astype(np.int64)
    for i in range(spec.n_samples):
        y = int(labels[i])
        n_noise_text = max(1, int(rng.poisson(spec.mean_text_len)))
        text = list(rng.integers(0, spec.n_text, size=n_noise_text))
        covered = (spec.text_coverage >= 1.0
                   or rng.random() < spec.text_coverage)
        for c in range(spec.n_classes):
            rate = (spec.text_signal if covered else 0.0) if c == y \
                else spec.text_leak
            if rate <= 0.0:
                continue  # zero-rate classes consume no rng draws
            for m in markers[c]:
                if rng.random() < rate:
                    text.append(m)
        n_noise_audio = int(rng.poisson(spec.mean_audio_len))
        audio = list(rng.choice(noise_pool, size=n_noise_audio))
        tell_ids, tell_rate = _draw_tell_tier(spec, y, rng)
        for pid in tell_ids:
            if rng.random() < tell_rate:
                audio.append(pid)
        rng.shuffle(text)
        rng.shuffle(audio)
        split = ("train" if i < split_bounds[0]
                 else "val" if i < split_bounds[1] else "test")
        records.append(UtteranceRecord(
            id=f"synth-{i:06d}", label=y, split=split,
            tokens=tuple(text), audio_tokens=tuple(audio)))
    splits: Dict[str, List[UtteranceRecord]] = {s: [] for s in SPLITS}
    for r in records:
        splits[r.split].append(r)
    meta = {
        "kind": "synthetic",
        "spec": _spec_to_jsonable(spec),
        "spec_hash": spec.spec_hash(),
        "planted": {str(c): list(ids) for c, ids in spec.planted.items()},
        "weak_planted": {str(c): [list(ids) for ids in groups]
                         for c, groups in spec.weak_planted.items()},
        "n_text": spec.n_text,
        "n_audio": spec.n_audio,
    }
    return CorpusBundle(splits=splits, meta=meta)


# --- JSONL persistence ----------------------------------------------------------


_RECORD_FIELDS = ("id", "text", "tokens", "audio_path", "grid_path",
                  "audio_tokens", "label", "split")


def _record_to_json(r: UtteranceRecord) -> str:
    payload = {"id": r.id, "label": r.label, "split": r.split}
    if r.text is not None:
        payload["text"] = r.text
    if r.tokens is not None:
        payload["tokens"] = list(r.tokens)
    if r.audio_path is not None:
        payload["audio_path"] = r.audio_path
    if r.grid_path is not None:
        payload["grid_path"] = r.grid_path
    if r.audio_tokens is not None:
        payload["audio_tokens"] = list(r.audio_tokens)
    return json.dumps(payload, sort_keys=True)


def save_corpus(bundle: CorpusBundle, path) -> None:
    """Write records as JSONL (train, val, test order) plus a meta sidecar."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for r in bundle.all_records():
            f.write(_record_to_json(r) + "\n")
    meta_path = path.with_name(path.name + ".meta.json")
    with meta_path.open("w", encoding="utf-8") as f:
        json.dump(bundle.meta, f, sort_keys=True, indent=2)
        f.write("\n")


def load_corpus(path, task: Task, tokenizer=None) -> CorpusBundle:
    """Parse a JSONL corpus; schema problems name the offending line.

    Records with raw text but no token ids are tokenized with
    ``tokenizer`` when one is given, else left untokenized.  Labels may be
    class indices or class names of ``task``.
    """
    path = Path(path)
    splits: Dict[str, List[UtteranceRecord]] = {s: [] for s in SPLITS}
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"line {lineno}: invalid JSON ({e})") from e
            if not isinstance(payload, dict):
                raise SchemaError(f"line {lineno}: record must be an object")
            for key in ("id", "label", "split"):
                if key not in payload:
                    raise SchemaError(f"line {lineno}: missing field {key!r}")
            unknown = set(payload) - set(_RECORD_FIELDS)
            if unknown:
                raise SchemaError(
                    f"line {lineno}: unknown fields {sorted(unknown)}")
            label = task.label_index(payload["label"])
            tokens = payload.get("tokens")
            text = payload.get("text")
            if tokens is None and text is not None and tokenizer is not None:
                tokens = tokenizer(text)
            if payload["split"] not in SPLITS:
                raise SchemaError(
                    f"line {lineno}: split {payload['split']!r} not in {SPLITS}")
            try:
                record = UtteranceRecord(
                    id=str(payload["id"]), label=label, split=payload["split"],
                    text=text,
                    tokens=tuple(tokens) if tokens is not None else None,
                    audio_path=payload.get("audio_path"),
                    grid_path=payload.get("grid_path"),
                    audio_tokens=(tuple(payload["audio_tokens"])
                                  if payload.get("audio_tokens") is not None
                                  else None),
                )
            except ValueError as e:
                raise SchemaError(f"line {lineno}: {e}") from e
            splits[record.split].append(record)
    meta_path = path.with_name(path.name + ".meta.json")
    meta: Dict = {}
    if meta_path.exists():
        with meta_path.open("r", encoding="utf-8") as f:
            meta = json.load(f)
    bundle = CorpusBundle(splits=splits, meta=meta)
    for split in SPLITS:
        counts = np.bincount(
            [r.label for r in bundle.splits[split]] or [0],
            minlength=task.n_classes)[:task.n_classes]
        logger.info("%s/%s: %d records, per-class %s",
                    path.name, split, len(bundle.splits[split]), counts.tolist())
    if task.n_classes == 2 and bundle.n_records:
        positive = sum(r.label == 1 for r in bundle.all_records())
        logger.info("positive ratio %.4f", positive / bundle.n_records)
    return bundle


# --- statistics -----------------------------------------------------------------


def corpus_stats(records: Sequence[UtteranceRecord],
                 selection=None, n_classes: Optional[int] = None) -> Dict:
    """Length, class-distribution, and (optionally) post-filter statistics.

    When ``selection`` is given, audio lengths are also reported after
    keeping only the selected ids.  Duration statistics appear when token
    grids are referenced (frames carry a fixed 20 ms hop).
    """
    from .selection import filter_tokens

    if not records:
        raise EmptyCorpus("no records to summarize")
    text_lens = [len(r.tokens) for r in records if r.tokens is not None]
    audio_lens = [len(r.audio_tokens) for r in records
                  if r.audio_tokens is not None]
    if n_classes is None:
        n_classes = max(r.label for r in records) + 1
    class_counts = np.bincount([r.label for r in records],
                               minlength=n_classes).tolist()
    stats: Dict = {
        "n_records": len(records),
        "class_counts": class_counts,
        "text_len_mean": float(np.mean(text_lens)) if text_lens else None,
        "text_len_median": float(np.median(text_lens)) if text_lens else None,
        "audio_len_mean": float(np.mean(audio_lens)) if audio_lens else None,
        "audio_len_median": float(np.median(audio_lens)) if audio_lens else None,
    }
    if selection is not None and audio_lens:
        filtered = [
            filter_tokens(np.asarray(r.audio_tokens, dtype=np.int64),
                          selection).size
            for r in records if r.audio_tokens is not None
        ]
        stats["audio_len_mean_filtered"] = float(np.mean(filtered))
        stats["audio_len_median_filtered"] = float(np.median(filtered))
    grid_paths = [r.grid_path for r in records if r.grid_path is not None]
    if grid_paths:
        from .rvq import FRAME_PERIOD_MS, load_grid
        durations = [
            load_grid(p).indices.shape[1] * FRAME_PERIOD_MS / 1000.0
            for p in grid_paths
        ]
        stats["audio_duration_mean_s"] = float(np.mean(durations))
        stats["audio_duration_total_s"] = float(np.sum(durations))
    return stats
