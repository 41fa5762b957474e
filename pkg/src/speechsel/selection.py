"""Multimodal vocabulary, bag-of-words features, and audio-token selection.

The selection stage turns paired token sequences (text ids plus flattened
audio grid ids) into one sparse count matrix over a joint vocabulary, fits
an L1-regularized classifier on it, and keeps the audio columns that carry
nonzero weight.  Lambda is tuned by bisection until the audio support size
lands within a tolerance band around a requested count.  A baseline picks
the same number of audio ids uniformly from the observed set instead.

Text columns enter the design matrix as ordinary penalized covariates so
the classifier can attribute semantic signal to them, but they are never
eligible for selection; only audio columns are filtered downstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import (
    CountExceedsVocab,
    IndexOutOfRange,
    TargetUnreachable,
    UnknownToken,
)
from .lasso import LassoModel, LassoProblem, fit, lambda_max


@dataclass(frozen=True)
class MultimodalVocab:
    """Joint id space: text ids [0, n_text), audio ids [audio_base, audio_base + n_audio).

    Columns of the count matrix are laid out text-first: audio id ``g`` maps
    to column ``n_text + (g - audio_base)``.  ``audio_base`` is nonzero when
    the leading grid layers were dropped before flattening.
    """

    n_text: int
    n_audio: int
    audio_base: int = 0

    def __post_init__(self):
        if self.n_text < 0:
            raise ValueError("n_text must be non-negative")
        if self.n_audio < 1:
            raise ValueError("need at least one audio id")
        if self.audio_base < 0:
            raise ValueError("audio_base must be non-negative")

    @classmethod
    def for_grid(cls, n_text: int, n_layers_kept: int, n_codewords: int,
                 layer_offset: int = 1) -> "MultimodalVocab":
        """Vocabulary covering a flattened token grid's id range."""
        return cls(
            n_text=n_text,
            n_audio=n_layers_kept * n_codewords,
            audio_base=(layer_offset - 1) * n_codewords,
        )

    @property
    def size(self) -> int:
        return self.n_text + self.n_audio

    def text_cols(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_text):
            bad = ids[(ids < 0) | (ids >= self.n_text)][0]
            raise UnknownToken(f"text id {bad} outside [0, {self.n_text})")
        return ids

    def audio_cols(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        lo, hi = self.audio_base, self.audio_base + self.n_audio
        if ids.size and (ids.min() < lo or ids.max() >= hi):
            bad = ids[(ids < lo) | (ids >= hi)][0]
            raise UnknownToken(f"audio id {bad} outside [{lo}, {hi})")
        return self.n_text + (ids - lo)

    def column_token(self, col: int) -> Tuple[str, int]:
        """Reverse map: column index -> ("text"|"audio", original id)."""
        if not 0 <= col < self.size:
            raise IndexOutOfRange(f"column {col} outside [0, {self.size})")
        if col < self.n_text:
            return ("text", col)
        return ("audio", self.audio_base + (col - self.n_text))

    def column_kinds(self) -> np.ndarray:
        return np.array(["text"] * self.n_text + ["audio"] * self.n_audio)


@dataclass
class BowMatrix:
    """Sparse sample-by-vocabulary count matrix with its column layout."""

    x: sp.csr_matrix
    vocab: MultimodalVocab

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    def audio_column_mask(self) -> np.ndarray:
        mask = np.zeros(self.vocab.size, dtype=bool)
        mask[self.vocab.n_text:] = True
        return mask

    def observed_audio_ids(self) -> np.ndarray:
        """Distinct audio ids that occur at least once in the corpus."""
        counts = np.asarray(self.x.sum(axis=0)).ravel()
        cols = np.nonzero(counts[self.vocab.n_text:] > 0)[0]
        return self.vocab.audio_base + cols


def build_bow(samples: Sequence[Tuple[Sequence[int], Sequence[int]]],
              vocab: MultimodalVocab) -> BowMatrix:
    """Count matrix: entry (i, j) = occurrences of column j's token in sample i.

    ``samples`` is a sequence of (text_ids, audio_ids) pairs; empty
    sequences produce all-zero rows.
    """
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    for i, (text_ids, audio_ids) in enumerate(samples):
        c_text = vocab.text_cols(np.asarray(text_ids, dtype=np.int64))
        c_audio = vocab.audio_cols(np.asarray(audio_ids, dtype=np.int64))
        c = np.concatenate([c_text, c_audio])
        rows.append(np.full(c.size, i, dtype=np.int64))
        cols.append(c)
    n = len(samples)
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:
        r = np.empty(0, dtype=np.int64)
        c = np.empty(0, dtype=np.int64)
    data = np.ones(r.size, dtype=np.int64)
    # coo -> csr sums duplicate (row, col) entries, which is exactly counting
    x = sp.coo_matrix((data, (r, c)), shape=(n, vocab.size)).tocsr()
    return BowMatrix(x=x, vocab=vocab)


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of one selection run: which audio ids to keep.

    ``counts`` reports, per class row of the fitted model, how many of the
    selected audio columns carry nonzero weight (class 0 is the pinned
    reference row and always reports zero).  Random selections have no
    model, so ``lam`` is None and ``counts`` is empty.
    """

    method: str
    selected_ids: np.ndarray
    counts: Dict[int, int] = field(default_factory=dict)
    lam: Optional[float] = None

    def __post_init__(self):
        ids = np.sort(np.asarray(self.selected_ids, dtype=np.int64))
        object.__setattr__(self, "selected_ids", ids)

    @property
    def n_selected(self) -> int:
        return int(self.selected_ids.size)

    def to_json(self) -> str:
        payload = {
            "method": self.method,
            "selected_ids": [int(i) for i in self.selected_ids],
            "counts": {str(k): int(v) for k, v in sorted(self.counts.items())},
        }
        if self.lam is not None:
            payload["lambda"] = float(self.lam)
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SelectionResult":
        payload = json.loads(text)
        return cls(
            method=payload["method"],
            selected_ids=np.asarray(payload["selected_ids"], dtype=np.int64),
            counts={int(k): int(v) for k, v in payload.get("counts", {}).items()},
            lam=payload.get("lambda"),
        )


def audio_support_at(bow: BowMatrix, labels: np.ndarray, lam: float,
                     n_classes: Optional[int] = None, tol: float = 1e-8,
                     max_iter: int = 5000,
                     init: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                     ) -> Tuple[np.ndarray, LassoModel]:
    """Fit at one lambda; return (selected audio global ids, model)."""
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    problem = LassoProblem(x=bow.x, y=labels, n_classes=n_classes, lam=float(lam))
    model = fit(problem, tol=tol, max_iter=max_iter, init=init)
    cols = model.support()
    audio_cols = cols[cols >= bow.vocab.n_text]
    ids = bow.vocab.audio_base + (audio_cols - bow.vocab.n_text)
    return ids, model


def select_tokens_l1(bow: BowMatrix, labels: np.ndarray, target_count: int,
                     n_classes: Optional[int] = None, tol: float = 1e-8,
                     max_iter: int = 5000, band: float = 0.1,
                     max_bisect: int = 30) -> SelectionResult:
    """Pick audio tokens by bisecting lambda until the L1 support matches.

    Bisection runs on log lambda between the full-shrinkage point and a
    floor six decades below it (extended three more decades if the floor
    still selects too few), and accepts any support size within
    ``band`` (relative) of ``target_count``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if not 0 < target_count <= bow.vocab.n_audio:
        raise ValueError(
            f"target_count {target_count} outside (0, {bow.vocab.n_audio}]")

    def in_band(s: int) -> bool:
        return abs(s - target_count) <= band * target_count

    def result_from(ids: np.ndarray, model: LassoModel, lam: float) -> SelectionResult:
        sel_cols = bow.vocab.n_text + (ids - bow.vocab.audio_base)
        counts = {
            c: int(np.count_nonzero(model.weights[c, sel_cols]))
            for c in range(model.weights.shape[0])
        }
        return SelectionResult(method="lasso", selected_ids=ids,
                               counts=counts, lam=float(lam))

    probe = LassoProblem(x=bow.x, y=labels, n_classes=n_classes, lam=1.0)
    hi = lambda_max(probe)
    init = None

    def support(lam: float):
        nonlocal init
        ids, model = audio_support_at(bow, labels, lam, n_classes=n_classes,
                                      tol=tol, max_iter=max_iter, init=init)
        init = (model.weights, model.intercepts)
        return ids, model

    lo = hi * 1e-6
    ids_lo, model_lo = support(lo)
    for _ in range(3):
        if ids_lo.size >= target_count * (1.0 - band):
            break
        lo /= 10.0
        ids_lo, model_lo = support(lo)
    if ids_lo.size < target_count * (1.0 - band):
        raise TargetUnreachable(
            f"only {ids_lo.size} audio tokens attainable, "
            f"target {target_count} (band {band:.0%})")
    if in_band(ids_lo.size):
        return result_from(ids_lo, model_lo, lo)

    # invariant: support(lo) above the band, support(hi) = 0 below it
    for _ in range(max_bisect):
        mid = math.sqrt(lo * hi)
        ids_mid, model_mid = support(mid)
        if in_band(ids_mid.size):
            return result_from(ids_mid, model_mid, mid)
        if ids_mid.size > target_count:
            lo = mid
        else:
            hi = mid
    raise TargetUnreachable(
        f"no lambda within {band:.0%} of {target_count} "
        f"after {max_bisect} bisection steps")


def select_tokens_random(observed_ids: Iterable[int], count: int,
                         seed: int) -> SelectionResult:
    """Uniform sample without replacement from the observed audio ids."""
    ids = np.unique(np.asarray(list(observed_ids), dtype=np.int64))
    if count > ids.size:
        raise CountExceedsVocab(
            f"requested {count} of {ids.size} observed audio tokens")
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(ids, size=count, replace=False)
    return SelectionResult(method="random", selected_ids=chosen)


def filter_tokens(sequence: Sequence[int], selection: SelectionResult) -> np.ndarray:
    """Keep only selected ids, preserving order (may return empty)."""
    seq = np.asarray(sequence, dtype=np.int64)
    return seq[np.isin(seq, selection.selected_ids)]
