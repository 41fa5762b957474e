"""Residual vector quantization of audio frames at desk scale.

A waveform becomes one feature frame per 20 ms hop; L stacked codebooks
quantize the frames layer by layer, each layer coding the residual left by
the previous one. Layer 1 plays the semantic role and can be dropped before
flattening a grid into a single time-major token stream with globally
unique ids: token (layer, index) maps to (layer - 1) * V + index.

Desk-scale codebooks reserve codeword V-1 of every layer as an exact zero
vector, which makes per-frame residual norms non-increasing across layers
(choosing the zero word keeps the residual unchanged; anything else was
strictly closer).
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from ._kernels import nearest_codeword
from .errors import (
    AlreadyFiltered,
    DimensionMismatch,
    EmptyWaveform,
    IndexOutOfRange,
    InsufficientData,
    SingleLayerGrid,
)

logger = logging.getLogger(__name__)

FRAME_PERIOD_MS = 20.0

CODEBOOK_MAGIC = b"RVQC"
GRID_MAGIC = b"TGRD"
FORMAT_VERSION = 1


@dataclass
class FrameSeq:
    """Feature frames for one utterance, (T, d) float32."""

    frames: np.ndarray
    frame_period_ms: float = FRAME_PERIOD_MS

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class CodebookSet:
    """Stacked codebooks, (L, V, d) float32."""

    codewords: np.ndarray
    trained: bool = True

    @property
    def n_layers(self) -> int:
        return self.codewords.shape[0]

    @property
    def n_codewords(self) -> int:
        return self.codewords.shape[1]

    @property
    def dim(self) -> int:
        return self.codewords.shape[2]


@dataclass
class TokenGrid:
    """Per-layer token indices for one utterance, (L_kept, T) uint32.

    ``layer_offset`` is the 1-based codebook layer of row 0; a freshly
    encoded grid has offset 1, a semantically filtered one has offset 2.
    """

    indices: np.ndarray
    n_codewords: int
    layer_offset: int = 1

    @property
    def n_kept_layers(self) -> int:
        return self.indices.shape[0]

    @property
    def n_frames(self) -> int:
        return self.indices.shape[1]


def frame_features(
    waveform: np.ndarray,
    sample_rate: int,
    n_bands: int = 16,
    frame_period_ms: float = FRAME_PERIOD_MS,
) -> FrameSeq:
    """Window the waveform into hop-spaced frames of log band energies.

    T = ceil(duration / hop); the final frame is zero-padded. An all-zero
    waveform yields identical frames (every band clamps to the log floor).
    """
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if waveform.size == 0:
        raise EmptyWaveform("waveform has no samples")
    hop_exact = sample_rate * frame_period_ms / 1000.0
    n_frames = max(1, math.ceil(waveform.size / hop_exact - 1e-9))
    win = max(2, int(round(2.0 * hop_exact)))
    window = np.hanning(win)
    n_bins = win // 2 + 1
    band_edges = np.linspace(0, n_bins, n_bands + 1).astype(int)
    feats = np.empty((n_frames, n_bands), dtype=np.float32)
    floor = 1e-10
    for t in range(n_frames):
        start = int(round(t * hop_exact))
        seg = waveform[start:start + win]
        if seg.size < win:
            seg = np.concatenate([seg, np.zeros(win - seg.size)])
        spec = np.abs(np.fft.rfft(seg * window)) ** 2
        for b in range(n_bands):
            lo, hi = band_edges[b], band_edges[b + 1]
            e = spec[lo:hi].sum() if hi > lo else 0.0
            feats[t, b] = np.log(e + floor)
    return FrameSeq(feats, frame_period_ms)


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: distance-weighted sampling of initial centroids."""
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]), dtype=data.dtype)
    first = int(rng.integers(0, n))
    centroids[0] = data[first]
    d2 = ((data - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all points coincide with chosen centroids; fall back to uniform
            pick = int(rng.integers(0, n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centroids[j] = data[pick]
        d2 = np.minimum(d2, ((data - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _kmeans(
    data: np.ndarray, k: int, rng: np.random.Generator, epochs: int
) -> np.ndarray:
    """Plain k-means with k-means++ init and dead-codeword reseeding.

    Dead centroids are reseeded to the points currently farthest from their
    assigned centroid, largest first, which keeps every codeword live."""
    centroids = _kmeans_pp_init(data, k, rng)
    for _ in range(epochs):
        idx, d2 = nearest_codeword(data, centroids)
        counts = np.bincount(idx, minlength=k)
        sums = np.zeros_like(centroids, dtype=np.float64)
        np.add.at(sums, idx, data)
        live = counts > 0
        centroids[live] = (sums[live] / counts[live, None]).astype(centroids.dtype)
        dead = np.nonzero(~live)[0]
        if dead.size:
            order = np.argsort(-d2, kind="stable")
            centroids[dead] = data[order[: dead.size]]
    return centroids


def train_codebooks(
    frames: np.ndarray,
    n_layers: int = 8,
    n_codewords: int = 64,
    seed: int = 0,
    epochs: int = 20,
    reserve_zero: bool = True,
) -> CodebookSet:
    """Residual k-means: layer l clusters the residuals left by layers < l.

    With ``reserve_zero`` the last codeword of every layer is pinned to the
    zero vector and k-means trains the remaining V-1.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise DimensionMismatch(f"frame corpus must be 2-D, got shape {frames.shape}")
    n, d = frames.shape
    if n < n_codewords:
        raise InsufficientData(
            f"{n} frames cannot train {n_codewords} codewords"
        )
    rng = np.random.default_rng(seed)
    k_train = n_codewords - 1 if reserve_zero else n_codewords
    residual = frames.astype(np.float32).copy()
    books = np.zeros((n_layers, n_codewords, d), dtype=np.float32)
    for layer in range(n_layers):
        if k_train > 0:
            books[layer, :k_train] = _kmeans(residual, k_train, rng, epochs)
        # reserved zero codeword (if any) is already zero
        idx, _ = nearest_codeword(residual, books[layer])
        residual -= books[layer][idx]
        logger.debug("layer %d trained, mean residual norm %.4f",
                     layer + 1, float(np.sqrt((residual ** 2).sum(axis=1)).mean()))
    return CodebookSet(books, trained=True)


def encode(frame_seq: FrameSeq, codebooks: CodebookSet) -> TokenGrid:
    """Greedy layer-by-layer quantization; ties pick the lowest index."""
    frames = frame_seq.frames
    if frames.shape[1] != codebooks.dim:
        raise DimensionMismatch(
            f"frame dim {frames.shape[1]} != codebook dim {codebooks.dim}"
        )
    if not codebooks.trained:
        raise ValueError("codebooks are not trained")
    t_n = frames.shape[0]
    grid = np.empty((codebooks.n_layers, t_n), dtype=np.uint32)
    residual = frames.astype(np.float32).copy()
    for layer in range(codebooks.n_layers):
        idx, _ = nearest_codeword(residual, codebooks.codewords[layer])
        grid[layer] = idx.astype(np.uint32)
        residual -= codebooks.codewords[layer][idx]
    return TokenGrid(grid, n_codewords=codebooks.n_codewords, layer_offset=1)


def encode_residuals(frame_seq: FrameSeq, codebooks: CodebookSet) -> np.ndarray:
    """Per-frame residual L2 norms after each layer, (L + 1, T); row 0 is
    the raw frame norm.

    Norms come from the same distance kernel the encoder uses, so with a
    reserved zero codeword the rows are non-increasing exactly: the distance
    to the chosen codeword at layer l equals the distance of the next
    residual to the zero vector, term for term.
    """
    frames = frame_seq.frames
    if frames.shape[1] != codebooks.dim:
        raise DimensionMismatch(
            f"frame dim {frames.shape[1]} != codebook dim {codebooks.dim}"
        )
    residual = frames.astype(np.float32).copy()
    zero = np.zeros((1, frames.shape[1]), dtype=np.float32)
    _, d0 = nearest_codeword(residual, zero)
    norms = [np.sqrt(d0.astype(np.float64))]
    for layer in range(codebooks.n_layers):
        idx, d2 = nearest_codeword(residual, codebooks.codewords[layer])
        residual -= codebooks.codewords[layer][idx]
        norms.append(np.sqrt(d2.astype(np.float64)))
    return np.stack(norms)


def decode(grid: TokenGrid, codebooks: CodebookSet) -> FrameSeq:
    """Sum the selected codewords of the kept layers per frame."""
    last_layer = grid.layer_offset - 1 + grid.n_kept_layers
    if grid.layer_offset < 1 or last_layer > codebooks.n_layers:
        raise IndexOutOfRange(
            f"grid layers [{grid.layer_offset}, {last_layer}] exceed "
            f"codebook layers [1, {codebooks.n_layers}]"
        )
    if grid.indices.size and grid.indices.max() >= codebooks.n_codewords:
        raise IndexOutOfRange(
            f"token index {int(grid.indices.max())} >= V={codebooks.n_codewords}"
        )
    out = np.zeros((grid.n_frames, codebooks.dim), dtype=np.float32)
    for row in range(grid.n_kept_layers):
        layer = grid.layer_offset - 1 + row
        out += codebooks.codewords[layer][grid.indices[row]]
    return FrameSeq(out)


def drop_semantic_layer(grid: TokenGrid) -> TokenGrid:
    """Remove layer 1 (the semantic layer), keeping acoustic layers 2..L."""
    if grid.layer_offset != 1:
        raise AlreadyFiltered(
            f"grid already starts at layer {grid.layer_offset}"
        )
    if grid.n_kept_layers < 2:
        raise SingleLayerGrid("cannot drop the only layer of a 1-layer grid")
    return TokenGrid(grid.indices[1:].copy(), n_codewords=grid.n_codewords, layer_offset=2)


def flatten_grid(grid: TokenGrid, codebooks: Optional[CodebookSet] = None) -> np.ndarray:
    """Time-major flattening into global ids (layer - 1) * V + index.

    Frame t contributes its kept layers in order before frame t+1 starts.
    """
    v = grid.n_codewords
    if codebooks is not None:
        if codebooks.n_codewords != v:
            raise DimensionMismatch(
                f"grid V={v} != codebook V={codebooks.n_codewords}"
            )
        last_layer = grid.layer_offset - 1 + grid.n_kept_layers
        if last_layer > codebooks.n_layers:
            raise IndexOutOfRange(
                f"grid layers exceed codebook layers ({last_layer} > {codebooks.n_layers})"
            )
    layers = grid.layer_offset - 1 + np.arange(grid.n_kept_layers, dtype=np.int64)
    offsets = layers * v
    global_ids = grid.indices.astype(np.int64) + offsets[:, None]
    return global_ids.T.reshape(-1)


# --- binary file formats -------------------------------------------------------

def save_codebooks(path, codebooks: CodebookSet) -> None:
    """RVQC v1: magic, version, L, V, d as little-endian u32, then the
    (L, V, d) float32 codewords row-major."""
    header = struct.pack(
        "<4sIIII",
        CODEBOOK_MAGIC,
        FORMAT_VERSION,
        codebooks.n_layers,
        codebooks.n_codewords,
        codebooks.dim,
    )
    data = np.ascontiguousarray(codebooks.codewords, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def load_codebooks(path) -> CodebookSet:
    with open(path, "rb") as fh:
        header = fh.read(20)
        if len(header) < 20:
            raise ValueError(f"{path}: truncated codebook header")
        magic, version, n_layers, n_codewords, dim = struct.unpack("<4sIIII", header)
        if magic != CODEBOOK_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported codebook version {version}")
        n = n_layers * n_codewords * dim
        raw = fh.read(4 * n)
        if len(raw) != 4 * n:
            raise ValueError(f"{path}: truncated codebook data")
        codewords = np.frombuffer(raw, dtype="<f4").reshape(n_layers, n_codewords, dim)
    return CodebookSet(codewords.astype(np.float32), trained=True)


def save_grid(path, grid: TokenGrid) -> None:
    """TGRD v1: magic, version, L_kept, layer_offset, V, T as little-endian
    u32, then the (L_kept, T) uint32 indices row-major."""
    header = struct.pack(
        "<4sIIIII",
        GRID_MAGIC,
        FORMAT_VERSION,
        grid.n_kept_layers,
        grid.layer_offset,
        grid.n_codewords,
        grid.n_frames,
    )
    data = np.ascontiguousarray(grid.indices, dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def load_grid(path) -> TokenGrid:
    with open(path, "rb") as fh:
        header = fh.read(24)
        if len(header) < 24:
            raise ValueError(f"{path}: truncated grid header")
        magic, version, l_kept, layer_offset, v, t_n = struct.unpack("<4sIIIII", header)
        if magic != GRID_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {GRID_MAGIC!r}")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported grid version {version}")
        n = l_kept * t_n
        raw = fh.read(4 * n)
        if len(raw) != 4 * n:
            raise ValueError(f"{path}: truncated grid data")
        indices = np.frombuffer(raw, dtype="<u4").reshape(l_kept, t_n)
    return TokenGrid(indices.astype(np.uint32), n_codewords=v, layer_offset=layer_offset)
