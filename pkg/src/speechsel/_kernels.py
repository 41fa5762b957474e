"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

Two loops dominate runtime: nearest-codeword search (tokenizer training and
encoding) and causal attention (every LM forward/backward). Each has a
numba ``@njit`` kernel and a vectorized numpy fallback with the same
signature. Selection happens once at import time: set ``SPEECHSEL_NUMBA=0``
to force the numpy path; otherwise numba is used when importable.

Both paths are deterministic run-to-run. They agree up to float rounding,
not bit-exactly, so artifact hashes are only comparable within one backend.
"""

from __future__ import annotations

import math
import os

import numpy as np

_want_numba = os.environ.get("SPEECHSEL_NUMBA", "1").lower() not in ("0", "false", "no")

try:
    if not _want_numba:
        raise ImportError("numba disabled via SPEECHSEL_NUMBA")
    from numba import njit

    _HAS_NUMBA = True
except ImportError:
    _HAS_NUMBA = False

    def njit(*args, **kwargs):  # no-op decorator so the jitted defs still parse
        def wrap(func):
            return func

        if args and callable(args[0]):
            return args[0]
        return wrap


BACKEND = "numba" if _HAS_NUMBA else "numpy"


# --- nearest codeword --------------------------------------------------------

@njit(cache=True)
def _nearest_codeword_nb(x, codebook):
    n, d = x.shape
    v = codebook.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=x.dtype)
    for i in range(n):
        best = -1
        best_d = np.inf
        for j in range(v):
            acc = 0.0
            for k in range(d):
                diff = x[i, k] - codebook[j, k]
                acc += diff * diff
            if acc < best_d:  # strict: ties keep the lowest index
                best_d = acc
                best = j
        idx[i] = best
        dist[i] = best_d
    return idx, dist


def _nearest_codeword_np(x, codebook):
    n, d = x.shape
    v = codebook.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=x.dtype)
    # chunk frames so the (chunk, V, d) difference tensor stays small
    chunk = max(1, 4_000_000 // max(v * d, 1))
    for s in range(0, n, chunk):
        diff = x[s:s + chunk, None, :] - codebook[None, :, :]
        d2 = np.einsum("nvd,nvd->nv", diff, diff)
        best = np.argmin(d2, axis=1)  # argmin takes the first (lowest) index
        idx[s:s + chunk] = best
        dist[s:s + chunk] = d2[np.arange(d2.shape[0]), best]
    return idx, dist


def nearest_codeword(x: np.ndarray, codebook: np.ndarray):
    """Squared-distance nearest codeword per row of ``x``.

    Returns ``(indices, squared_distances)``; ties resolve to the lowest
    codeword index on both backends.
    """
    x = np.ascontiguousarray(x)
    codebook = np.ascontiguousarray(codebook)
    if _HAS_NUMBA:
        return _nearest_codeword_nb(x, codebook)
    return _nearest_codeword_np(x, codebook)


# --- causal attention --------------------------------------------------------
#
# q, k, v: (B, H, T, hd). Scores are scaled by 1/sqrt(hd), masked to j <= t,
# softmaxed in float64 and cast back to the input dtype. Padding positions
# need no mask: with a causal mask a padded key (at the tail) can never be
# attended to by a real query, and padded query rows receive zero gradient.

@njit(cache=True)
def _attn_fwd_nb(q, k, v):
    b_n, h_n, t_n, hd = q.shape
    scale = 1.0 / math.sqrt(hd)
    out = np.zeros_like(q)
    w = np.zeros((b_n, h_n, t_n, t_n), dtype=q.dtype)
    scores = np.empty(t_n, dtype=np.float64)
    for b in range(b_n):
        for h in range(h_n):
            for t in range(t_n):
                m = -np.inf
                for j in range(t + 1):
                    acc = 0.0
                    for c in range(hd):
                        acc += q[b, h, t, c] * k[b, h, j, c]
                    acc *= scale
                    scores[j] = acc
                    if acc > m:
                        m = acc
                z = 0.0
                for j in range(t + 1):
                    e = math.exp(scores[j] - m)
                    scores[j] = e
                    z += e
                for j in range(t + 1):
                    wt = scores[j] / z
                    w[b, h, t, j] = wt
                    for c in range(hd):
                        out[b, h, t, c] += wt * v[b, h, j, c]
    return out, w


def _attn_fwd_np(q, k, v):
    t_n = q.shape[2]
    hd = q.shape[3]
    scale = 1.0 / math.sqrt(hd)
    scores = np.einsum("bhtc,bhjc->bhtj", q, k).astype(np.float64) * scale
    causal = np.tril(np.ones((t_n, t_n), dtype=bool))
    scores = np.where(causal[None, None], scores, -np.inf)
    scores -= scores.max(axis=3, keepdims=True)
    e = np.exp(scores)
    w = (e / e.sum(axis=3, keepdims=True)).astype(q.dtype)
    out = np.einsum("bhtj,bhjc->bhtc", w, v)
    return out, w


@njit(cache=True)
def _attn_bwd_nb(g_out, q, k, v, w):
    b_n, h_n, t_n, hd = q.shape
    scale = 1.0 / math.sqrt(hd)
    gq = np.zeros_like(q)
    gk = np.zeros_like(k)
    gv = np.zeros_like(v)
    gw = np.empty(t_n, dtype=np.float64)
    for b in range(b_n):
        for h in range(h_n):
            for t in range(t_n):
                row_dot = 0.0
                for j in range(t + 1):
                    acc = 0.0
                    for c in range(hd):
                        acc += g_out[b, h, t, c] * v[b, h, j, c]
                        gv[b, h, j, c] += w[b, h, t, j] * g_out[b, h, t, c]
                    gw[j] = acc
                    row_dot += acc * w[b, h, t, j]
                for j in range(t + 1):
                    gs = w[b, h, t, j] * (gw[j] - row_dot) * scale
                    for c in range(hd):
                        gq[b, h, t, c] += gs * k[b, h, j, c]
                        gk[b, h, j, c] += gs * q[b, h, t, c]
    return gq, gk, gv


def _attn_bwd_np(g_out, q, k, v, w):
    hd = q.shape[3]
    scale = 1.0 / math.sqrt(hd)
    gv = np.einsum("bhtj,bhtc->bhjc", w, g_out)
    gw = np.einsum("bhtc,bhjc->bhtj", g_out, v)
    row_dot = np.einsum("bhtj,bhtj->bht", gw, w)
    gs = w * (gw - row_dot[..., None]) * np.asarray(scale, dtype=q.dtype)
    gq = np.einsum("bhtj,bhjc->bhtc", gs, k)
    gk = np.einsum("bhtj,bhtc->bhjc", gs, q)
    return gq, gk, gv


def attn_fwd(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Causal scaled-dot attention. Returns ``(out, weights)``."""
    if _HAS_NUMBA:
        return _attn_fwd_nb(
            np.ascontiguousarray(q), np.ascontiguousarray(k), np.ascontiguousarray(v)
        )
    return _attn_fwd_np(q, k, v)


def attn_bwd(g_out: np.ndarray, q: np.ndarray, k: np.ndarray, v: np.ndarray, w: np.ndarray):
    """Backward of :func:`attn_fwd`. Returns ``(grad_q, grad_k, grad_v)``."""
    if _HAS_NUMBA:
        return _attn_bwd_nb(
            np.ascontiguousarray(g_out),
            np.ascontiguousarray(q),
            np.ascontiguousarray(k),
            np.ascontiguousarray(v),
            np.ascontiguousarray(w),
        )
    return _attn_bwd_np(g_out, q, k, v, w)


def verify_jit() -> bool:
    """Force-compile the jitted kernels and confirm signatures registered."""
    if not _HAS_NUMBA:
        return False
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3)).astype(np.float64)
    cb = rng.normal(size=(5, 3)).astype(np.float64)
    _nearest_codeword_nb(x, cb)
    q = rng.normal(size=(1, 1, 4, 2)).astype(np.float64)
    out, w = _attn_fwd_nb(q, q, q)
    _attn_bwd_nb(q, q, q, q, w)
    return all(
        len(f.signatures) > 0
        for f in (_nearest_codeword_nb, _attn_fwd_nb, _attn_bwd_nb)
    )
