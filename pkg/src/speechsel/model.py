"""Decoder-only causal LM over a fused text+audio id space.

Id space layout: text ids [0, n_text), audio ids [n_text, n_text+n_audio),
then three specials (SEP, CLS, PAD).  Text rows and the three special rows
live in one embedding table, audio rows in a separate table, so freezing
"everything but the audio embeddings" is a per-tensor operation rather
than a row mask.

The network is a prenorm transformer: rmsnorm (no gains) -> causal
attention -> residual, rmsnorm -> squared-relu MLP -> residual, with an
untied output projection and no final norm.  Forward and backward are
written out by hand over numpy, with the attention inner loops delegated
to the compiled kernels.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from ._kernels import attn_bwd, attn_fwd
from .errors import (
    ContextOverflow,
    DimensionMismatch,
    EmptyText,
    IndexOutOfRange,
    MissingHead,
    NoAudioPositions,
    UnknownTarget,
)
from .numerics import ParamStore, log_softmax, softmax

logger = logging.getLogger("speechsel.model")

CHECKPOINT_MAGIC = b"SPTK"
CHECKPOINT_VERSION = 1

KIND_TEXT, KIND_SEP, KIND_AUDIO, KIND_CLS = 0, 1, 2, 3

_RMS_EPS = 1e-6


@dataclass(frozen=True)
class LmConfig:
    """Model shape plus the fused id-space layout derived from it."""

    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context: int = 512
    n_text: int = 300
    n_audio: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.d_model, self.n_layers, self.n_heads, self.context) < 1:
            raise ValueError("model dimensions must be positive")
        if self.n_text < 1:
            raise ValueError("need a text vocabulary")
        if self.n_audio < 0:
            raise ValueError("n_audio must be non-negative")

    # specials sit immediately after both vocab ranges
    @property
    def sep_id(self) -> int:
        return self.n_text + self.n_audio

    @property
    def cls_id(self) -> int:
        return self.n_text + self.n_audio + 1

    @property
    def pad_id(self) -> int:
        return self.n_text + self.n_audio + 2

    @property
    def vocab_size(self) -> int:
        return self.n_text + self.n_audio + 3

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> Dict:
        return {
            "d_model": self.d_model, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "context": self.context,
            "n_text": self.n_text, "n_audio": self.n_audio, "seed": self.seed,
        }


@dataclass
class FusedSequence:
    """[text..., SEP, audio..., CLS] with per-position kind labels."""

    ids: np.ndarray
    kinds: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.kinds = np.asarray(self.kinds, dtype=np.int64)
        if self.ids.shape != self.kinds.shape:
            raise ValueError("ids and kinds must have equal length")
        if np.count_nonzero(self.kinds == KIND_SEP) != 1:
            raise ValueError("exactly one SEP required")
        if np.count_nonzero(self.kinds == KIND_CLS) != 1:
            raise ValueError("exactly one CLS required")

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def n_audio_positions(self) -> int:
        return int(np.count_nonzero(self.kinds == KIND_AUDIO))


def build_fused_sequence(text_ids: Sequence[int], audio_ids: Sequence[int],
                         config: LmConfig,
                         label: Optional[int] = None) -> FusedSequence:
    """Lay out [text, SEP, audio, CLS], truncating audio tail then text tail.

    Audio ids must already be in the model's dense audio range.
    """
    text = np.asarray(text_ids, dtype=np.int64)
    audio = np.asarray(audio_ids, dtype=np.int64)
    if text.size == 0:
        raise EmptyText("fused sequence needs at least one text token")
    max_body = config.context - 2  # room for SEP and CLS
    if text.size + audio.size > max_body:
        keep_audio = max(0, max_body - int(text.size))
        if keep_audio < audio.size:
            logger.debug("truncating audio %d -> %d", audio.size, keep_audio)
            audio = audio[:keep_audio]
        if text.size > max_body:
            logger.debug("truncating text %d -> %d", text.size, max_body)
            text = text[:max_body]
    ids = np.concatenate([
        text, [config.sep_id], audio, [config.cls_id]]).astype(np.int64)
    kinds = np.concatenate([
        np.full(text.size, KIND_TEXT),
        [KIND_SEP],
        np.full(audio.size, KIND_AUDIO),
        [KIND_CLS],
    ]).astype(np.int64)
    return FusedSequence(ids=ids, kinds=kinds, label=label)


# --- parameters -----------------------------------------------------------------


def init_params(config: LmConfig, dtype=np.float32) -> ParamStore:
    """Gaussian init (sigma 0.02) with zeroed residual-write projections."""
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    d, h = config.d_model, 4 * config.d_model

    def gauss(shape):
        return rng.normal(0.0, 0.02, size=shape).astype(dtype)

    # text table carries the three special rows at the end
    store.add("emb_text", gauss((config.n_text + 3, d)))
    if config.n_audio > 0:
        store.add("emb_audio", gauss((config.n_audio, d)))
    for l in range(config.n_layers):
        store.add(f"blocks.{l}.wq", gauss((d, d)))
        store.add(f"blocks.{l}.wk", gauss((d, d)))
        store.add(f"blocks.{l}.wv", gauss((d, d)))
        store.add(f"blocks.{l}.wo", np.zeros((d, d), dtype=dtype))
        store.add(f"blocks.{l}.fc1", gauss((d, h)))
        store.add(f"blocks.{l}.fc2", np.zeros((h, d), dtype=dtype))
    store.add("lm_head", gauss((config.vocab_size, d)))
    return store


def extend_audio_vocab(params: ParamStore, config: LmConfig, n_audio: int,
                       seed: int = 0) -> Tuple[ParamStore, LmConfig]:
    """Grow a text-only model with fresh audio rows.

    New embedding rows start at the mean text embedding plus sigma-0.02
    noise; the output projection gets matching new rows built the same way
    from its text rows.  Existing tensors are carried over unchanged.
    """
    if config.n_audio != 0:
        raise ValueError("model already has an audio vocabulary")
    if n_audio < 1:
        raise ValueError("need at least one audio token")
    new_cfg = replace(config, n_audio=n_audio)
    rng = np.random.default_rng(seed)
    out = ParamStore()
    emb_text = params["emb_text"]
    dtype = emb_text.dtype
    mean_emb = emb_text[:config.n_text].mean(axis=0)
    emb_audio = (mean_emb + rng.normal(0.0, 0.02, size=(n_audio, config.d_model))
                 ).astype(dtype)
    old_head = params["lm_head"]
    mean_head = old_head[:config.n_text].mean(axis=0)
    audio_head = (mean_head + rng.normal(0.0, 0.02,
                                         size=(n_audio, config.d_model))
                  ).astype(dtype)
    # id layout puts audio between text and specials, so head rows move too
    new_head = np.concatenate([
        old_head[:config.n_text], audio_head, old_head[config.n_text:]])
    for name in params.names():
        if name == "lm_head":
            out.add("lm_head", new_head.copy())
        else:
            out.add(name, params[name].copy())
    out.add("emb_audio", emb_audio)
    return out, new_cfg


# --- LoRA and classifier head ----------------------------------------------------


@dataclass
class LoraAdapter:
    """Low-rank delta on one linear weight: effective W + (alpha/r) * (B A)^T.

    Weights here follow the x @ W convention with W of shape (d_in, d_out);
    A is (r, d_in), B is (d_out, r), and B starts at zero so attachment is
    an exact identity.
    """

    target: str
    a: np.ndarray
    b: np.ndarray
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.b @ self.a).T

    def param_count(self) -> int:
        return self.a.size + self.b.size


def attach_lora(params: ParamStore, targets: Sequence[str], rank: int = 8,
                alpha: float = 16.0, seed: int = 0,
                dtype=None) -> Dict[str, LoraAdapter]:
    """One adapter per target weight name; A gaussian (sigma 0.02), B zero."""
    rng = np.random.default_rng(seed)
    adapters: Dict[str, LoraAdapter] = {}
    for target in targets:
        if target not in params:
            raise UnknownTarget(f"no parameter named {target!r}")
        w = params[target]
        dt = dtype or w.dtype
        d_in, d_out = w.shape
        adapters[target] = LoraAdapter(
            target=target,
            a=rng.normal(0.0, 0.02, size=(rank, d_in)).astype(dt),
            b=np.zeros((d_out, rank), dtype=dt),
            rank=rank, alpha=alpha)
    return adapters


def default_lora_targets(config: LmConfig) -> List[str]:
    """Query and value projections of every attention block."""
    names = []
    for l in range(config.n_layers):
        names += [f"blocks.{l}.wq", f"blocks.{l}.wv"]
    return names


def merge_lora(params: ParamStore, adapters: Dict[str, LoraAdapter]) -> ParamStore:
    """Fold adapter deltas into the base weights (adapters then removable)."""
    out = params.copy()
    for target, ad in adapters.items():
        out.params[target] = out.params[target] + ad.delta().astype(
            out.params[target].dtype)
    return out


@dataclass
class ClassifierHead:
    """Single linear layer read at the CLS position."""

    weight: np.ndarray  # (n_classes, d_model)
    bias: np.ndarray    # (n_classes,)

    def __post_init__(self):
        if self.weight.shape[0] < 2:
            raise ValueError("need at least two classes")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("bias shape mismatch")

    @property
    def n_classes(self) -> int:
        return int(self.weight.shape[0])


def init_head(config: LmConfig, n_classes: int, seed: int = 0,
              dtype=np.float32) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    return ClassifierHead(
        weight=rng.normal(0.0, 0.02, size=(n_classes, config.d_model)).astype(dtype),
        bias=np.zeros(n_classes, dtype=dtype))


# --- batching -------------------------------------------------------------------


@dataclass
class Batch:
    """Padded id matrix plus the masks the losses need."""

    ids: np.ndarray        # (B, T) int64, PAD after each sequence's end
    lengths: np.ndarray    # (B,) true lengths
    audio_mask: np.ndarray  # (B, T) bool, audio positions (prediction targets)
    cls_pos: np.ndarray    # (B,) index of CLS per row
    labels: Optional[np.ndarray] = None


def pad_batch(seqs: Sequence[FusedSequence], config: LmConfig) -> Batch:
    if not seqs:
        raise ValueError("empty batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    t = int(lengths.max())
    if t > config.context:
        raise ContextOverflow(f"sequence length {t} > context {config.context}")
    ids = np.full((len(seqs), t), config.pad_id, dtype=np.int64)
    audio_mask = np.zeros((len(seqs), t), dtype=bool)
    cls_pos = np.zeros(len(seqs), dtype=np.int64)
    labels = np.full(len(seqs), -1, dtype=np.int64)
    have_labels = True
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s.ids
        audio_mask[i, :len(s)] = s.kinds == KIND_AUDIO
        cls_pos[i] = int(np.nonzero(s.kinds == KIND_CLS)[0][0])
        if s.label is None:
            have_labels = False
        else:
            labels[i] = s.label
    return Batch(ids=ids, lengths=lengths, audio_mask=audio_mask,
                 cls_pos=cls_pos, labels=labels if have_labels else None)


# --- forward / backward ---------------------------------------------------------


def _embed(ids: np.ndarray, params: ParamStore, config: LmConfig) -> np.ndarray:
    """Gather from the split tables by id range."""
    emb_text = params["emb_text"]
    h = np.empty(ids.shape + (config.d_model,), dtype=emb_text.dtype)
    text_like = ids < config.n_text
    special = ids >= config.sep_id
    h[text_like] = emb_text[ids[text_like]]
    h[special] = emb_text[config.n_text + (ids[special] - config.sep_id)]
    if config.n_audio > 0:
        audio = ~text_like & ~special
        h[audio] = params["emb_audio"][ids[audio] - config.n_text]
    elif not (text_like | special).all():
        raise IndexOutOfRange("audio id in a model without audio vocabulary")
    return h


def _rmsnorm_fwd(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ms = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + _RMS_EPS)).astype(x.dtype)
    return x * inv, inv


def _rmsnorm_bwd(g: np.ndarray, x: np.ndarray, inv: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    # y = x * inv; inv depends on x through the mean square
    dot = np.sum(g * x, axis=-1, keepdims=True)
    return inv * g - (inv ** 3) * x * (dot / d)


def _lin_fwd(x, w, adapter: Optional[LoraAdapter]):
    y = x @ w
    u = None
    if adapter is not None:
        u = x @ adapter.a.T
        y = y + adapter.scale * (u @ adapter.b.T)
    return y, u


def _split_heads(x: np.ndarray, config: LmConfig) -> np.ndarray:
    b, t, d = x.shape
    # contiguous layout keeps the compiled kernels on their fast path
    return np.ascontiguousarray(
        x.reshape(b, t, config.n_heads, config.head_dim).transpose(0, 2, 1, 3))


def _join_heads(x: np.ndarray) -> np.ndarray:
    b, hh, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, hh * hd)


def forward(batch: Batch, params: ParamStore, config: LmConfig,
            adapters: Optional[Dict[str, LoraAdapter]] = None,
            want_cache: bool = False):
    """Run the stack; returns (logits, hidden, cache).

    ``cache`` (when requested) carries every intermediate the hand-written
    backward pass needs.  Causality comes from the attention kernel alone:
    padding needs no mask because pad positions sit strictly after every
    real query and their rows never receive loss gradient.
    """
    adapters = adapters or {}
    ids = batch.ids
    if ids.shape[1] > config.context:
        raise ContextOverflow(
            f"sequence length {ids.shape[1]} > context {config.context}")
    h = _embed(ids, params, config)
    cache = {"ids": ids, "h0": h, "layers": []} if want_cache else None
    for l in range(config.n_layers):
        names = {k: f"blocks.{l}.{k}" for k in ("wq", "wk", "wv", "wo", "fc1", "fc2")}
        x_in = h
        xn1, inv1 = _rmsnorm_fwd(x_in)
        q, uq = _lin_fwd(xn1, params[names["wq"]], adapters.get(names["wq"]))
        k, uk = _lin_fwd(xn1, params[names["wk"]], adapters.get(names["wk"]))
        v, uv = _lin_fwd(xn1, params[names["wv"]], adapters.get(names["wv"]))
        qh, kh, vh = (_split_heads(z, config) for z in (q, k, v))
        attn, w = attn_fwd(qh, kh, vh)
        attn_flat = _join_heads(attn)
        proj, uo = _lin_fwd(attn_flat, params[names["wo"]],
                            adapters.get(names["wo"]))
        h = x_in + proj
        x_mid = h
        xn2, inv2 = _rmsnorm_fwd(x_mid)
        a, u1 = _lin_fwd(xn2, params[names["fc1"]], adapters.get(names["fc1"]))
        relu_a = np.maximum(a, 0.0)
        z = relu_a * relu_a
        y, u2 = _lin_fwd(z, params[names["fc2"]], adapters.get(names["fc2"]))
        h = x_mid + y
        if want_cache:
            cache["layers"].append({
                "x_in": x_in, "xn1": xn1, "inv1": inv1,
                "qh": qh, "kh": kh, "vh": vh, "w": w,
                "attn_flat": attn_flat, "uq": uq, "uk": uk, "uv": uv, "uo": uo,
                "x_mid": x_mid, "xn2": xn2, "inv2": inv2,
                "a": a, "relu_a": relu_a, "z": z, "u1": u1, "u2": u2,
            })
    logits = h @ params["lm_head"].T
    return logits, h, cache


def _lin_bwd(g, x, w, u, adapter: Optional[LoraAdapter], name: str,
             grads: Dict[str, np.ndarray], want: Set[str]):
    """Backward of y = x @ w (+ lora); returns grad wrt x."""
    gx = g @ w.T
    flat_g = g.reshape(-1, g.shape[-1])
    flat_x = x.reshape(-1, x.shape[-1])
    if name in want:
        grads[name] = grads.get(name, 0) + flat_x.T @ flat_g
    if adapter is not None:
        s = adapter.scale
        gu = s * (g @ adapter.b)
        gx += gu @ adapter.a
        a_name, b_name = f"lora.{name}.a", f"lora.{name}.b"
        if b_name in want:
            flat_u = u.reshape(-1, u.shape[-1])
            grads[b_name] = grads.get(b_name, 0) + s * (flat_g.T @ flat_u)
        if a_name in want:
            flat_gu = gu.reshape(-1, gu.shape[-1])
            grads[a_name] = grads.get(a_name, 0) + flat_gu.T @ flat_x
    return gx


def backward_from_hidden(g_h: np.ndarray, cache: Dict, params: ParamStore,
                         config: LmConfig,
                         adapters: Optional[Dict[str, LoraAdapter]],
                         want: Set[str]) -> Dict[str, np.ndarray]:
    """Backprop a gradient on the final hidden states down to ``want``."""
    adapters = adapters or {}
    grads: Dict[str, np.ndarray] = {}
    g = g_h
    for l in reversed(range(config.n_layers)):
        c = cache["layers"][l]
        names = {k: f"blocks.{l}.{k}" for k in ("wq", "wk", "wv", "wo", "fc1", "fc2")}
        # MLP: h = x_mid + fc2(relu(fc1(xn2))^2)
        gy = g
        gz = _lin_bwd(gy, c["z"], params[names["fc2"]], c["u2"],
                      adapters.get(names["fc2"]), names["fc2"], grads, want)
        ga = gz * (2.0 * c["relu_a"])
        gxn2 = _lin_bwd(ga, c["xn2"], params[names["fc1"]], c["u1"],
                        adapters.get(names["fc1"]), names["fc1"], grads, want)
        g = g + _rmsnorm_bwd(gxn2, c["x_mid"], c["inv2"])
        # attention: x_mid = x_in + wo(attn(q, k, v))
        gproj = g
        gattn_flat = _lin_bwd(gproj, c["attn_flat"], params[names["wo"]],
                              c["uo"], adapters.get(names["wo"]),
                              names["wo"], grads, want)
        gattn = _split_heads(gattn_flat, config)
        gqh, gkh, gvh = attn_bwd(gattn, c["qh"], c["kh"], c["vh"], c["w"])
        gq, gk, gv = (_join_heads(z) for z in (gqh, gkh, gvh))
        gxn1 = _lin_bwd(gq, c["xn1"], params[names["wq"]], c["uq"],
                        adapters.get(names["wq"]), names["wq"], grads, want)
        gxn1 += _lin_bwd(gk, c["xn1"], params[names["wk"]], c["uk"],
                         adapters.get(names["wk"]), names["wk"], grads, want)
        gxn1 += _lin_bwd(gv, c["xn1"], params[names["wv"]], c["uv"],
                         adapters.get(names["wv"]), names["wv"], grads, want)
        g = g + _rmsnorm_bwd(gxn1, c["x_in"], c["inv1"])
    # embedding scatter
    ids = cache["ids"]
    if "emb_text" in want:
        emb_text = params["emb_text"]
        g_emb = np.zeros_like(emb_text)
        text_like = ids < config.n_text
        special = ids >= config.sep_id
        np.add.at(g_emb, ids[text_like], g[text_like])
        np.add.at(g_emb, config.n_text + (ids[special] - config.sep_id),
                  g[special])
        grads["emb_text"] = g_emb
    if "emb_audio" in want and config.n_audio > 0:
        g_emb = np.zeros_like(params["emb_audio"])
        audio = (ids >= config.n_text) & (ids < config.sep_id)
        np.add.at(g_emb, ids[audio] - config.n_text, g[audio])
        grads["emb_audio"] = g_emb
    return grads


def masked_next_token_loss(batch: Batch, target_mask: np.ndarray,
                           params: ParamStore, config: LmConfig,
                           adapters: Optional[Dict[str, LoraAdapter]] = None,
                           want: Optional[Set[str]] = None):
    """Mean NLL of masked positions, each predicted from the previous position.

    ``target_mask`` marks target positions (column 0 must be unmarked: it
    has no prefix).  Returns (loss, grads); grads cover ``want`` only.
    """
    want = want or set()
    if target_mask.shape != batch.ids.shape:
        raise ValueError("target mask shape mismatch")
    if target_mask[:, 0].any():
        raise ValueError("position 0 cannot be a prediction target")
    logits, h, cache = forward(batch, params, config, adapters,
                               want_cache=bool(want))
    # target at position t is predicted by logits at t-1
    tgt_rows, tgt_cols = np.nonzero(target_mask)
    pred_cols = tgt_cols - 1
    sel = logits[tgt_rows, pred_cols]
    lp = log_softmax(sel.astype(np.float64))
    targets = batch.ids[tgt_rows, tgt_cols]
    n = tgt_rows.size
    loss = float(-lp[np.arange(n), targets].sum() / n)
    if not want:
        return loss, {}
    g_sel = (np.exp(lp) - _one_hot(targets, config.vocab_size)) / n
    g_logits = np.zeros_like(logits)
    g_logits[tgt_rows, pred_cols] = g_sel.astype(logits.dtype)
    grads: Dict[str, np.ndarray] = {}
    flat_gl = g_logits.reshape(-1, config.vocab_size)
    flat_h = h.reshape(-1, config.d_model)
    if "lm_head" in want:
        grads["lm_head"] = flat_gl.T @ flat_h
    g_h = g_logits @ params["lm_head"]
    grads.update(backward_from_hidden(g_h, cache, params, config,
                                      adapters, want))
    return loss, grads


def clm_loss(batch: Batch, params: ParamStore, config: LmConfig,
             adapters: Optional[Dict[str, LoraAdapter]] = None,
             want: Optional[Set[str]] = None):
    """Mean NLL over exactly the audio positions (each from its prefix).

    Text, SEP, and CLS positions never contribute targets.  Every sequence
    in the batch must contain at least one audio position.
    """
    per_row = batch.audio_mask.sum(axis=1)
    if (per_row == 0).any():
        bad = int(np.nonzero(per_row == 0)[0][0])
        raise NoAudioPositions(f"sequence {bad} has no audio positions")
    return masked_next_token_loss(batch, batch.audio_mask, params, config,
                                  adapters, want)


def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((idx.size, n), dtype=np.float64)
    out[np.arange(idx.size), idx] = 1.0
    return out


def classify(batch: Batch, params: ParamStore, config: LmConfig,
             adapters: Optional[Dict[str, LoraAdapter]],
             head: Optional[ClassifierHead]) -> np.ndarray:
    """Class probabilities from the hidden state at each CLS position."""
    if head is None:
        raise MissingHead("classification requires a head")
    _, h, _ = forward(batch, params, config, adapters)
    h_cls = h[np.arange(len(batch.cls_pos)), batch.cls_pos]
    logits = h_cls @ head.weight.T + head.bias
    return softmax(logits.astype(np.float64))


def classification_loss(batch: Batch, params: ParamStore, config: LmConfig,
                        adapters: Optional[Dict[str, LoraAdapter]],
                        head: ClassifierHead,
                        want: Optional[Set[str]] = None):
    """Mean cross-entropy of the labels under ``classify``; grads for ``want``.

    ``want`` may name adapter tensors ("lora.<target>.a"/".b"), head
    tensors ("head.weight"/"head.bias"), or any base tensor.
    """
    if batch.labels is None:
        raise ValueError("batch has no labels")
    if head is None:
        raise MissingHead("classification requires a head")
    want = want or set()
    hidden_want = {n for n in want if not n.startswith("head.")}
    logits_all, h, cache = forward(batch, params, config, adapters,
                                   want_cache=bool(hidden_want))
    rows = np.arange(len(batch.cls_pos))
    h_cls = h[rows, batch.cls_pos]
    logits = h_cls @ head.weight.T + head.bias
    lp = log_softmax(logits.astype(np.float64))
    n = len(rows)
    loss = float(-lp[rows, batch.labels].sum() / n)
    if not want:
        return loss, {}
    g_logits = (np.exp(lp) - _one_hot(batch.labels, head.n_classes)) / n
    grads: Dict[str, np.ndarray] = {}
    if "head.weight" in want:
        grads["head.weight"] = g_logits.T @ h_cls.astype(np.float64)
    if "head.bias" in want:
        grads["head.bias"] = g_logits.sum(axis=0)
    if hidden_want:
        g_hcls = (g_logits @ head.weight.astype(np.float64)).astype(h.dtype)
        g_h = np.zeros_like(h)
        g_h[rows, batch.cls_pos] = g_hcls
        grads.update(backward_from_hidden(g_h, cache, params, config,
                                          adapters, hidden_want))
    return loss, grads


# --- continuous-vector baseline ---------------------------------------------------


@dataclass
class AudioProjection:
    """Affine map from a continuous audio vector to one soft token."""

    weight: np.ndarray  # (d_model, d_audio)
    bias: np.ndarray    # (d_model,)


def init_projection(d_audio: int, config: LmConfig, seed: int = 0,
                    dtype=np.float32) -> AudioProjection:
    rng = np.random.default_rng(seed)
    return AudioProjection(
        weight=rng.normal(0.0, 0.02, size=(config.d_model, d_audio)).astype(dtype),
        bias=np.zeros(config.d_model, dtype=dtype))


def project_continuous_audio(vec: np.ndarray,
                             projection: AudioProjection) -> np.ndarray:
    """One soft-token embedding to be placed at the first audio slot."""
    vec = np.asarray(vec)
    if vec.shape != (projection.weight.shape[1],):
        raise DimensionMismatch(
            f"audio vector shape {vec.shape} does not match "
            f"projection input {projection.weight.shape[1]}")
    return projection.weight @ vec + projection.bias


# --- checkpoint format ------------------------------------------------------------


def save_checkpoint(path, params: ParamStore, config: LmConfig,
                    adapters: Optional[Dict[str, LoraAdapter]] = None,
                    head: Optional[ClassifierHead] = None) -> None:
    """Versioned binary: magic, version, JSON directory, raw tensor bytes."""
    tensors: List[Tuple[str, np.ndarray]] = []
    for name in sorted(params.names()):
        tensors.append((name, params[name]))
    adapter_meta = []
    if adapters:
        for target in sorted(adapters):
            ad = adapters[target]
            adapter_meta.append(
                {"target": target, "rank": ad.rank, "alpha": ad.alpha})
            tensors.append((f"lora.{target}.a", ad.a))
            tensors.append((f"lora.{target}.b", ad.b))
    if head is not None:
        tensors.append(("head.weight", head.weight))
        tensors.append(("head.bias", head.bias))
    directory = []
    offset = 0
    for name, arr in tensors:
        nbytes = arr.nbytes
        directory.append({
            "name": name, "dtype": str(arr.dtype),
            "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    meta = {
        "config": config.to_dict(),
        "trainable": sorted(params.trainable_names()),
        "adapters": adapter_meta,
        "has_head": head is not None,
        "tensors": directory,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``: (params, config, adapters, head)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, meta_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        payload = f.read()
    arrays: Dict[str, np.ndarray] = {}
    for entry in meta["tensors"]:
        start = entry["offset"]
        raw = payload[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ValueError(f"truncated checkpoint at tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    config = LmConfig(**meta["config"])
    params = ParamStore()
    trainable = set(meta["trainable"])
    for entry in meta["tensors"]:
        name = entry["name"]
        if name.startswith("lora.") or name.startswith("head."):
            continue
        params.add(name, arrays[name], trainable=name in trainable)
    adapters: Dict[str, LoraAdapter] = {}
    for ad in meta["adapters"]:
        target = ad["target"]
        adapters[target] = LoraAdapter(
            target=target, a=arrays[f"lora.{target}.a"],
            b=arrays[f"lora.{target}.b"], rank=ad["rank"], alpha=ad["alpha"])
    head = None
    if meta["has_head"]:
        head = ClassifierHead(weight=arrays["head.weight"],
                              bias=arrays["head.bias"])
    return params, config, adapters or None, head
