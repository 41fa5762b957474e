"""Shared trainable-tensor numerics: parameter store, losses, optimizer,
and the finite-difference gradient checker.

Training runs in float32; gradient checks run on float64 copies of the same
parameters. Reductions iterate parameters in sorted name order so repeated
runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Tuple

import numpy as np

from .errors import (
    EmptyMask,
    EmptyTrainableSet,
    IndexOutOfRange,
    NonDeterministicLoss,
    ShapeMismatch,
    UnknownParameter,
)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, stable under large logits."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable under large logits."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_ce_inputs(logits, targets, mask):
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be 2-D, got shape {logits.shape}")
    n, v = logits.shape
    if targets.shape != (n,) or mask.shape != (n,):
        raise ShapeMismatch(
            f"targets/mask must have shape ({n},), got {targets.shape} and {mask.shape}"
        )
    if not mask.any():
        raise EmptyMask("loss mask selects no positions")
    active = targets[mask]
    if active.size and (active.min() < 0 or active.max() >= v):
        raise IndexOutOfRange(
            f"target ids must lie in [0, {v}), got range "
            f"[{active.min()}, {active.max()}]"
        )


def cross_entropy_masked(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean negative log-likelihood over masked rows only."""
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets)
    _check_ce_inputs(logits, targets, mask)
    rows = np.nonzero(mask)[0]
    lsm = log_softmax(logits[rows])
    picked = lsm[np.arange(rows.size), targets[rows]]
    return float(-picked.sum(dtype=np.float64) / rows.size)


def cross_entropy_masked_with_grad(
    logits: np.ndarray, targets: np.ndarray, mask: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Loss plus d(loss)/d(logits): (softmax - onehot) / count on masked rows,
    exact zeros elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets)
    _check_ce_inputs(logits, targets, mask)
    rows = np.nonzero(mask)[0]
    lsm = log_softmax(logits[rows])
    loss = float(-lsm[np.arange(rows.size), targets[rows]].sum(dtype=np.float64) / rows.size)
    grad = np.zeros_like(logits)
    g = np.exp(lsm)
    g[np.arange(rows.size), targets[rows]] -= 1.0
    grad[rows] = g / logits.dtype.type(rows.size)
    return loss, grad


@dataclass
class ParamStore:
    """Named parameter tensors with per-tensor trainability and AdamW state.

    Optimizer state (first/second moments, step count) exists only for
    trainable tensors; flipping a tensor to frozen drops its state.
    """

    params: Dict[str, np.ndarray] = field(default_factory=dict)
    _trainable: Dict[str, bool] = field(default_factory=dict)
    opt_m: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: Dict[str, np.ndarray] = field(default_factory=dict)
    opt_step: Dict[str, int] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self.params:
            raise UnknownParameter(f"parameter {name!r} already exists")
        self.params[name] = value
        self._trainable[name] = bool(trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.params[name]
        except KeyError:
            raise UnknownParameter(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> Iterable[str]:
        return self.params.keys()

    def is_trainable(self, name: str) -> bool:
        if name not in self.params:
            raise UnknownParameter(f"no parameter named {name!r}")
        return self._trainable[name]

    def trainable_names(self):
        return sorted(n for n, t in self._trainable.items() if t)

    def set_trainable(self, name: str, flag: bool) -> None:
        if name not in self.params:
            raise UnknownParameter(f"no parameter named {name!r}")
        self._trainable[name] = bool(flag)
        if not flag:
            self.opt_m.pop(name, None)
            self.opt_v.pop(name, None)
            self.opt_step.pop(name, None)

    def freeze_all(self) -> None:
        for name in self.params:
            self.set_trainable(name, False)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.params = {k: v.copy() for k, v in self.params.items()}
        out._trainable = dict(self._trainable)
        out.opt_m = {k: v.copy() for k, v in self.opt_m.items()}
        out.opt_v = {k: v.copy() for k, v in self.opt_v.items()}
        out.opt_step = dict(self.opt_step)
        return out

    def astype(self, dtype) -> "ParamStore":
        """Dtype-converted deep copy (optimizer state converts too)."""
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        out.opt_m = {k: v.astype(dtype) for k, v in out.opt_m.items()}
        out.opt_v = {k: v.astype(dtype) for k, v in out.opt_v.items()}
        return out


def adamw_step(
    store: ParamStore,
    grads: Dict[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> ParamStore:
    """One AdamW update: bias-corrected moments, then decoupled weight decay.

    Only tensors named in ``grads`` are touched; they must be trainable and
    shape-matched. Mutates ``store`` in place and returns it.
    """
    if not (lr >= 0.0 and 0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0 and eps > 0.0 and weight_decay >= 0.0):
        raise ValueError(
            f"invalid AdamW hyperparameters: lr={lr} beta1={beta1} beta2={beta2} "
            f"eps={eps} weight_decay={weight_decay}"
        )
    for name in sorted(grads):
        if name not in store.params or not store.is_trainable(name):
            raise UnknownParameter(f"gradient given for unknown or frozen parameter {name!r}")
        g = grads[name]
        w = store.params[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {w.shape} for {name!r}")
        dt = w.dtype.type
        if name not in store.opt_m:
            store.opt_m[name] = np.zeros_like(w)
            store.opt_v[name] = np.zeros_like(w)
            store.opt_step[name] = 0
        step = store.opt_step[name] + 1
        store.opt_step[name] = step
        m = store.opt_m[name]
        v = store.opt_v[name]
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        m_hat = m / dt(1.0 - beta1 ** step)
        v_hat = v / dt(1.0 - beta2 ** step)
        w -= dt(lr) * (m_hat / (np.sqrt(v_hat) + dt(eps)) + dt(weight_decay) * w)
    return store


def grad_check(
    loss_fn: Callable[[ParamStore], Tuple[float, Dict[str, np.ndarray]]],
    store: ParamStore,
    eps: float = 1e-5,
    floor: float = 1e-12,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn(store) -> (loss, grads)`` must be deterministic; it is called
    twice up front to verify that. Relative error uses
    ``|a - b| / max(|a|, |b|, floor)``. Central differences on a loss of
    magnitude L resolve gradients only down to about ``ulp(L) / eps``, so
    for composite models raise ``floor`` above that noise level rather than
    loosening the tolerance. Requires a float64 store.
    """
    names = store.trainable_names()
    if not names:
        raise EmptyTrainableSet("no trainable parameters to check")
    for name in names:
        if store.params[name].dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, {name!r} is "
                             f"{store.params[name].dtype}")
    loss_a, grads = loss_fn(store)
    loss_b, _ = loss_fn(store)
    if loss_a != loss_b:
        raise NonDeterministicLoss(f"loss evaluated twice gave {loss_a!r} and {loss_b!r}")
    missing = [n for n in names if n not in grads]
    if missing:
        raise UnknownParameter(f"loss_fn returned no gradient for {missing}")

    worst = 0.0
    for name in names:
        w = store.params[name]
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {w.shape} for {name!r}")
        flat = w.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            lp, _ = loss_fn(store)
            flat[i] = orig - h
            lm, _ = loss_fn(store)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            a = float(gflat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), floor)
            if rel > worst:
                worst = rel
    return worst
