"""L1-regularized logistic regression solved by proximal gradient (FISTA).

The objective is mean negative log-likelihood plus lambda times the L1 norm
of the penalized weight coordinates. Intercepts are never penalized.
Multinomial symmetry is broken by pinning class 0's weight row to zero;
intercepts stay free and converge to class log-priors up to a shared
constant fixed by their initialization.

The solver backtracks on the step size (halving), restarts momentum
whenever the objective would rise, and starts from the intercept-only
optimum so that for lambda >= lambda_max the all-zero weights are already
stationary and stay exactly zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


@dataclass
class LassoProblem:
    """One regularized fit: sparse design, integer labels, penalty mask.

    ``penalty`` marks which columns the L1 term applies to (all by default).
    ``family`` selects the smooth-loss implementation: "binomial" (sigmoid,
    2 classes only), "multinomial" (softmax with class-0 row pinned), or
    "auto" (binomial when n_classes == 2).
    """

    x: sp.csr_matrix
    y: np.ndarray
    n_classes: int
    lam: float
    penalty: Optional[np.ndarray] = None
    family: str = "auto"

    def __post_init__(self):
        self.x = sp.csr_matrix(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.shape != (self.x.shape[0],):
            raise ValueError(f"labels shape {self.y.shape} != ({self.x.shape[0]},)")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError(f"labels outside [0, {self.n_classes})")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.penalty is None:
            self.penalty = np.ones(self.x.shape[1], dtype=bool)
        else:
            self.penalty = np.asarray(self.penalty, dtype=bool)
            if self.penalty.shape != (self.x.shape[1],):
                raise ValueError("penalty mask shape mismatch")
        if self.family not in ("auto", "binomial", "multinomial"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "binomial" and self.n_classes != 2:
            raise ValueError("binomial family requires exactly two classes")
        counts = np.bincount(self.y, minlength=self.n_classes)
        if (counts == 0).any():
            raise ValueError("every class must appear at least once")

    @property
    def resolved_family(self) -> str:
        if self.family == "auto":
            return "binomial" if self.n_classes == 2 else "multinomial"
        return self.family


@dataclass
class LassoModel:
    """Fitted coefficients in pinned multinomial form: weights (C, D) with
    row 0 all zero, intercepts (C,)."""

    weights: np.ndarray
    intercepts: np.ndarray
    converged: bool
    objective: float
    n_iter: int
    lam: float

    @property
    def weight_vector(self) -> np.ndarray:
        """Single-vector view for two-class fits (row 1, since row 0 is pinned)."""
        if self.weights.shape[0] != 2:
            raise ValueError("weight_vector is only defined for two-class models")
        return self.weights[1]

    def support(self, penalty: Optional[np.ndarray] = None) -> np.ndarray:
        """Column indices with any nonzero weight (optionally penalized only)."""
        nz = np.any(self.weights != 0.0, axis=0)
        if penalty is not None:
            nz &= penalty
        return np.nonzero(nz)[0]


def predict_proba(model: LassoModel, x: sp.spmatrix) -> np.ndarray:
    scores = np.asarray(x @ model.weights.T) + model.intercepts
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)


# --- smooth losses ------------------------------------------------------------

def _binomial_nll_grad(x, y, w, b, need_grad=True):
    """Mean sigmoid NLL via softplus; w is the class-1 weight row."""
    n = x.shape[0]
    s = np.asarray(x @ w).reshape(-1) + b
    # softplus(s) - y * s, stable in both tails
    nll = float((np.logaddexp(0.0, s) - y * s).sum() / n)
    if not need_grad:
        return nll, None, None
    p = 1.0 / (1.0 + np.exp(-s))
    r = (p - y) / n
    gw = np.asarray(x.T @ r).reshape(-1)
    gb = float(r.sum())
    return nll, gw, gb


def _multinomial_nll_grad(x, y_onehot, w, b, need_grad=True):
    """Mean softmax NLL; w is (C, D) with row 0 pinned to zero."""
    n = x.shape[0]
    scores = np.asarray(x @ w.T) + b
    m = scores.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(scores - m).sum(axis=1))
    picked = (scores * y_onehot).sum(axis=1)
    nll = float((lse - picked).sum() / n)
    if not need_grad:
        return nll, None, None
    p = np.exp(scores - lse[:, None])
    r = (p - y_onehot) / n
    gw = np.asarray((x.T @ r).T)
    gw[0, :] = 0.0  # pinned row never moves
    gb = r.sum(axis=0)
    return nll, gw, gb


class _Smooth:
    """Uniform (value, grad) interface over both families, operating on the
    pinned (C, D) representation."""

    def __init__(self, problem: LassoProblem):
        self.problem = problem
        self.family = problem.resolved_family
        if self.family == "multinomial":
            n = problem.x.shape[0]
            self.y_onehot = np.zeros((n, problem.n_classes))
            self.y_onehot[np.arange(n), problem.y] = 1.0

    def value_grad(self, w, b, need_grad=True):
        if self.family == "binomial":
            nll, gw1, gb1 = _binomial_nll_grad(
                self.problem.x, self.problem.y, w[1], b[1] - b[0], need_grad
            )
            if not need_grad:
                return nll, None, None
            gw = np.zeros_like(w)
            gw[1] = gw1
            # d/db0 = -d/db_eff, d/db1 = +d/db_eff with b_eff = b1 - b0
            gb = np.array([-gb1, gb1])
            return nll, gw, gb
        return _multinomial_nll_grad(self.problem.x, self.y_onehot, w, b, need_grad)


def _intercept_init(problem: LassoProblem) -> np.ndarray:
    """Zero-weight optimum: centered class log-priors."""
    counts = np.bincount(problem.y, minlength=problem.n_classes)
    logp = np.log(counts / counts.sum())
    return logp - logp.mean()


def lambda_max(problem: LassoProblem) -> float:
    """Smallest lambda at which all penalized weights are zero: the largest
    absolute smooth-gradient coordinate at the intercept-only optimum."""
    smooth = _Smooth(problem)
    w0 = np.zeros((problem.n_classes, problem.x.shape[1]))
    b0 = _intercept_init(problem)
    _, gw, _ = smooth.value_grad(w0, b0)
    gw = gw[1:, :]  # pinned row excluded
    pen = np.abs(gw[:, problem.penalty])
    return float(pen.max()) if pen.size else 0.0


def _estimate_lipschitz(problem: LassoProblem) -> float:
    """Power iteration on the intercept-augmented design gives a spectral
    bound; the Hessian factor is 1/4 (binomial) or 1/2 (multinomial)."""
    x = problem.x
    n, d = x.shape
    v = np.full(d + 1, 1.0 / math.sqrt(d + 1))
    sigma2 = 1.0
    for _ in range(30):
        u = np.asarray(x @ v[:d]).reshape(-1) + v[d]
        w = np.empty(d + 1)
        w[:d] = np.asarray(x.T @ u).reshape(-1)
        w[d] = u.sum()
        norm = math.sqrt(float((w * w).sum()))
        if norm == 0.0:
            break
        sigma2 = norm
        v = w / norm
    factor = 0.25 if problem.resolved_family == "binomial" else 0.5
    return max(factor * sigma2 / n, 1e-12)


def _prox(w, thresh, pen_mask_rows):
    """Soft-threshold penalized coordinates of the free rows in place."""
    z = w.copy()
    sub = z[1:, :]
    shrunk = np.sign(sub) * np.maximum(np.abs(sub) - thresh, 0.0)
    sub[:, pen_mask_rows] = shrunk[:, pen_mask_rows]
    z[1:, :] = sub
    return z


def _l1_term(w, lam, penalty) -> float:
    return float(lam * np.abs(w[1:, :][:, penalty]).sum())


def kkt_residual(model: LassoModel, problem: LassoProblem) -> float:
    """Max violation of first-order optimality.

    Penalized zero coordinates need |g| <= lambda; penalized nonzero ones
    need g + lambda * sign(w) = 0; unpenalized coordinates and intercepts
    need g = 0. The pinned row is a constraint, not a variable.
    """
    smooth = _Smooth(problem)
    _, gw, gb = smooth.value_grad(model.weights, model.intercepts)
    lam = problem.lam
    w = model.weights[1:, :]
    g = gw[1:, :]
    pen = problem.penalty
    viol = 0.0
    zero = w == 0.0
    pen_grid = np.broadcast_to(pen, w.shape)
    v_zero = np.maximum(np.abs(g) - lam, 0.0)
    v_nonzero = np.abs(g + lam * np.sign(w))
    v_unpen = np.abs(g)
    masked = np.where(pen_grid, np.where(zero, v_zero, v_nonzero), v_unpen)
    if masked.size:
        viol = float(masked.max())
    # intercept stationarity holds only up to the shared-shift null direction,
    # so measure the gradient with its mean removed
    gb_centered = gb - gb.mean()
    return max(viol, float(np.abs(gb_centered).max()))


def fit(
    problem: LassoProblem,
    tol: float = 1e-8,
    max_iter: int = 2000,
    init: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> LassoModel:
    """FISTA with backtracking line search and monotone restart.

    Converged means the objective decrease fell below ``tol`` with a KKT
    residual below ``10 * tol``. On iteration exhaustion the best iterate is
    returned with ``converged=False`` (no exception).
    """
    d = problem.x.shape[1]
    c = problem.n_classes
    smooth = _Smooth(problem)
    pen = problem.penalty
    lam = problem.lam

    if init is not None:
        w = init[0].astype(np.float64).copy()
        b = init[1].astype(np.float64).copy()
        w[0, :] = 0.0
    else:
        w = np.zeros((c, d))
        b = _intercept_init(problem)

    lip = _estimate_lipschitz(problem)

    def objective(wm, bm):
        nll, _, _ = smooth.value_grad(wm, bm, need_grad=False)
        return nll + _l1_term(wm, lam, pen)

    x_w, x_b = w.copy(), b.copy()
    y_w, y_b = w.copy(), b.copy()
    t = 1.0
    f_x = objective(x_w, x_b)
    best_w, best_b, best_f = x_w.copy(), x_b.copy(), f_x
    converged = False
    n_iter = 0
    restarted = False

    for n_iter in range(1, max_iter + 1):
        nll_y, gw, gb = smooth.value_grad(y_w, y_b)
        while True:
            step = 1.0 / lip
            z_w = _prox(y_w - step * gw, lam * step, pen)
            z_b = y_b - step * gb
            nll_z, _, _ = smooth.value_grad(z_w, z_b, need_grad=False)
            dw = z_w - y_w
            db = z_b - y_b
            quad = (
                nll_y
                + float((gw * dw).sum() + (gb * db).sum())
                + 0.5 * lip * float((dw * dw).sum() + (db * db).sum())
            )
            if nll_z <= quad + 1e-12 * max(1.0, abs(quad)):
                break
            if lip > 1e18:
                raise FloatingPointError("backtracking diverged; loss not smooth?")
            lip *= 2.0  # halve the step and retry

        f_z = nll_z + _l1_term(z_w, lam, pen)
        if f_z > f_x + 1e-12 * max(1.0, abs(f_x)):
            if restarted:
                break  # already a plain proximal step; float noise floor reached
            t = 1.0
            y_w, y_b = x_w.copy(), x_b.copy()
            restarted = True
            continue
        restarted = False

        decrease = f_x - f_z
        x_prev_w, x_prev_b = x_w, x_b
        x_w, x_b, f_x = z_w, z_b, f_z
        if f_x < best_f:
            best_w, best_b, best_f = x_w.copy(), x_b.copy(), f_x

        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        mom = (t - 1.0) / t_next
        y_w = x_w + mom * (x_w - x_prev_w)
        y_b = x_b + mom * (x_b - x_prev_b)
        y_w[0, :] = 0.0
        t = t_next

        if decrease < tol:
            cand = LassoModel(x_w, x_b, False, f_x, n_iter, lam)
            if kkt_residual(cand, problem) <= 10.0 * tol:
                converged = True
                break

    if not converged:
        logger.info(
            "fit stopped after %d iterations without convergence (lambda=%.3g)",
            n_iter, lam,
        )
        return LassoModel(best_w, best_b, False, best_f, n_iter, lam)
    return LassoModel(x_w, x_b, True, f_x, n_iter, lam)


@dataclass
class PathPoint:
    lam: float
    nnz: int
    objective: float


def sparsity_path(
    problem: LassoProblem,
    lambdas: List[float],
    tol: float = 1e-8,
    max_iter: int = 2000,
) -> List[PathPoint]:
    """Warm-started fits along a descending lambda grid.

    Reports the penalized support size and objective at each grid point.
    """
    lams = sorted((float(l) for l in lambdas), reverse=True)
    points: List[PathPoint] = []
    init = None
    for lam in lams:
        prob = replace(problem, lam=lam)
        model = fit(prob, tol=tol, max_iter=max_iter, init=init)
        init = (model.weights, model.intercepts)
        nnz = int(model.support(problem.penalty).size)
        points.append(PathPoint(lam, nnz, model.objective))
    return points
