"""
Low-rank plus sparse autoregression: trim, Lasso, ALS.

The penalty is the sum of absolute values of the sparse coefficient; the loss
is ``(1/(T-P)) ||Y - [A]_n X||_F^2`` (no factor 1/2), so the soft-threshold
level of a coordinate update is ``lambda / 2``.
"""
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .als import AlsConfig, FitError, als_fit_data, ar_data, random_init, restart_rngs
from .factor import LowRankCoef, assemble_coef
from .tensor import l1_norm

LAMBDA_GRID = (0.001, 0.003, 0.005, 0.008, 0.01, 0.03, 0.05, 0.08, 0.1, 0.3, 0.5, 0.8, 1.0)


@dataclass
class SparseCoef:
    """Sparse AR coefficient keyed by ``(i_1..i_n, k, j_1..j_n)`` (0-based).

    The entry sits in lag ``k`` (0 = most recent) at response index ``i`` and
    covariate index ``j``; in the ``Q x PQ`` lag-block matrix that is row
    ``vec(i)`` and column ``k Q + vec(j)``.
    """

    dims: tuple
    lag_order: int
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        full = self.dims + (self.lag_order,) + self.dims
        clean = {}
        for idx, val in self.entries.items():
            idx = tuple(int(i) for i in idx)
            if len(idx) != len(full) or any(not 0 <= i < d for i, d in zip(idx, full)):
                raise IndexError(f"index {idx} outside shape {full}")
            if val != 0:
                clean[idx] = float(val)
        self.entries = clean

    @property
    def shape(self):
        return self.dims + (self.lag_order,) + self.dims

    @property
    def Q(self):
        return int(np.prod(self.dims))

    def support_size(self):
        return len(self.entries)

    def __len__(self):
        return len(self.entries)

    def _matrix_index(self, idx):
        n = len(self.dims)
        row = np.ravel_multi_index(idx[:n], self.dims, order="F")
        col = idx[n] * self.Q + np.ravel_multi_index(idx[n + 1:], self.dims, order="F")
        return int(row), int(col)

    def to_matrix(self):
        q = self.Q
        out = np.zeros((q, self.lag_order * q))
        for idx, val in self.entries.items():
            out[self._matrix_index(idx)] = val
        return out

    def support(self):
        """Set of ``(row, col)`` positions in the lag-block matrix."""
        return {self._matrix_index(idx) for idx in self.entries}

    @classmethod
    def from_matrix(cls, mat, dims, lag_order):
        mat = np.asarray(mat, dtype=float)
        dims = tuple(dims)
        q = int(np.prod(dims))
        if mat.shape != (q, lag_order * q):
            raise ValueError(f"matrix shape {mat.shape} does not match dims {dims}, P={lag_order}")
        entries = {}
        for row, col in zip(*np.nonzero(mat)):
            k, jcol = divmod(int(col), q)
            idx = (np.unravel_index(row, dims, order="F")
                   + (k,) + np.unravel_index(jcol, dims, order="F"))
            entries[tuple(int(i) for i in idx)] = float(mat[row, col])
        return cls(dims, lag_order, entries)

    @classmethod
    def empty(cls, dims, lag_order):
        return cls(tuple(dims), lag_order, {})


@dataclass(frozen=True)
class LrsConfig:
    lam: float
    alpha_L: float = None
    outer_iters: int = 50
    outer_tol: float = 1e-5
    lasso_tol: float = 1e-9
    lasso_max_sweeps: int = 10000
    als_config: AlsConfig = AlsConfig()

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.alpha_L is not None and not self.alpha_L > 0:
            raise ValueError("alpha_L must be positive")
        if self.outer_iters < 1 or self.lasso_max_sweeps < 1:
            raise ValueError("iteration limits must be positive")
        if not (self.outer_tol > 0 and self.lasso_tol > 0):
            raise ValueError("tolerances must be positive")


def default_alpha(P, Q):
    return np.sqrt(P) * Q


def trim_level(alpha_L, P, Q):
    return alpha_L / (P * Q ** 2)


def trim(t, zeta):
    """Clip every entry to magnitude ``zeta``, keeping its sign."""
    t = np.asarray(t, dtype=float)
    if zeta < 0:
        raise ValueError("trim level must be non-negative")
    return np.clip(t, -zeta, zeta)


def _soft(z, level):
    return np.sign(z) * np.maximum(np.abs(z) - level, 0.0)


def lasso_cd(corr, gram, lam, start=None, tol=1e-9, max_sweeps=10000):
    """Row-separable Lasso by cyclic coordinate descent.

    Minimizes ``sum_rows  a S a^T - 2 c a^T + lam ||a||_1`` for every row
    ``c`` of ``corr`` (``Q x p``) with shared ``gram`` ``S`` (``p x p``).
    Columns are visited in fixed order; full sweeps alternate with sweeps over
    the currently active columns until a full sweep moves no coordinate by
    more than ``tol``.

    Returns
    -------
    coef : ndarray, ``Q x p``
    sweeps : int
    """
    corr = np.asarray(corr, dtype=float)
    gram = np.asarray(gram, dtype=float)
    p = gram.shape[0]
    a = np.zeros_like(corr) if start is None else np.array(start, dtype=float)
    resid = corr - a @ gram
    diag = np.diag(gram).copy()
    level = lam / 2.0
    all_cols = np.arange(p)

    def sweep(cols):
        biggest = 0.0
        for j in cols:
            if diag[j] <= 0:
                if np.any(a[:, j]):
                    resid[:] += np.outer(a[:, j], gram[j])
                    a[:, j] = 0.0
                continue
            old = a[:, j]
            new = _soft(resid[:, j] + old * diag[j], level) / diag[j]
            delta = new - old
            if np.any(delta):
                resid[:] -= np.outer(delta, gram[j])
                a[:, j] = new
                biggest = max(biggest, float(np.max(np.abs(delta))))
        return biggest

    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        if sweep(all_cols) < tol:
            break
        active = np.flatnonzero(np.any(a != 0, axis=0))
        while sweeps < max_sweeps:
            sweeps += 1
            if sweep(active) < tol:
                break
    return a, sweeps


def _lasso_inputs(series, P, fixed_lowrank):
    data = ar_data(series, P)
    y = data.response_rows()
    x = data.covariate_rows()
    n = data.n_samples
    low = np.zeros((y.shape[1], x.shape[1])) if fixed_lowrank is None else np.asarray(fixed_lowrank)
    corr = (y - x @ low.T).T @ x / n
    gram = x.T @ x / n
    return corr, gram, data


def lasso_gradient(series, P, fixed_lowrank, sparse):
    """Gradient of the loss with respect to the sparse coefficient matrix."""
    data = ar_data(series, P)
    y, x = data.response_rows(), data.covariate_rows()
    s = sparse.to_matrix() if isinstance(sparse, SparseCoef) else np.asarray(sparse)
    resid = y - x @ (np.asarray(fixed_lowrank) + s).T
    return -2.0 * resid.T @ x / data.n_samples


def kkt_violation(grad, coef, lam):
    """Largest violation of the Lasso optimality conditions.

    Active entries need ``grad = -lam * sign``; zero entries need
    ``|grad| <= lam``.
    """
    coef = np.asarray(coef)
    active = coef != 0
    v_active = np.abs(grad + lam * np.sign(coef))[active]
    v_zero = np.maximum(np.abs(grad[~active]) - lam, 0.0)
    worst = 0.0
    if v_active.size:
        worst = max(worst, float(v_active.max()))
    if v_zero.size:
        worst = max(worst, float(v_zero.max()))
    return worst


def lambda_max(series, P, fixed_lowrank=None):
    """Smallest penalty at which the sparse solution is empty."""
    corr, _, _ = _lasso_inputs(series, P, fixed_lowrank)
    return float(2.0 * np.max(np.abs(corr)))


def lasso_step(series, P, fixed_lowrank, lam, config=None, start=None):
    """Sparse update with the low-rank coefficient held fixed.

    ``fixed_lowrank`` is the ``Q x PQ`` matrix (already trimmed by the caller
    inside :func:`lrs_fit`).
    """
    tol = 1e-9 if config is None else config.lasso_tol
    max_sweeps = 10000 if config is None else config.lasso_max_sweeps
    corr, gram, _ = _lasso_inputs(series, P, fixed_lowrank)
    start = start.to_matrix() if isinstance(start, SparseCoef) else start
    coef, _ = lasso_cd(corr, gram, lam, start=start, tol=tol, max_sweeps=max_sweeps)
    dims = series.dims if hasattr(series, "dims") else np.shape(series)[1:]
    return SparseCoef.from_matrix(coef, dims, P)


class Objective(NamedTuple):
    value: float
    loss: float
    penalty: float
    constraint_satisfied: bool


def _lowrank_matrix(lowrank):
    if isinstance(lowrank, LowRankCoef):
        return assemble_coef(lowrank)
    return np.asarray(lowrank, dtype=float)


def penalized_objective(lowrank, sparse, series, P, lam, alpha_L=None):
    """``L_T(A_L + A_S) + lam * sum|A_S|`` plus the sup-norm constraint check
    ``||A_L||_inf <= alpha_L / (P Q^2)``."""
    data = ar_data(series, P)
    y, x = data.response_rows(), data.covariate_rows()
    low = _lowrank_matrix(lowrank)
    s = np.zeros_like(low) if sparse is None else (
        sparse.to_matrix() if isinstance(sparse, SparseCoef) else np.asarray(sparse))
    resid = y - x @ (low + s).T
    fit = float(np.sum(resid * resid) / data.n_samples)
    pen = lam * l1_norm(s)
    q = y.shape[1]
    alpha = default_alpha(P, q) if alpha_L is None else alpha_L
    ok = bool(np.max(np.abs(low)) <= trim_level(alpha, P, q) * (1 + 1e-12))
    return Objective(fit + pen, fit, pen, ok)


@dataclass
class LrsReport:
    objective_trace: list
    outer_iterations: int
    converged: bool
    constraint_satisfied: bool
    lam: float
    alpha_L: float
    als_iterations: list = field(default_factory=list)

    def to_dict(self):
        return {
            "objective_trace": list(self.objective_trace),
            "outer_iterations": self.outer_iterations,
            "converged": self.converged,
            "constraint_satisfied": self.constraint_satisfied,
            "lambda": self.lam,
            "alpha_L": self.alpha_L,
            "als_iterations": list(self.als_iterations),
        }


def lrs_fit(series, P, R_y, R_x, config, init=None):
    """Low-rank plus sparse estimator.

    Each outer iteration trims the low-rank coefficient to
    ``alpha_L / (P Q^2)``, solves the Lasso for the sparse part with the
    trimmed coefficient fixed, then refits the low-rank part by ALS on the
    residual ``Y - A_S X``. The first ALS solve uses cold random restarts;
    later ones warm-start from the previous low-rank iterate.

    Returns
    -------
    lowrank : LowRankCoef
        The final (untrimmed) ALS iterate.
    sparse : SparseCoef
    report : LrsReport
    """
    data = ar_data(series, P)
    y, x = data.response_rows(), data.covariate_rows()
    n, q = y.shape
    dims = data.response_dims
    alpha = default_alpha(P, q) if config.alpha_L is None else config.alpha_L
    zeta = trim_level(alpha, P, q)
    gram = x.T @ x / n
    als_cfg = config.als_config

    if init is None:
        rng = restart_rngs(als_cfg.rng_seed, 1)[0]
        state = random_init(dims, P, R_y, R_x, rng, data=data)
        low = state.coef_matrix(P)
        lowrank = None
    else:
        lowrank = init
        low = assemble_coef(init)

    sparse = np.zeros((q, P * q))
    trace, als_iters = [], []
    converged = False
    k = 0
    for k in range(1, config.outer_iters + 1):
        corr = (y - x @ trim(low, zeta).T).T @ x / n
        new_sparse, _ = lasso_cd(corr, gram, config.lam, start=sparse,
                                 tol=config.lasso_tol, max_sweeps=config.lasso_max_sweeps)
        if k > 1 and np.array_equal(new_sparse, sparse):
            # Same ALS subproblem as last time; its solution is unchanged.
            converged = True
            break
        sparse = new_sparse
        resid_data = data.with_response_rows(y - x @ sparse.T)
        if lowrank is None:
            lowrank, rep = als_fit_data(resid_data, R_y, R_x, als_cfg, lag_order=P)
        else:
            sub = AlsConfig(als_cfg.max_iters, als_cfg.rel_tol, 1, als_cfg.rng_seed)
            lowrank, rep = als_fit_data(resid_data, R_y, R_x, sub, init=lowrank, lag_order=P)
        als_iters.append(rep.iterations)
        low = assemble_coef(lowrank)
        resid = y - x @ (low + sparse).T
        trace.append(float(np.sum(resid * resid) / n) + config.lam * l1_norm(sparse))
        if len(trace) > 1 and abs(trace[-2] - trace[-1]) / max(trace[-2], 1e-12) < config.outer_tol:
            converged = True
            break
    if lowrank is None:
        raise FitError("low-rank plus sparse fit produced no low-rank iterate")
    report = LrsReport(trace, k, converged,
                       bool(np.max(np.abs(low)) <= zeta * (1 + 1e-12)),
                       config.lam, alpha, als_iters)
    return lowrank, SparseCoef.from_matrix(sparse, dims, P), report
