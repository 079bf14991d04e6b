"""
Alternating least squares for the CP-based low-rank autoregression.

Every block (``U_i``, ``V_j``, ``G``) is updated by an exact least-squares
solve. Factor updates accumulate normal equations from cached unfoldings of
the data, so the ``(T - P) Q``-row design matrices are never formed; the core
update uses the factored pseudo-inverse of its Kronecker design.
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from .factor import CPLoadingSet, LowRankCoef, TensorSeries, assemble_from_factors
from .tensor import (DegenerateFactorError, col_norm, khatri_rao_chain, solve_least_squares,
                     solve_normal)

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Every restart of an estimator failed."""


@dataclass(frozen=True)
class AlsConfig:
    max_iters: int = 200
    rel_tol: float = 1e-6
    num_restarts: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.num_restarts < 1:
            raise ValueError("num_restarts must be >= 1")


@dataclass
class FitReport:
    final_loss: float
    loss_trace: list
    iterations: int
    converged: bool
    restart_index: int
    restart_losses: list = field(default_factory=list)
    singular_design: bool = False
    failed_restarts: int = 0

    def to_dict(self):
        return {
            "final_loss": self.final_loss,
            "loss_trace": list(self.loss_trace),
            "iterations": self.iterations,
            "converged": self.converged,
            "restart_index": self.restart_index,
            "restart_losses": list(self.restart_losses),
            "singular_design": self.singular_design,
            "failed_restarts": self.failed_restarts,
        }


# ---------------------------------------------------------------------------
# Regression data: a response window and K covariate windows over cached
# source arrays.


class _Source:
    """An array of shape ``(L, d_1, ..., d_m)`` with cached flattenings."""

    def __init__(self, arr):
        self.arr = np.ascontiguousarray(arr, dtype=float)
        self._rows = None
        self._unfolded = {}

    @property
    def dims(self):
        return self.arr.shape[1:]

    def rows(self):
        if self._rows is None:
            self._rows = self.arr.reshape(self.arr.shape[0], -1, order="F")
        return self._rows

    def unfolded(self, j):
        # Rows are (t, i_j) pairs (t slowest); columns run over the other modes
        # first-index-fastest, matching the Khatri-Rao chain of the other factors.
        if j not in self._unfolded:
            m = self.arr.ndim - 1
            others = [l for l in range(m) if l != j]
            axes = [0, j + 1] + [l + 1 for l in reversed(others)]
            self._unfolded[j] = self.arr.transpose(axes).reshape(
                self.arr.shape[0] * self.arr.shape[j + 1], -1)
        return self._unfolded[j]


@dataclass
class RegressionData:
    """Paired samples ``(Y_t, X_t^(1), ..., X_t^(K))`` for the ALS engine.

    Built with :func:`ar_data`, :func:`stacked_data` or
    :func:`regression_data`; ``blocks`` share one covariate loading.
    """

    response: tuple
    blocks: list
    n_samples: int

    @property
    def response_dims(self):
        return self.response[0].dims

    @property
    def covariate_dims(self):
        return self.blocks[0][0].dims

    @property
    def n_blocks(self):
        return len(self.blocks)

    def response_rows(self):
        src, s = self.response
        return src.rows()[s:s + self.n_samples]

    def response_unfolded(self, i):
        src, s = self.response
        q = src.dims[i]
        return src.unfolded(i)[s * q:(s + self.n_samples) * q]

    def block_rows(self, k):
        src, s = self.blocks[k]
        return src.rows()[s:s + self.n_samples]

    def block_unfolded(self, k, j):
        src, s = self.blocks[k]
        p = src.dims[j]
        return src.unfolded(j)[s * p:(s + self.n_samples) * p]

    def covariate_rows(self):
        """``N x (K p)`` stacked covariates, block 1 first."""
        return np.hstack([self.block_rows(k) for k in range(self.n_blocks)])

    def with_response_rows(self, rows):
        """Same covariates, responses replaced by ``rows`` (``N x Q``)."""
        arr = np.asarray(rows, dtype=float).reshape(
            (self.n_samples,) + tuple(self.response_dims), order="F")
        return RegressionData((_Source(arr), 0), self.blocks, self.n_samples)


def _series_array(series):
    return series.data if isinstance(series, TensorSeries) else np.asarray(series, dtype=float)


def ar_data(series, P):
    """Shared-lag AR(P) samples: response ``Y_t``, blocks ``Y_{t-1}, ..., Y_{t-P}``."""
    arr = _series_array(series)
    T = arr.shape[0]
    if T <= P:
        raise ValueError(f"series length {T} must exceed lag order {P}")
    src = _Source(arr)
    return RegressionData((src, P), [(src, P - k) for k in range(1, P + 1)], T - P)


def stacked_data(series, P):
    """AR(P) samples with the lags stacked into a leading mode of size ``P``."""
    arr = _series_array(series)
    T = arr.shape[0]
    if T <= P:
        raise ValueError(f"series length {T} must exceed lag order {P}")
    lags = np.stack([arr[P - k:T - k] for k in range(1, P + 1)], axis=1)
    return RegressionData((_Source(arr), P), [(_Source(lags), 0)], T - P)


def regression_data(responses, covariates):
    """Tensor-on-tensor regression samples; leading axis indexes samples."""
    y = np.asarray(responses, dtype=float)
    x = np.asarray(covariates, dtype=float)
    if y.shape[0] != x.shape[0]:
        raise ValueError("responses and covariates disagree on sample count")
    return RegressionData((_Source(y), 0), [(_Source(x), 0)], y.shape[0])


def lag_matrix(series, P):
    """``(T-P) x PQ`` stacked lags, most recent lag first."""
    return ar_data(series, P).covariate_rows()


def design_for(series, P, variant):
    if isinstance(series, RegressionData):
        return series
    if variant == "stacked_lag_mode":
        return stacked_data(series, P)
    if variant == "regression":
        raise ValueError("regression variant needs explicit RegressionData")
    return ar_data(series, P)


# ---------------------------------------------------------------------------
# Engine state and block updates.


@dataclass
class AlsState:
    """Raw ALS blocks; columns need not be normalized mid-cycle."""

    u: list
    core: np.ndarray
    v: list

    def copy(self):
        return AlsState([a.copy() for a in self.u], self.core.copy(),
                        [a.copy() for a in self.v])

    @classmethod
    def from_coef(cls, coef):
        return cls([np.array(f) for f in coef.response.factors],
                   np.array(coef.core),
                   [np.array(f) for f in coef.covariate.factors])

    def to_coef(self, lag_order, variant):
        return LowRankCoef(CPLoadingSet(self.u), self.core, CPLoadingSet(self.v),
                           lag_order, variant)

    def coef_matrix(self, n_blocks):
        return assemble_from_factors(self.u, self.core, self.v, n_blocks)


def _kr_others(factors, skip):
    others = [f for l, f in enumerate(factors) if l != skip]
    return khatri_rao_chain(others) if others else None


def _features(data, v):
    lam_x = khatri_rao_chain(v)
    return np.hstack([data.block_rows(k) @ lam_x for k in range(data.n_blocks)])


def _partial(unfolded, n, dim, kr, rank):
    # (N, dim, R): contraction with every factor except one.
    if kr is None:
        return np.broadcast_to(unfolded.reshape(n, dim, 1), (n, dim, rank))
    return (unfolded @ kr).reshape(n, dim, rank)


def _predictions(data, state):
    z = _features(data, state.v)
    return z @ state.core.T @ khatri_rao_chain(state.u).T


def state_loss(data, state):
    """Mean squared residual norm of the state's coefficient on ``data``."""
    resid = data.response_rows() - _predictions(data, state)
    return float(np.sum(resid * resid) / data.n_samples)


def _u_update(data, state, i):
    n = data.n_samples
    ry = state.core.shape[0]
    xt = _features(data, state.v) @ state.core.T
    kr = _kr_others(state.u, i)
    q = data.response_dims[i]
    m = _partial(data.response_unfolded(i), n, q, kr, ry)
    rhs = np.einsum("tar,tr->ar", m, xt)
    gram_k = kr.T @ kr if kr is not None else np.ones((ry, ry))
    gram = gram_k * (xt.T @ xt)
    sol, rank = solve_normal(gram, rhs.T)
    return sol.T, rank < ry


def _v_update(data, state, j):
    n = data.n_samples
    ry, rx = state.core.shape[0], state.v[0].shape[1]
    p = data.covariate_dims[j]
    kr = _kr_others(state.v, j)
    # w[t, b, r, a] = sum_k G_k[b, r] * (partial contraction of Y_{t-k})[a, r]
    w = np.zeros((n, ry, rx, p))
    for k in range(data.n_blocks):
        m = _partial(data.block_unfolded(k, j), n, p, kr, rx)
        w += state.core[None, :, k * rx:(k + 1) * rx, None] * m.transpose(0, 2, 1)[:, None]
    w = w.reshape(n, ry, rx * p)
    lam_y = khatri_rao_chain(state.u)
    c = lam_y.T @ lam_y
    f = data.response_rows() @ lam_y
    flat = w.reshape(n * ry, rx * p)
    gram = flat.T @ np.matmul(c, w).reshape(n * ry, rx * p)
    rhs = flat.T @ f.reshape(n * ry)
    sol, rank = solve_normal(gram, rhs)
    return sol.reshape(rx, p).T, rank < rx * p


def _g_update(data, state):
    # The design is z kron Lambda_y, whose pseudo-inverse factors, so the
    # minimum-norm core is pinv(Lambda_y) Y^T pinv(z)^T without squaring
    # either condition number.
    z = _features(data, state.v)
    lam_y = khatri_rao_chain(state.u)
    w, rank_z = solve_least_squares(z, data.response_rows(), return_rank=True)
    core, rank_y = solve_least_squares(lam_y, w.T, return_rank=True)
    return core, rank_z < z.shape[1] or rank_y < lam_y.shape[1]


def _as_state(state):
    return AlsState.from_coef(state) if isinstance(state, LowRankCoef) else state


def update_U_block(state, i, series, P=None, variant="ar_shared_lags"):
    """Least-squares update of response factor ``U_i`` (1-based ``i``).

    All other blocks are held fixed. Returns the un-normalized factor.
    """
    data = design_for(series, P, variant)
    return _u_update(data, _as_state(state), i - 1)[0]


def update_V_block(state, j, series, P=None, variant="ar_shared_lags"):
    """Least-squares update of covariate factor ``V_j`` (1-based ``j``)."""
    data = design_for(series, P, variant)
    return _v_update(data, _as_state(state), j - 1)[0]


def update_G(state, series, P=None, variant="ar_shared_lags"):
    """Least-squares update of the core ``G`` given all loadings."""
    data = design_for(series, P, variant)
    return _g_update(data, _as_state(state))[0]


def loss(coef, series, P):
    """``(1/(T-P)) sum_t ||vec(Y_t) - [A]_n vec(X_t)||^2`` for a ``Q x PQ``
    coefficient in lag-block order."""
    coef = np.asarray(coef, dtype=float)
    data = ar_data(series, P)
    y = data.response_rows()
    x = data.covariate_rows()
    if coef.shape != (y.shape[1], x.shape[1]):
        raise ValueError(f"coefficient shape {coef.shape} does not match data "
                         f"({y.shape[1]}, {x.shape[1]})")
    resid = y - x @ coef.T
    return float(np.sum(resid * resid) / data.n_samples)


# ---------------------------------------------------------------------------
# Initialization and the full algorithm.


def random_init(dims, P, R_y, R_x, rng, data=None, covariate_dims=None, n_blocks=None):
    """Standard-normal factors with normalized columns; ``G`` by least squares.

    Parameters
    ----------
    dims : sequence of int
        Response dims ``q_1..q_n``.
    P : int
        Lag order; the core gets ``P * R_x`` columns unless ``n_blocks`` says
        otherwise.
    rng : numpy.random.Generator
    data : RegressionData, optional
        When given, ``G`` is the least-squares core for these loadings;
        otherwise ``G`` is left at zero.
    covariate_dims : sequence of int, optional
        Defaults to ``dims``.
    """
    covariate_dims = dims if covariate_dims is None else covariate_dims
    n_blocks = P if n_blocks is None else n_blocks
    u = [col_norm(rng.standard_normal((q, R_y))) for q in dims]
    v = [col_norm(rng.standard_normal((p, R_x))) for p in covariate_dims]
    state = AlsState(u, np.zeros((R_y, n_blocks * R_x)), v)
    if data is not None:
        state.core = _g_update(data, state)[0]
    return state


def _cycle(data, state):
    singular = False
    for i in range(len(state.u)):
        state.u[i], s = _u_update(data, state, i)
        singular |= s
    for j in range(len(state.v)):
        state.v[j], s = _v_update(data, state, j)
        singular |= s
    state.u = [col_norm(a) for a in state.u]
    state.v = [col_norm(a) for a in state.v]
    state.core, s = _g_update(data, state)
    return singular | s


def _run(data, state, config):
    trace = [state_loss(data, state)]
    converged = False
    singular = False
    it = 0
    for it in range(1, config.max_iters + 1):
        singular |= _cycle(data, state)
        trace.append(state_loss(data, state))
        prev, cur = trace[-2], trace[-1]
        if abs(prev - cur) / max(prev, 1e-12) < config.rel_tol:
            converged = True
            break
    return state, trace, it, converged, singular


def restart_rngs(seed, count):
    """Independent generator per restart, derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def als_fit_data(data, R_y, R_x, config=AlsConfig(), init=None, lag_order=1,
                 variant="ar_shared_lags", max_reinit=3):
    """Run the ALS algorithm on prepared :class:`RegressionData`.

    ``init`` (a :class:`LowRankCoef` or :class:`AlsState`) replaces the random
    initializations with a single warm start.
    """
    if R_y < 1 or R_x < 1:
        raise ValueError("ranks must be >= 1")
    if init is not None:
        starts = [lambda rng: _as_state(init).copy()]
        rngs = restart_rngs(config.rng_seed, 1)
    else:
        rngs = restart_rngs(config.rng_seed, config.num_restarts)
        starts = [None] * len(rngs)

    best = None
    restart_losses = []
    failed = 0
    for idx, (rng, start) in enumerate(zip(rngs, starts)):
        result = None
        for attempt in range(max_reinit + 1):
            try:
                if start is not None and attempt == 0:
                    state = start(rng)
                else:
                    state = random_init(data.response_dims, lag_order, R_y, R_x, rng,
                                        data=data, covariate_dims=data.covariate_dims,
                                        n_blocks=data.n_blocks)
                result = _run(data, state, config)
                break
            except DegenerateFactorError as exc:
                log.debug("restart %d attempt %d degenerate: %s", idx, attempt, exc)
        if result is None:
            failed += 1
            restart_losses.append(float("nan"))
            continue
        restart_losses.append(result[1][-1])
        if best is None or result[1][-1] < best[1][1][-1]:
            best = (idx, result)
    if best is None:
        raise FitError("every ALS restart hit a degenerate factor")
    idx, (state, trace, iters, converged, singular) = best
    coef = state.to_coef(lag_order, variant)
    report = FitReport(final_loss=trace[-1], loss_trace=trace, iterations=iters,
                       converged=converged, restart_index=idx,
                       restart_losses=restart_losses, singular_design=singular,
                       failed_restarts=failed)
    return coef, report


def als_fit(series, P, R_y, R_x, config=AlsConfig(), variant="ar_shared_lags", init=None):
    """Fit the low-rank AR(P) model by alternating least squares.

    Each cycle updates ``U_1..U_n`` then ``V_1..V_n`` (each using the blocks
    already updated in this cycle), normalizes every factor's columns, then
    refits ``G``. Cycles stop when the relative change of the post-``G`` loss
    drops below ``config.rel_tol``. The best of ``config.num_restarts`` random
    starts (by final loss) is returned.

    Returns
    -------
    coef : LowRankCoef
    report : FitReport
    """
    if variant == "regression":
        raise ValueError("use als_fit_data with regression_data for the regression variant")
    data = design_for(series, P, variant)
    return als_fit_data(data, R_y, R_x, config, init=init, lag_order=P, variant=variant)
