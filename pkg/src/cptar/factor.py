"""
CP-based low-rank coefficient structure and its feature-extraction reading.

The coefficient of the shared-lag autoregression is stored in the
reparameterized form ``[A]_n = Lambda_y G (I_P kron Lambda_x^T)`` where both
loading matrices are Khatri-Rao chains of unit-column factors.
"""
from dataclasses import dataclass, field
import warnings

import numpy as np

from .tensor import khatri_rao_chain, vectorize

VARIANTS = ("ar_shared_lags", "stacked_lag_mode", "regression")

_UNIT_TOL = 1e-8


@dataclass(frozen=True)
class CPLoadingSet:
    """Factor matrices ``[F_1, ..., F_n]`` with unit-norm columns."""

    factors: tuple

    def __post_init__(self):
        factors = tuple(np.array(f, dtype=float, ndmin=2) for f in self.factors)
        if not factors:
            raise ValueError("a loading set needs at least one factor")
        ranks = {f.shape[1] for f in factors}
        if len(ranks) != 1:
            raise ValueError(f"factors disagree on rank: {sorted(ranks)}")
        for i, f in enumerate(factors):
            norms = np.linalg.norm(f, axis=0)
            if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
                raise ValueError(f"factor {i + 1} does not have unit-norm columns")
            f.setflags(write=False)
        object.__setattr__(self, "factors", factors)

    @property
    def dims(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def rank(self):
        return self.factors[0].shape[1]

    @property
    def order(self):
        return len(self.factors)

    def __len__(self):
        return len(self.factors)


def assemble_lambda(loadings):
    """``F_n (.) ... (.) F_1``; column r is ``vec(f_r^(1) o ... o f_r^(n))``."""
    factors = loadings.factors if isinstance(loadings, CPLoadingSet) else loadings
    return khatri_rao_chain(factors)


@dataclass(frozen=True)
class LowRankCoef:
    """Low-rank coefficient ``(response loadings, G, covariate loadings, P)``.

    ``variant`` selects how the covariate side is laid out:

    * ``ar_shared_lags``: covariate dims equal response dims, ``G`` is
      ``R_y x (P R_x)`` and one ``Lambda_x`` is shared by every lag.
    * ``stacked_lag_mode``: the lags form an extra leading mode of size ``P``
      in the covariate tensor; ``G`` is ``R_y x R_x``.
    * ``regression``: generic tensor-on-tensor regression, ``G`` is
      ``R_y x R_x`` and ``lag_order`` is 1.
    """

    response: CPLoadingSet
    core: np.ndarray
    covariate: CPLoadingSet
    lag_order: int = 1
    variant: str = "ar_shared_lags"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.lag_order < 1:
            raise ValueError("lag order must be >= 1")
        core = np.array(self.core, dtype=float, ndmin=2)
        expected = (self.response.rank, self.n_blocks * self.covariate.rank)
        if core.shape != expected:
            raise ValueError(f"core has shape {core.shape}, expected {expected}")
        if not np.all(np.isfinite(core)):
            raise ValueError("core has non-finite entries")
        if self.variant == "stacked_lag_mode" and self.covariate.dims[0] != self.lag_order:
            raise ValueError("stacked_lag_mode needs the lag mode first in covariate dims")
        core.setflags(write=False)
        object.__setattr__(self, "core", core)

    @property
    def n_blocks(self):
        return self.lag_order if self.variant == "ar_shared_lags" else 1

    @property
    def response_dims(self):
        return self.response.dims

    @property
    def covariate_dims(self):
        return self.covariate.dims

    @property
    def ranks(self):
        return self.response.rank, self.covariate.rank

    def with_core(self, core):
        return LowRankCoef(self.response, core, self.covariate,
                           self.lag_order, self.variant)

    def lag_cores(self):
        """``[G_1, ..., G_P]`` for the shared-lag variant."""
        rx = self.covariate.rank
        return [self.core[:, k * rx:(k + 1) * rx] for k in range(self.n_blocks)]


def assemble_coef(coef):
    """Return ``[A]_n``.

    ``Lambda_y G (I_P kron Lambda_x^T)`` (``Q x PQ``) for the shared-lag
    variant, ``Lambda_y G Lambda_x^T`` otherwise.
    """
    return assemble_from_factors(coef.response.factors, coef.core,
                                 coef.covariate.factors, coef.n_blocks)


def assemble_from_factors(u_factors, core, v_factors, n_blocks=1):
    """``[A]_n`` from raw (not necessarily unit-column) factors."""
    lam_y = khatri_rao_chain(u_factors)
    lam_x = khatri_rao_chain(v_factors)
    core = np.atleast_2d(core)
    rx = lam_x.shape[1]
    return np.hstack([lam_y @ core[:, k * rx:(k + 1) * rx] @ lam_x.T
                      for k in range(n_blocks)])


def ar_matrix(coef):
    """Lag-block coefficient ``([A_1]_n, ..., [A_P]_n)`` of an AR variant.

    For ``stacked_lag_mode`` the native column order (lag index fastest) is
    permuted into lag blocks.
    """
    if coef.variant == "regression":
        raise ValueError("a regression coefficient has no lag blocks")
    a = assemble_coef(coef)
    if coef.variant == "stacked_lag_mode":
        p = coef.lag_order
        q = a.shape[1] // p
        a = a.reshape(a.shape[0], p, q, order="F").transpose(0, 2, 1)
        a = a.reshape(a.shape[0], -1, order="F")
    return a


def original_core(coef):
    """``(Lambda_y^T Lambda_y) G``: the core before the reparameterization that
    absorbs ``(Lambda_y^T Lambda_y)^{-1}``. For interpretation output only."""
    lam_y = assemble_lambda(coef.response)
    gram = lam_y.T @ lam_y
    if np.linalg.cond(gram) > 1e12:
        raise np.linalg.LinAlgError("Lambda_y^T Lambda_y is not invertible")
    return gram @ coef.core


def check_nondegenerate(loadings, tol=1e-10):
    """Warn when the assembled loading matrix is numerically rank deficient.

    Returns the smallest singular value.
    """
    smin = np.linalg.svd(assemble_lambda(loadings), compute_uv=False)[-1]
    if smin <= tol:
        warnings.warn(f"degenerate loading tensors (smallest singular value {smin:.3g})",
                      RuntimeWarning, stacklevel=2)
    return float(smin)


def _check_shape(t, dims, what):
    t = np.asarray(t, dtype=float)
    if t.shape != tuple(dims):
        raise ValueError(f"{what} has shape {t.shape}, expected {tuple(dims)}")
    return t


def extract_response_features(loadings, y):
    """Response features ``Lambda_y^T vec(y)``."""
    if isinstance(loadings, LowRankCoef):
        loadings = loadings.response
    y = _check_shape(y, loadings.dims, "response tensor")
    return assemble_lambda(loadings).T @ vectorize(y)


def extract_covariate_features(loadings, lagged):
    """Concatenated covariate features ``Lambda_x^T vec(Y_{t-k})``, k = 1..P.

    ``lagged[0]`` is the most recent lag.
    """
    if isinstance(loadings, LowRankCoef):
        if len(lagged) != loadings.n_blocks:
            raise ValueError(f"expected {loadings.n_blocks} lagged tensors, got {len(lagged)}")
        loadings = loadings.covariate
    lam_x = assemble_lambda(loadings)
    return np.concatenate(
        [lam_x.T @ vectorize(_check_shape(x, loadings.dims, "lagged tensor"))
         for x in lagged])


def stack_lags(lagged, variant="ar_shared_lags"):
    """Stacked covariate vector; lag-block order (most recent first) for the
    shared-lag layout, lag-fastest order for ``stacked_lag_mode``."""
    arrs = [np.asarray(x, dtype=float) for x in lagged]
    if variant == "stacked_lag_mode":
        return vectorize(np.stack(arrs, axis=0))
    return np.concatenate([vectorize(x) for x in arrs])


def predict_one_step(coef, lagged, sparse=None):
    """One-step prediction ``sum_k <A_k, Y_{t-k}>`` (plus the sparse part).

    Parameters
    ----------
    coef : LowRankCoef
    lagged : sequence of arrays
        ``[Y_{t-1}, ..., Y_{t-P}]`` for the AR variants, ``[X_t]`` for
        ``regression``.
    sparse : SparseCoef, optional
        Added to the low-rank coefficient in lag-block order.
    """
    lagged = list(lagged)
    n_expected = 1 if coef.variant == "regression" else coef.lag_order
    if len(lagged) != n_expected:
        raise ValueError(f"expected {n_expected} lagged tensors, got {len(lagged)}")
    cov_dims = coef.covariate_dims
    if coef.variant == "stacked_lag_mode":
        cov_dims = cov_dims[1:]
    for x in lagged:
        _check_shape(x, cov_dims, "lagged tensor")
    # Feature route: Lambda_y (G f_cov), never forms the Q x PQ matrix.
    if coef.variant == "stacked_lag_mode":
        feats = assemble_lambda(coef.covariate).T @ stack_lags(lagged, coef.variant)
    else:
        feats = extract_covariate_features(coef.covariate, lagged)
    pred = assemble_lambda(coef.response) @ (coef.core @ feats)
    if sparse is not None:
        pred = pred + sparse.to_matrix() @ stack_lags(lagged)
    return pred.reshape(coef.response_dims, order="F")


@dataclass
class TensorSeries:
    """Time-ordered observations stored as an array of shape ``(T, q_1, ..., q_n)``."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim < 2:
            raise ValueError("series data needs a time axis and at least one mode")
        if data.shape[0] < 1:
            raise ValueError("series must contain at least one observation")
        self.data = data

    @classmethod
    def from_list(cls, observations):
        obs = [np.asarray(o, dtype=float) for o in observations]
        if not obs:
            raise ValueError("series must contain at least one observation")
        shapes = {o.shape for o in obs}
        if len(shapes) != 1:
            raise ValueError(f"observations disagree on shape: {sorted(shapes)}")
        return cls(np.stack(obs))

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, t):
        return self.data[t]

    @property
    def dims(self):
        return self.data.shape[1:]

    @property
    def Q(self):
        return int(np.prod(self.dims))

    def head(self, t):
        """Observations ``1..t``."""
        return TensorSeries(self.data[:t])

    def vec_rows(self):
        """``T x Q`` matrix with row t equal to ``vec(Y_t)``."""
        return self.data.reshape(len(self), -1, order="F")

    def lagged(self, t, P):
        """``[Y_{t-1}, ..., Y_{t-P}]`` preceding 0-based index ``t``."""
        if t < P:
            raise ValueError(f"need {P} lags before index {t}")
        return [self.data[t - k] for k in range(1, P + 1)]
