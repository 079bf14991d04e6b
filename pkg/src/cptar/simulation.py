"""
Data-generating processes and Monte-Carlo rate experiments.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
import logging
import math

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .als import AlsConfig, FitError, als_fit, als_fit_data, ar_data
from .factor import LowRankCoef, TensorSeries, assemble_coef
from .lrs import LrsConfig, SparseCoef, default_alpha, lrs_fit, trim_level
from .tensor import col_norm

log = logging.getLogger(__name__)

ERROR_KINDS = ("uniform", "std_normal", "ar_correlated", "none")


class NonStationaryError(RuntimeError):
    """No stationary coefficient found within the resampling budget."""


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design.

    ``alpha_L`` switches coefficient generation to the low-rank plus sparse
    mode: the core is scaled so that ``||A_L||_inf = alpha_L / (P Q^2)`` and
    then both parts are scaled together so that ``||A_L + A_S||_F`` equals
    ``target_coef_norm``.
    """

    dims: tuple = (5, 5, 5)
    P: int = 2
    R_y: int = 3
    R_x: int = 2
    error_kind: str = "std_normal"
    target_coef_norm: float = 0.9
    sparse_support_size: int = 0
    alpha_L: float = None
    rng_seed: int = 0
    burn_in: int = 200
    max_resamples: int = 100

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.error_kind not in ERROR_KINDS:
            raise ValueError(f"unknown error kind {self.error_kind!r}")
        if not self.target_coef_norm > 0:
            raise ValueError("target_coef_norm must be positive")
        if self.sparse_support_size < 0 or self.sparse_support_size > self.P * self.Q ** 2:
            raise ValueError("sparse support size must lie in [0, P Q^2]")
        if self.alpha_L is not None and not self.alpha_L > 0:
            raise ValueError("alpha_L must be positive")

    @property
    def Q(self):
        return int(np.prod(self.dims))

    @property
    def lrs_mode(self):
        return self.alpha_L is not None


# ---------------------------------------------------------------------------
# Complexity measures.


def d_ar(dims, P, R_y, R_x):
    """Parameter count ``P R_y R_x + (R_y + R_x) sum q_i``."""
    return P * R_y * R_x + (R_y + R_x) * sum(dims)


def d_c(n, P, R_y, R_x):
    """Log factor ``log(n P^{1/2} R_y R_x^{1/2})``."""
    return math.log(n * math.sqrt(P) * R_y * math.sqrt(R_x))


def lrs_rate(dims, P, R_y, R_x, s, T):
    """``(d_c d_AR + s log(P Q^2)) / (T - P)``."""
    q = int(np.prod(dims))
    return (d_c(len(dims), P, R_y, R_x) * d_ar(dims, P, R_y, R_x)
            + s * math.log(P * q ** 2)) / (T - P)


# ---------------------------------------------------------------------------
# Coefficients.


def gen_lowrank_coef(spec, rng):
    """Random low-rank coefficient.

    Factors are standard normal with normalized columns; the standard-normal
    core is rescaled so that ``||A||_F = target_coef_norm`` or, in the
    low-rank plus sparse mode, ``||A_L||_inf = alpha_L / (P Q^2)``.
    """
    u = [col_norm(rng.standard_normal((q, spec.R_y))) for q in spec.dims]
    v = [col_norm(rng.standard_normal((q, spec.R_x))) for q in spec.dims]
    core = rng.standard_normal((spec.R_y, spec.P * spec.R_x))
    from .factor import CPLoadingSet
    coef = LowRankCoef(CPLoadingSet(u), core, CPLoadingSet(v), spec.P)
    a = assemble_coef(coef)
    if spec.lrs_mode:
        scale = trim_level(spec.alpha_L, spec.P, spec.Q) / np.max(np.abs(a))
    else:
        scale = spec.target_coef_norm / np.linalg.norm(a)
    return coef.with_core(core * scale)


def gen_sparse_coef(spec, rng):
    """``s`` distinct uniformly placed standard-normal entries (unscaled)."""
    q, s = spec.Q, spec.sparse_support_size
    mat = np.zeros((q, spec.P * q))
    if s:
        pos = rng.choice(mat.size, size=s, replace=False)
        vals = rng.standard_normal(s)
        vals[vals == 0] = 1.0
        mat.flat[pos] = vals
    return SparseCoef.from_matrix(mat, spec.dims, spec.P)


def rescale_joint(lowrank, sparse, target):
    """Scale both parts by one factor so that ``||A_L + A_S||_F = target``."""
    total = assemble_coef(lowrank) + sparse.to_matrix()
    c = target / np.linalg.norm(total)
    scaled = SparseCoef(sparse.dims, sparse.lag_order,
                        {k: c * v for k, v in sparse.entries.items()})
    return lowrank.with_core(lowrank.core * c), scaled


def gen_lrs_coef(spec, rng):
    """Low-rank and sparse parts, jointly rescaled to ``target_coef_norm``."""
    lowrank = gen_lowrank_coef(spec, rng)
    sparse = gen_sparse_coef(spec, rng)
    return rescale_joint(lowrank, sparse, spec.target_coef_norm)


def companion(coef, P):
    """``PQ x PQ`` companion matrix of a ``Q x PQ`` lag-block coefficient."""
    coef = np.asarray(coef, dtype=float)
    q = coef.shape[0]
    if coef.shape[1] != P * q:
        raise ValueError(f"coefficient shape {coef.shape} inconsistent with P={P}")
    b = np.zeros((P * q, P * q))
    b[:q] = coef
    b[q:, :-q] = np.eye((P - 1) * q)
    return b


def spectral_radius(mat):
    n = mat.shape[0]
    if n <= 512:
        return float(np.max(np.abs(scipy.linalg.eigvals(mat))))
    vals = scipy.sparse.linalg.eigs(mat, k=1, which="LM", tol=1e-10,
                                    return_eigenvectors=False)
    return float(np.abs(vals[0]))


def check_stationarity(coef, P):
    """Return ``(is_stationary, spectral_radius)`` of the companion matrix."""
    rho = spectral_radius(companion(coef, P))
    return rho < 1 - 1e-8, rho


def draw_coefficients(spec, rng):
    """Stationary coefficient draw ``(LowRankCoef, SparseCoef or None)``.

    Non-stationary draws are discarded and redrawn.
    """
    for _ in range(spec.max_resamples):
        if spec.lrs_mode:
            lowrank, sparse = gen_lrs_coef(spec, rng)
            total = assemble_coef(lowrank) + sparse.to_matrix()
        else:
            lowrank, sparse = gen_lowrank_coef(spec, rng), None
            total = assemble_coef(lowrank)
        if check_stationarity(total, spec.P)[0]:
            return lowrank, sparse
    raise NonStationaryError(f"no stationary draw in {spec.max_resamples} attempts")


# ---------------------------------------------------------------------------
# Errors and series.


@lru_cache(maxsize=16)
def _toeplitz_factor(q, rho=0.5):
    cov = scipy.linalg.toeplitz(rho ** np.arange(q))
    return np.linalg.cholesky(cov)


def gen_errors(spec, rng, count):
    """``count`` error tensors as an array of shape ``(count, *dims)``.

    Error kinds: ``uniform`` on (-0.5, 0.5), ``std_normal``,
    ``ar_correlated`` with ``Cov(vec E_t) = (0.5^{|i-j|})``, ``none``.
    """
    q = spec.Q
    if spec.error_kind == "uniform":
        e = rng.uniform(-0.5, 0.5, size=(count, q))
    elif spec.error_kind == "std_normal":
        e = rng.standard_normal((count, q))
    elif spec.error_kind == "ar_correlated":
        e = rng.standard_normal((count, q)) @ _toeplitz_factor(q).T
    else:
        e = np.zeros((count, q))
    return e.reshape((count,) + spec.dims, order="F")


def simulate_series(spec, lowrank, T, rng, sparse=None):
    """Run ``vec Y_t = sum_k A_k vec Y_{t-k} + vec E_t`` and keep the last ``T``.

    The recursion starts from zero and discards ``spec.burn_in`` steps. With
    ``error_kind='none'`` there is no excitation, so the first ``P`` states are
    drawn standard normal instead and no burn-in is applied.
    """
    coef = lowrank if isinstance(lowrank, np.ndarray) else assemble_coef(lowrank)
    if sparse is not None:
        coef = coef + sparse.to_matrix()
    P, q = spec.P, spec.Q
    ok, rho = check_stationarity(coef, P)
    if not ok:
        raise NonStationaryError(f"spectral radius {rho:.6f} >= 1")
    noiseless = spec.error_kind == "none"
    burn = 0 if noiseless else spec.burn_in
    total = T + burn
    e = gen_errors(spec, rng, total).reshape(total, q, order="F")
    y = np.zeros((total + P, q))
    if noiseless:
        y[:P] = rng.standard_normal((P, q))
    blocks = [coef[:, k * q:(k + 1) * q] for k in range(P)]
    for t in range(P, total + P):
        acc = e[t - P].copy()
        for k, a in enumerate(blocks, start=1):
            acc += a @ y[t - k]
        y[t] = acc
    if noiseless:
        out = y[:T]
    else:
        out = y[P + burn:]
    return TensorSeries(out.reshape((T,) + spec.dims, order="F"))


def noise_free_data(spec, lowrank, T, rng, sparse=None):
    """Regression samples whose responses are exactly ``[A]_n x_t``.

    The lags ``x_t`` come from a standard-normal-driven run of the same
    recursion, so they span the full covariate space; only the responses are
    noise free. (A noise-free recursion collapses onto the column space of
    ``[A]_n`` and cannot identify the coefficient.)
    """
    coef = lowrank if isinstance(lowrank, np.ndarray) else assemble_coef(lowrank)
    if sparse is not None:
        coef = coef + sparse.to_matrix()
    driven = replace(spec, error_kind="std_normal")
    data = ar_data(simulate_series(driven, coef, T, rng), spec.P)
    return data.with_response_rows(data.covariate_rows() @ coef.T)


# ---------------------------------------------------------------------------
# Support recovery.


def tpr_fpr(estimated, truth):
    """True and false positive rates of a sparse support estimate.

    An empty true support gives ``tpr = 1`` by convention.
    """
    if tuple(estimated.shape) != tuple(truth.shape):
        raise ValueError("sparse coefficients disagree on shape")
    est, tru = estimated.support(), truth.support()
    total = truth.Q * truth.lag_order * truth.Q
    tpr = len(est & tru) / len(tru) if tru else 1.0
    n_zero = total - len(tru)
    fpr = len(est - tru) / n_zero if n_zero else 0.0
    return tpr, fpr


# ---------------------------------------------------------------------------
# Rate experiments.

DESIGNS = ("vary_T", "vary_ranks", "vary_dims", "vary_alpha")


@dataclass
class RateDiagnostics:
    design: str
    estimator: str
    grid: list
    mean_errors: list
    abscissa: list
    d_ar: list
    d_c: list
    correlation: float
    slope: float
    intercept: float
    failures: list
    replications: int
    rows: list = field(default_factory=list)
    mean_tpr: list = field(default_factory=list)
    mean_fpr: list = field(default_factory=list)
    lam: list = field(default_factory=list)

    def summary_rows(self):
        out = []
        for i, g in enumerate(self.grid):
            row = {
                "cell": i, "value": g, "mean_error": self.mean_errors[i],
                "abscissa": self.abscissa[i], "d_ar": self.d_ar[i], "d_c": self.d_c[i],
                "failures": self.failures[i],
            }
            if self.mean_tpr:
                row["mean_tpr"] = self.mean_tpr[i]
                row["mean_fpr"] = self.mean_fpr[i]
            out.append(row)
        return out


def cell_spec(design, base, value):
    """Specialize ``base`` for one grid value of ``design``."""
    if design == "vary_T":
        return base
    if design == "vary_ranks":
        return replace(base, R_x=int(value), R_y=int(value) + 1)
    if design == "vary_dims":
        return replace(base, dims=(int(value),) * len(base.dims))
    if design == "vary_alpha":
        return replace(base, alpha_L=float(value) * default_alpha(base.P, base.Q))
    raise ValueError(f"unknown design {design!r}")


def _pearson(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or np.std(x) == 0 or np.std(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def lrs_lambda(spec, T, scale=1.0):
    """Penalty ``scale * sqrt(log(P Q^2) / (T - P))``."""
    return scale * math.sqrt(math.log(spec.P * spec.Q ** 2) / (T - spec.P))


def replicate(design, base, value, T, rep, estimator="lowrank", als_config=None,
              lam=None, lam_scale=1.0):
    """One simulate-and-fit replication; returns a result row (dict).

    With ``error_kind='none'`` the low-rank estimator is fitted to
    :func:`noise_free_data`. The replication draws coefficients, errors and
    restarts from a generator
    seeded by ``(base.rng_seed, rep)``, so every grid cell of a design sees
    the same random stream for a given replication index.
    """
    spec = cell_spec(design, base, value)
    rng = np.random.default_rng([spec.rng_seed, rep])
    lowrank, sparse = draw_coefficients(spec, rng)
    noiseless = spec.error_kind == "none" and estimator == "lowrank"
    if noiseless:
        data = noise_free_data(spec, lowrank, T, rng)
    else:
        series = simulate_series(spec, lowrank, T, rng, sparse=sparse)
    cfg = als_config or AlsConfig()
    cfg = AlsConfig(cfg.max_iters, cfg.rel_tol, cfg.num_restarts,
                    int(rng.integers(2 ** 31)))
    row = {"design": design, "value": value, "T": T, "rep": rep,
           "R_y": spec.R_y, "R_x": spec.R_x, "q": spec.dims[0]}
    if estimator == "lowrank":
        if noiseless:
            coef, rep_ = als_fit_data(data, spec.R_y, spec.R_x, cfg, lag_order=spec.P)
        else:
            coef, rep_ = als_fit(series, spec.P, spec.R_y, spec.R_x, cfg)
        row["error"] = float(np.linalg.norm(assemble_coef(coef) - assemble_coef(lowrank)))
        row["iterations"] = rep_.iterations
    else:
        this_lam = lam if lam is not None else lrs_lambda(spec, T, lam_scale)
        lcfg = LrsConfig(lam=this_lam, alpha_L=spec.alpha_L, als_config=cfg)
        est_l, est_s, rep_ = lrs_fit(series, spec.P, spec.R_y, spec.R_x, lcfg)
        err_l = np.linalg.norm(assemble_coef(est_l) - assemble_coef(lowrank)) ** 2
        err_s = np.linalg.norm(est_s.to_matrix() - sparse.to_matrix()) ** 2
        row["error"] = float(err_l + err_s)
        row["tpr"], row["fpr"] = tpr_fpr(est_s, sparse)
        row["lambda"] = this_lam
        row["iterations"] = rep_.outer_iterations
    return row


def run_rate_experiment(design, base, grid, replications, estimator="lowrank",
                        T=1000, als_config=None, lam=None, lam_scale=1.0, threads=1):
    """Monte-Carlo sweep over ``grid`` for one design.

    Parameters
    ----------
    design : {'vary_T', 'vary_ranks', 'vary_dims', 'vary_alpha'}
        ``grid`` holds sample sizes, ``R_x`` values (``R_y = R_x + 1``),
        common dimensions ``q_i``, or multipliers of ``P^{1/2} Q`` for
        ``alpha_L`` respectively.
    base : DgpSpec
    estimator : {'lowrank', 'lrs'}
        ``lowrank`` records ``||A_hat - A||_F``; ``lrs`` records
        ``||A_L_hat - A_L||_F^2 + ||A_S_hat - A_S||_F^2`` plus TPR and FPR.
    T : int
        Sample size for every design except ``vary_T``.
    lam : float, optional
        Fixed penalty for ``lrs``; by default it follows
        ``lam_scale * sqrt(log(P Q^2) / (T - P))``.

    Returns
    -------
    RateDiagnostics
        The abscissa is ``1/sqrt(T-P)`` (vary_T, lowrank),
        ``sqrt(d_AR d_c)`` (ranks/dims, lowrank) or the low-rank plus sparse
        rate ``(d_c d_AR + s log(PQ^2))/(T-P)``; ``correlation`` is Pearson's
        r between the cell means and the abscissa.
    """
    if design not in DESIGNS:
        raise ValueError(f"unknown design {design!r}")
    jobs = []
    for value in grid:
        cell_T = int(value) if design == "vary_T" else T
        for rep in range(replications):
            jobs.append((value, cell_T, rep))

    def work(job):
        value, cell_T, rep = job
        try:
            return replicate(design, base, value, cell_T, rep, estimator,
                             als_config, lam, lam_scale)
        except (FitError, NonStationaryError, np.linalg.LinAlgError) as exc:
            log.warning("replication %s failed: %s", job, exc)
            return {"design": design, "value": value, "T": cell_T, "rep": rep,
                    "error": float("nan"), "failed": str(exc)}

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(work, jobs))
    else:
        rows = [work(j) for j in jobs]

    means, absc, dars, dcs, fails, tprs, fprs, lams = [], [], [], [], [], [], [], []
    for value in grid:
        spec = cell_spec(design, base, value)
        cell_T = int(value) if design == "vary_T" else T
        cell = [r for r in rows if r["value"] == value]
        errs = np.array([r["error"] for r in cell])
        ok = np.isfinite(errs)
        fails.append(int(np.sum(~ok)))
        means.append(float(np.mean(errs[ok])) if ok.any() else float("nan"))
        dar = d_ar(spec.dims, spec.P, spec.R_y, spec.R_x)
        dc = d_c(len(spec.dims), spec.P, spec.R_y, spec.R_x)
        dars.append(dar)
        dcs.append(dc)
        if estimator == "lrs":
            absc.append(lrs_rate(spec.dims, spec.P, spec.R_y, spec.R_x,
                                 spec.sparse_support_size, cell_T))
            good = [r for r in cell if "tpr" in r]
            tprs.append(float(np.mean([r["tpr"] for r in good])) if good else float("nan"))
            fprs.append(float(np.mean([r["fpr"] for r in good])) if good else float("nan"))
            lams.append(good[0]["lambda"] if good else float("nan"))
        elif design == "vary_T":
            absc.append(1.0 / math.sqrt(cell_T - spec.P))
        else:
            absc.append(math.sqrt(dar * dc))
    # Errors at round-off level carry no trend; report the correlation as undefined.
    corr = _pearson(absc, means) if np.nanmax(means) > 1e-10 else float("nan")
    if np.isfinite(corr):
        slope, intercept = np.polyfit(absc, means, 1)
    else:
        slope = intercept = float("nan")
    return RateDiagnostics(design, estimator, list(grid), means, absc, dars, dcs,
                           corr, float(slope), float(intercept), fails, replications,
                           rows, tprs, fprs, lams)
