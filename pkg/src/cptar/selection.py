"""
Rolling one-step forecasts, forecast metrics and hold-out grid selection.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import itertools
import logging
import math

import numpy as np

from .als import AlsConfig, als_fit
from .factor import LowRankCoef, TensorSeries, predict_one_step
from .lrs import LrsConfig, lrs_fit
from .simulation import d_ar

log = logging.getLogger(__name__)

ESTIMATORS = ("lowrank", "lrs", "stacked")
DEFAULT_GRID_MAX = 12


class ForecastError(RuntimeError):
    """Estimator failure inside a rolling forecast; ``step`` is the 0-based
    index of the observation being predicted."""

    def __init__(self, step, cause):
        super().__init__(f"fit for step {step} failed: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class FittedModel:
    """A fitted coefficient ready for one-step prediction."""

    lowrank: LowRankCoef
    sparse: object = None
    report: object = None

    @property
    def lag_order(self):
        return self.lowrank.lag_order

    def predict(self, lagged):
        return predict_one_step(self.lowrank, lagged, self.sparse)


def _as_model(fitted):
    if isinstance(fitted, FittedModel):
        return fitted
    if isinstance(fitted, LowRankCoef):
        return FittedModel(fitted)
    if hasattr(fitted, "predict") and hasattr(fitted, "lag_order"):
        return fitted
    raise TypeError(f"estimator returned {type(fitted).__name__}, not a fitted model")


@dataclass
class ForecastReport:
    """One-step forecasts of observations ``start..T-1`` (0-based).

    ``msfe`` is the mean over steps and entries of the squared error, so it
    is comparable across tensor sizes; ``mafe`` the same for absolute errors.
    """

    predictions: np.ndarray
    actual: np.ndarray
    start: int
    msfe: float
    mafe: float
    meta: dict = field(default_factory=lambda: {"normalization": "per-entry mean"})

    def __post_init__(self):
        if self.msfe < 0 or self.mafe < 0:
            raise ValueError("forecast errors must be non-negative")


def _as_array(x):
    return x.data if isinstance(x, TensorSeries) else np.asarray(x, dtype=float)


def forecast_metrics(pred, actual):
    """``(msfe, mafe)``: mean squared and mean absolute error per entry."""
    p, a = _as_array(pred), _as_array(actual)
    if p.shape != a.shape:
        raise ValueError(f"prediction shape {p.shape} differs from actual shape {a.shape}")
    if p.size == 0:
        raise ValueError("no forecasts to evaluate")
    err = p - a
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def rolling_forecast(series, fit_fn, start, warm_start=False, refit_every=1):
    """Expanding-window one-step-ahead forecasts.

    For each ``t`` in ``start..T-1`` the model is fitted on observations
    ``1..t`` and used to predict observation ``t+1``.

    Parameters
    ----------
    series : TensorSeries
    fit_fn : callable
        ``fit_fn(history)`` returns a :class:`FittedModel` (or a bare
        :class:`LowRankCoef`). With ``warm_start`` it is called as
        ``fit_fn(history, previous)``, ``previous`` being the last fit or
        ``None``.
    start : int
        Length of the first training window.
    refit_every : int
        Refit only every ``refit_every`` steps and reuse the latest fit in
        between; 1 refits at every step.
    """
    T = len(series)
    if not 1 <= start < T:
        raise ValueError(f"start must lie in [1, {T - 1}], got {start}")
    if refit_every < 1:
        raise ValueError("refit_every must be >= 1")
    model = None
    preds = []
    for n, t in enumerate(range(start, T)):
        if model is None or n % refit_every == 0:
            history = series.head(t)
            try:
                fitted = fit_fn(history, model) if warm_start else fit_fn(history)
                model = _as_model(fitted)
            except Exception as exc:
                raise ForecastError(t, exc) from exc
            if model.lag_order >= t:
                raise ValueError(f"start {start} must exceed the lag order {model.lag_order}")
        preds.append(model.predict(series.lagged(t, model.lag_order)))
    preds = np.stack(preds)
    actual = series.data[start:]
    msfe, mafe = forecast_metrics(preds, actual)
    return ForecastReport(preds, actual, start, msfe, mafe)


def make_fitter(kind, P, R_y, R_x, als_config=None, lam=None, alpha_L=None):
    """Closure ``fit(history, previous=None) -> FittedModel`` for one estimator.

    ``previous`` warm-starts the fit from an earlier model with a single
    restart.
    """
    if kind not in ESTIMATORS:
        raise ValueError(f"unknown estimator {kind!r}")
    cfg = als_config or AlsConfig()
    warm_cfg = AlsConfig(cfg.max_iters, cfg.rel_tol, 1, cfg.rng_seed)
    if kind == "lrs" and lam is None:
        raise ValueError("the lrs estimator needs lambda")

    def fit(history, previous=None):
        init = None if previous is None else previous.lowrank
        if kind == "lrs":
            lcfg = LrsConfig(lam=lam, alpha_L=alpha_L,
                             als_config=cfg if init is None else warm_cfg)
            low, sparse, rep = lrs_fit(history, P, R_y, R_x, lcfg, init=init)
            return FittedModel(low, sparse, rep)
        variant = "stacked_lag_mode" if kind == "stacked" else "ar_shared_lags"
        coef, rep = als_fit(history, P, R_y, R_x, cfg if init is None else warm_cfg,
                            variant=variant, init=init)
        return FittedModel(coef, None, rep)

    return fit


@dataclass(frozen=True)
class HoldoutPlan:
    """Train/validation split and the hyperparameter grids.

    Validation uses rolling one-step forecasts of observations
    ``train_len .. train_len + val_len - 1`` (0-based); ``test_len`` further
    observations after that are left untouched.
    """

    train_len: int
    val_len: int
    test_len: int = 0
    p_max: int = DEFAULT_GRID_MAX
    ry_max: int = DEFAULT_GRID_MAX
    rx_max: int = DEFAULT_GRID_MAX
    lambdas: tuple = None
    refit_every: int = 1

    def __post_init__(self):
        if self.train_len < 2 or self.val_len < 1 or self.test_len < 0:
            raise ValueError("train_len >= 2, val_len >= 1 and test_len >= 0 required")
        if min(self.p_max, self.ry_max, self.rx_max) < 1:
            raise ValueError("grid bounds must be >= 1")
        if self.refit_every < 1:
            raise ValueError("refit_every must be >= 1")
        if self.lambdas is not None:
            lams = tuple(float(v) for v in self.lambdas)
            if not lams or any(v <= 0 for v in lams):
                raise ValueError("lambda grid must be nonempty and positive")
            object.__setattr__(self, "lambdas", lams)

    def check(self, T):
        if self.train_len + self.val_len + self.test_len > T:
            raise ValueError(
                f"split {self.train_len}+{self.val_len}+{self.test_len} exceeds series length {T}")

    def configurations(self, kind="lowrank"):
        lams = (None,)
        if kind == "lrs":
            lams = self.lambdas or (None,)
        return list(itertools.product(range(1, self.p_max + 1), range(1, self.ry_max + 1),
                                      range(1, self.rx_max + 1), lams))


@dataclass
class SelectionResult:
    P: int
    R_y: int
    R_x: int
    lam: float
    scores: list

    @property
    def best(self):
        return (self.P, self.R_y, self.R_x) if self.lam is None else (
            self.P, self.R_y, self.R_x, self.lam)


def holdout_select(series, plan, kind="lowrank", als_config=None, alpha_L=None,
                   threads=1, orders=None):
    """Exhaustive hold-out search over ``(P, R_y, R_x[, lambda])``.

    Each configuration is scored by the rolling one-step MSFE over the
    validation window. The minimum wins; ties go to the smaller
    ``d_AR = P R_y R_x + (R_y + R_x) sum q_i`` and then to the
    lexicographically smaller configuration. Configurations whose fit fails
    score ``inf``. ``orders``, a collection of ``(P, R_y, R_x)``, restricts
    the grid.

    Returns
    -------
    SelectionResult
        ``scores`` holds one dict per configuration in grid order.
    """
    if kind not in ESTIMATORS:
        raise ValueError(f"unknown estimator {kind!r}")
    if kind == "lrs" and not plan.lambdas:
        raise ValueError("lrs selection needs a lambda grid")
    if not isinstance(series, TensorSeries):
        series = TensorSeries(series)
    plan.check(len(series))
    window = TensorSeries(series.data[:plan.train_len + plan.val_len])
    dims = series.dims
    configs = plan.configurations(kind)
    if orders is not None:
        keep = {tuple(o) for o in orders}
        configs = [c for c in configs if c[:3] in keep]
        if not configs:
            raise ValueError("no grid configuration matches the requested orders")

    def score(cfg):
        P, ry, rx, lam = cfg
        if P >= plan.train_len:
            return math.inf, "lag order exceeds training length"
        fit = make_fitter(kind, P, ry, rx, als_config, lam, alpha_L)
        try:
            rep = rolling_forecast(window, fit, plan.train_len, warm_start=True,
                                   refit_every=plan.refit_every)
        except (ForecastError, ValueError) as exc:
            log.warning("configuration %s failed: %s", cfg, exc)
            return math.inf, str(exc)
        return rep.msfe, ""

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(score, configs))
    else:
        results = [score(c) for c in configs]

    rows = []
    for (P, ry, rx, lam), (msfe, note) in zip(configs, results):
        rows.append({"P": P, "R_y": ry, "R_x": rx, "lambda": lam,
                     "d_ar": d_ar(dims, P, ry, rx), "msfe": msfe, "note": note})
    best = min(rows, key=lambda r: (r["msfe"], r["d_ar"], r["P"], r["R_y"], r["R_x"],
                                    -math.inf if r["lambda"] is None else r["lambda"]))
    if not math.isfinite(best["msfe"]):
        raise RuntimeError("every configuration failed")
    return SelectionResult(best["P"], best["R_y"], best["R_x"], best["lambda"], rows)


def select_lrs(series, plan, als_config=None, alpha_L=None, reuse=True, threads=1):
    """Hold-out selection for the low-rank plus sparse estimator.

    With ``reuse`` the orders ``(P, R_y, R_x)`` are chosen by the low-rank
    estimator first and only ``lambda`` is searched for the sparse model;
    otherwise all four are searched jointly. The returned ``scores`` hold
    the rows of every stage.
    """
    if not reuse:
        return holdout_select(series, plan, "lrs", als_config, alpha_L, threads)
    low = holdout_select(series, plan, "lowrank", als_config, threads=threads)
    res = holdout_select(series, plan, "lrs", als_config, alpha_L, threads,
                         orders=[low.best])
    res.scores = low.scores + res.scores
    return res
