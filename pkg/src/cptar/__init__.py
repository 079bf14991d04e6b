"""CP-based low-rank (plus sparse) autoregression for tensor-valued time series."""
from .tensor import (DegenerateFactorError, as_tensor, col_norm, inv_seq_matricize,
                     khatri_rao, khatri_rao_chain, kronecker, mode_matricize,
                     outer_rank1, seq_matricize, solve_least_squares, support_size,
                     vectorize)
from .factor import (CPLoadingSet, LowRankCoef, TensorSeries, assemble_coef,
                     assemble_lambda, extract_covariate_features,
                     extract_response_features, predict_one_step)
from .als import (AlsConfig, FitError, FitReport, als_fit, loss, random_init,
                  update_G, update_U_block, update_V_block)
from .lrs import (LAMBDA_GRID, LrsConfig, SparseCoef, lasso_step, lrs_fit,
                  penalized_objective, trim)
from .selection import (FittedModel, ForecastReport, HoldoutPlan, forecast_metrics,
                        holdout_select, rolling_forecast, select_lrs)
from .simulation import (DgpSpec, RateDiagnostics, check_stationarity, d_ar, d_c,
                         draw_coefficients, gen_errors, gen_lowrank_coef, gen_lrs_coef,
                         gen_sparse_coef, noise_free_data, run_rate_experiment,
                         simulate_series, tpr_fpr)

__version__ = "0.1.0"
