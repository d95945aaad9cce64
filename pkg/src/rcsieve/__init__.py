"""Conditional random coefficient densities via sieve estimation with forest-learned coefficients."""

from .basis import HermiteBasis, basis_eval, fourier_basis_eval, hermite_eval, basis_derivative
from .forest import ForestParams, fit_regressor, predict, predict_variance, split_importance
from .pipeline import (ConditionalDensityModel, Dataset, SieveConfig, estimate_beta,
                       evaluate_density, fit_conditional_density, marginal_density,
                       slope_density, variable_importance)
from .inference import DensityBand, confidence_band, sigma_matrix, standard_error
from .tuning import TuningGrid, cv_criterion, kernel_density_w, select_tuning
from .simlab import (DgpSpec, McReport, generate_dgp1, generate_dgp2, run_monte_carlo,
                     true_conditional_density)
from .transforms import build_measure, q_inverse, q_matrix, t_operator, v_operator

__version__ = "0.1.0"
