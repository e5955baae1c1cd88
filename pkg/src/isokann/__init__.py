"""ISOKANN: learn the dominant Koopman eigenfunction (chi) of overdamped
Langevin systems by Monte Carlo power iteration, with Girsanov-reweighted
importance sampling driven by the current chi."""

from ._backend import BACKEND, get_threads, set_threads
from .errors import (CatalogError, CheckpointError, ConfigError, ConvergenceError, DegeneracyError,
                     DimensionError, DivergenceError, EstimateError, IsokannError, NonFiniteError,
                     RegimeError)
from .isokann import (LoopConfig, LoopReport, chi_discrepancy, chi_stratified_resample, gauge_align,
                      run_isokann)
from .koopman import (KoopmanEstimate, ShiftScaleParams, affine_fit, estimate_points, mc_koopman,
                      rate_from_params, relaxation_rate, shift_scale)
from .model import (AffineChi, ChiModel, OptimizerState, checkpoint_load, checkpoint_save,
                    default_dims, fit, init_model, train_batch)
from .oracle import build_generator, oracle_chi, propagate
from .sampling import (ChiControl, ConstantControl, ZeroControl, effective_sample_size,
                       optimal_control_from_chi, variance_study, weight_diagnostics)
from .sde import CATALOG, ControlledPath, PotentialSystem, SimConfig, catalog_potential, simulate

__version__ = "0.1.0"
