"""Gray-box correction of approximate structural-dynamics models.

The toolkit estimates the unmodeled part of a governing equation as a
residual force with dual Bayesian filters, learns a state-to-residual map
with Gaussian-process regression, and re-injects that map into the
approximate model to predict responses under seen and unseen loadings.
"""

from .dynamics import (
    AugmentedState,
    BoucWen,
    DuffingChain,
    DuffingVanDerPol,
    SystemModel,
    eval_rhs,
    true_residual,
)
from .filters import (
    EstimateSeries,
    FilterInit,
    FilterNoiseConfig,
    build_linear_filter_model,
    build_nonlinear_filter_model,
    compute_ut_weights,
    run_dkf,
    run_dukf,
)
from .gpr import FeatureSpec, FitConfig, GpModel, fit, predict
from .pipeline import (
    CorrectedModel,
    FilterConfig,
    GpConfig,
    RunReport,
    build_corrected_model,
    estimate_residual,
    evaluate,
    predict_response,
)
from .sde import SimConfig, simulate_taylor15, synthesize_measurements
from .signals import (
    BandLimitedWhiteNoise,
    ExternalRecord,
    HammingModulatedNoise,
    Sinusoid,
    load_ground_motion,
    realize,
)
from .timeseries import TimeSeries

__version__ = "0.1.0"
