"""Coordinate-independent identification of inverse-dynamics parameters.

Residual forces are covectors, so they are measured with the dual of the
mechanism's own metric (mass matrix or drag matrix).  The resulting
least-squares objective is rational in the parameters; a Schur-complement
epigraph turns it into a semidefinite program solved by :mod:`dualid.sdp`.
"""

from .estimators import (
    ALL_KINDS,
    EstimatorKind,
    EstimatorReport,
    EstimatorSpec,
    Regression,
    build_regression,
    fit,
    fit_dual_metric,
    fit_energy,
    fit_ols,
    fit_regularized,
    fit_wls,
)
from .evaluate import (
    EvalReport,
    evaluate_estimate,
    identifiable_projection,
    invariance_probe,
    ncc_max_shift,
    predict_forward,
)
from .mechanisms import DragCrawler3, PanTilt, TwoLinkArm, from_description
from .model import Dataset, DynamicParams, ModelClass, ModelError, SingularConfigurationError, dual_norm_sq
from .simulate import NoiseSpec, add_noise, downsample, random_excitation, rescale_chart, simulate_inverse

__version__ = "0.1.0"
