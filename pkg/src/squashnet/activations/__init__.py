from .catalog import (ActivationSpec, AnalyticConvex, CriticalPoint, DirectWindow, Inflection,
                      Kink, MonotoneLimit, get_activation, names, parse_poly, poly)
from .identity import (DiffPoint, IdentityApproximator, build_identity_approx,
                       default_diff_point, identity_factory, verify_cond_id)
from .squash import (SigmoidalBase, StepApproximator, StepReport, build_sigmoidal_base,
                     build_step_approx, find_sigmoidal_window, make_step_factory,
                     normalized_base, step,
                     validate_window, verify_step_approx)

__all__ = [
    "ActivationSpec", "AnalyticConvex", "CriticalPoint", "DirectWindow", "Inflection", "Kink",
    "MonotoneLimit", "get_activation", "names", "parse_poly", "poly", "DiffPoint",
    "IdentityApproximator", "build_identity_approx", "default_diff_point", "identity_factory",
    "verify_cond_id", "SigmoidalBase", "StepApproximator", "StepReport", "build_sigmoidal_base",
    "build_step_approx", "find_sigmoidal_window", "make_step_factory", "normalized_base", "step", "validate_window",
    "verify_step_approx",
]
