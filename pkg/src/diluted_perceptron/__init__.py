"""Diluted perceptron spin glass at desk scale."""

__version__ = "0.1.0"

from .errors import CapacityError, NumericalError, ParameterError
from .model import BoundedPotential, Instance, ModelParams, check_conditions, sample_instance
from .exact_gibbs import cavity_check, disorder_average, enumerate_gibbs
from .fixed_point import PopulationMeasure, apply_T, cavity_ratio, contraction_test, solve_fixed_point
from .transport import w1_cdf, w1_joint, w1_sorted
from .free_energy import build_rs_curve, compare_pN_vs_F, estimate_G, magnetization_law_test, vbar

__all__ = [
    "BoundedPotential", "CapacityError", "Instance", "ModelParams", "NumericalError",
    "ParameterError", "PopulationMeasure", "apply_T", "build_rs_curve", "cavity_check",
    "cavity_ratio", "check_conditions", "compare_pN_vs_F", "contraction_test",
    "disorder_average", "enumerate_gibbs", "estimate_G", "magnetization_law_test",
    "sample_instance", "solve_fixed_point", "vbar", "w1_cdf", "w1_joint", "w1_sorted",
]
