"""Belief control barrier functions over Gaussian (EKF) beliefs."""

from .barrier import BarrierConstraint, SafetyFilter, filter_control, gamma_margin, natural_bound
from .belief_dynamics import SystemModel, hybrid_step, kalman_update, linear_observation
from .gaussian_belief import GaussianBelief, RiskHalfSpace, var_value
from .scenario import Scenario, load_scenario
from .simulate import bound_report, monte_carlo, simulate

__version__ = "0.1.0"
