"""Stochastic Hamiltonian systems: most probable paths, tube probabilities and torus persistence.

Subpackages are thin and importable on their own; the names below are the
common entry points.
"""

__version__ = "0.1.0"

from .errors import (ChartSingularityError, ContractViolation, DomainExit, EmptyCurveError, IntegrationFailure,
                     InvalidParameters, NearSingularError, NumericDomainError, SamplingTooCoarse, StochKAMError)
from .hamiltonian import (HamiltonianSystem, NearlyIntegrable, deterministic_flow, from_action_angle, make_system,
                          symplectic_gradient, to_action_angle)
from .kam import (FrequencyVector, KAMParams, PersistenceReport, alpha_from_eta, diophantine_check,
                  frequency_estimate, torus_persistence_scan)
from .noise import DiffusionField, check_conditions, divergence_sigma, ito_drift_correction, make_field
from .om import ActionBreakdown, MPPResult, om_action, om_gradient, rate_function, solve_mpp, verify_theorem2
from .paths import DiscretePath
from .prob import (LDPCurve, MCEstimate, TubeSpec, ldp_curve, om_ratio_prediction, small_ball_oracle,
                   tube_probability_mc)
from .sde import BrownianPath, NoiseConfig, ensemble, integrate_stratonovich, sample_brownian
