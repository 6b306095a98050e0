"""Infinite-horizon linear-quadratic control of conditional mean-field
systems with Markovian regime switching.

The workflow is: build and :func:`validate_model` a model, :func:`decompose`
it into two channels, solve the regularized or limit Riccati systems,
classify solvability, solve the adjoint equations for forcing signals and
check everything by simulation.
"""

__version__ = "0.1.0"

from .adjoint import AdjointSolution, analytic_value, check_range_condition, optimal_offset, solve_adjoint
from .chain import ChainPath, martingale_residual, simulate_chain, simulate_chains
from .errors import (LimitFailure, MarginalStabilityError, NotDissipativeError, NotFiniteError,
                     NotStabilizingError, RangeConditionError, ResonantDecayError,
                     SingularImprovementError, SolverError)
from .model import (DecomposedModel, ExpDecaySignal, FeedbackLaw, MarkovGenerator, MeanFieldModel,
                    ModelValidationError, decompose, example_model, feedback_shift, model_from_dict,
                    model_to_dict, read_model, validate_model)
from .riccati import (RiccatiSolution, SolvabilityReport, SweepResult, classify_solvability,
                      delta_sweep, policy_evaluate, solve_limit_are, solve_regularized_are,
                      solve_shifted)
from .sim import (CostEstimate, SimConfig, convexity_probe, estimate_cost, finite_horizon_oracle,
                  simulate_paths)
from .stability import StabilityCertificate, is_stabilizer, moment_abscissa
