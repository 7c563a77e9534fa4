"""Key rates for device-independent QKD with random post-selection."""

from .config import ConfigError, RunConfig, load_config, save_config, validate_config
from .entropy import (NOKEY, EmptyKeySetError, PostSelectedDistribution,
                      PostSelectionPolicy, PSWeights, RatePoint,
                      baseline_chsh_rate, chsh_and_qber, conditional_entropy_bits,
                      default_relaxation, ec_cost, key_rate, min_entropy,
                      postselected_distribution, ps_weights, retained_fraction)
from .model import (BinaryBehavior, DetectorParams, MeasurementConfig,
                    StateParams, TernaryBehavior, behavior, binarize,
                    build_state, outcome_effects)
from .npa import (GuessingProgram, InfeasibleBehaviorError, MomentRelaxation,
                  SdpSolution, SolverError, SolverFailureError,
                  assemble_guessing_program, build_relaxation, canonicalize,
                  generate_words, parse_level, solve)
from .optimize import (OptimizationBudget, OptimizationFailedError,
                       OptimizedPoint, SearchEvent, SearchSpace,
                       ThresholdResult, curve, optimize_point, threshold_scan)

__version__ = "0.1.0"
