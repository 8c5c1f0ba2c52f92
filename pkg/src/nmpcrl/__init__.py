"""Learning-tuned nonlinear MPC for diff-drive obstacle avoidance."""

from .config import RunConfig, load_config
from .learning import (GesState, TdSample, es_update, ges_update,
                       mspbe_estimate, rdes_subsequent_value, td_error)
from .neural import (AdamState, MlpWeights, ReplayBuffer, Transition,
                     buffer_push, nn_forward, train_minibatch)
from .nlp import (NlpProblem, NlpSolution, PrimalDualGuess, SolverOptions,
                  SolverStatus, kkt_residual, solve_nlp)
from .ocp import (NmpcConfig, QEvaluation, ThetaVector, build_ocp, evaluate_q,
                  explore_action, policy, sensitivity)
from .robot import (ControlInput, Obstacle, RobotState, Scenario,
                    StageCostParams, dynamics_continuous, obstacle_value,
                    rl_stage_cost, step_rk4)

__version__ = "0.1.0"
