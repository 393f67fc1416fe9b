"""Preference-optimized hierarchical RL on procedural gridworld mazes.

A two-level agent (subgoal picker over the cell lattice, goal-conditioned
primitive policy), a synthetic preference pipeline with a value-regularized
preference loss, exact tabular verification of the underlying identities,
ablation baselines, and a seeded experiment harness.
"""

from .core import (ALGORITHMS, Cell, ConfigError, EmptyBufferError, FlatTrajectory,
                   GoalState, HighTrajectory, HighTransition, LowTransition,
                   PreferenceLabel, ReplayBuffer, RunConfig, Subgoal, TrajectoryPair,
                   features, parse_config, render_config, rng_streams)
from .envs import (CorridorSpec, EnvStepResult, EpisodeDoneError, MazeEnv,
                   MazeGenerationError, MazeSpec, generate_corridor, generate_maze, high_reward)
from .harness import (Experiment, NumericAbort, RunReport, lower_q_metric, render_report,
                      run_experiment, subgoal_distance_metric, sweep, train_baseline,
                      train_dipper, train_run)
from .higher import (DpoBatch, HigherPolicy, PointerPolicy, SoftmaxPolicy,
                     dipper_grad_closed_form,
                     dipper_loss, dipper_loss_and_grad, dpo_flat_loss)
from .lower import (DiscreteSacAgent, SacLosses, ValueNet, lower_reward, rollout_lower,
                    sac_update, train_value)
from .nets import (AdamState, MlpSpec, ParamTensor, adam_state, adam_step, backward,
                   forward, init_params, load_params, log_softmax, save_params, sigmoid,
                   softmax, softplus)
from .prefs import OracleSpec, dump_pairs, label_pair, load_pairs, relabel_dataset, score_trajectory
from .tabular import (SoftSolution, TabularMdp, TabularPair, TabularTrajectory,
                      check_bijection, check_telescoping, exact_dipper_objective,
                      policy_fixed_point_check, soft_value_iteration, verify_derivations)

__version__ = "0.1.0"
