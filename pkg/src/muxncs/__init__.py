"""muxncs: stability-certified scheduling for networked control.

A linear plant shares one network link for control downlinks and
observation uplinks; each step the scheduler transmits control (sigma=1),
requests an observation (sigma=-1) or stays silent (sigma=0), and packets
drop i.i.d. with success probability delta.  The package

* builds the five-mode jump-linear closed loop (`model`),
* derives the mode probabilities of epsilon-greedy scheduling (`markov`),
* certifies mean-square stability by common-Lyapunov LMIs over the three
  extreme exploitation policies, and bisects for the smallest certified
  exploration rate (`stability`),
* simulates the loop under pluggable policies with Monte-Carlo decay and
  reward accounting (`sim`),
* trains a deep Q-network scheduler whose exploration uses the certified
  rate (`rl`),
* and ties it together behind the `muxncs` command line (`cli`).
"""

__version__ = "0.1.0"

from .markov import (ExploitParams, ModeDistribution, SwitchDistribution,
                     TransitionMatrix, convex_combination_check, corner_case,
                     mode_distribution, switch_distribution, transition_matrix)
from .model import (AugmentedState, Mode, ModeSet, PlantModel, build_mode_set,
                    mode_from_events, step_augmented, step_components)
from .rl import (Experience, QNetwork, ReplayMemory, TrainConfig, TrainResult,
                 load_weights, save_weights, sync_target, td_update, train)
from .sim import (Always, CostWeights, EpsilonGreedy, NetworkConfig,
                  QNetworkGreedy, RoundRobin, SchedulingPolicy, Trace,
                  UniformRandom, average_reward, discounted_return,
                  monte_carlo_decay, simulate, stage_cost)
from .stability import (DecayEstimate, Infeasible, NoFeasibleEpsilon,
                        NonMonotoneFeasibility, NumericalError, SolverFailure,
                        StabilityCertificate, find_epsilon_bar, lmi_feasible,
                        spectral_radius_mss, sweep_delta)

__all__ = [
    "__version__",
    # model
    "PlantModel", "AugmentedState", "Mode", "ModeSet", "build_mode_set",
    "step_components", "step_augmented", "mode_from_events",
    # markov
    "SwitchDistribution", "ExploitParams", "ModeDistribution", "TransitionMatrix",
    "switch_distribution", "corner_case", "mode_distribution", "transition_matrix",
    "convex_combination_check",
    # stability
    "StabilityCertificate", "DecayEstimate", "Infeasible", "NoFeasibleEpsilon",
    "NumericalError", "SolverFailure", "NonMonotoneFeasibility",
    "spectral_radius_mss", "lmi_feasible", "find_epsilon_bar", "sweep_delta",
    # sim
    "CostWeights", "NetworkConfig", "SchedulingPolicy", "EpsilonGreedy",
    "RoundRobin", "UniformRandom", "Always", "QNetworkGreedy", "Trace",
    "stage_cost", "simulate", "monte_carlo_decay", "average_reward",
    "discounted_return",
    # rl
    "Experience", "ReplayMemory", "QNetwork", "TrainConfig", "TrainResult",
    "td_update", "sync_target", "train", "save_weights", "load_weights",
]
