"""Closed-loop simulation under pluggable scheduling policies.

Rollouts draw the switch sigma_k from a policy and the delivery outcome
gamma_k from a Bernoulli(delta) channel, step the plant through the
component update equations, and account the per-stage cost

    c_k = x_k' Q x_k + uhat_k' R uhat_k + lambda * sigma_k^2

(reward r_k = -c_k).  `monte_carlo_decay` estimates the mean-square decay
envelope over independent runs, `average_reward` the long-run per-step
reward over random initial states.

Reproducibility: every random draw comes from one of four named streams
derived from the master seed via spawn keys (run index, stream id) --
network drops, exploration, initial states, replay sampling (the last is
consumed by the training loop; a fifth stream seeds weight
initialization).  Fixing the master seed fixes every artifact bit for bit,
and the streams can be re-seeded independently of one another.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import AugmentedState, ModeSet, PlantModel, mode_from_events, step_augmented, step_components
from .stability import DecayEstimate

__all__ = [
    "STREAM_IDS",
    "stream",
    "CostWeights",
    "NetworkConfig",
    "SchedulingPolicy",
    "EpsilonGreedy",
    "RoundRobin",
    "UniformRandom",
    "Always",
    "QNetworkGreedy",
    "greedy_sigma",
    "SIGMA_ORDER",
    "Trace",
    "stage_cost",
    "simulate",
    "monte_carlo_decay",
    "average_reward",
    "average_reward_stats",
    "discounted_return",
    "trace_to_csv",
    "decay_to_csv",
]

# Named substreams of the master seed.  Stream entropy is the master seed
# (or an explicit override), spawn key is (run index, stream id).
STREAM_IDS = {"network": 0, "exploration": 1, "init": 2, "replay": 3, "weights": 4}

DIVERGENCE_NORM = 1e12

# Q-value output ordering of the scheduler network: index 0 -> sigma=1,
# index 1 -> sigma=0, index 2 -> sigma=-1.
SIGMA_ORDER = (1, 0, -1)
# On exact Q-value ties prefer silence, then control: indices 1, 0, 2.
_TIE_PREFERENCE = (1, 0, 2)


def stream(seed: int, run: int, name: str) -> np.random.Generator:
    """Dedicated RNG for one (run, stream) pair under a master seed."""
    if name not in STREAM_IDS:
        raise ValueError(f"unknown stream {name!r}; expected one of {sorted(STREAM_IDS)}")
    if seed < 0:
        raise ValueError("seed must be a nonnegative integer")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(run), STREAM_IDS[name]))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class CostWeights:
    """Per-stage cost weights: Q >= 0 on the state, R > 0 on the held control,
    lam >= 0 per transmission, discount beta in (0, 1)."""

    Q: np.ndarray
    R: np.ndarray
    lam: float = 0.5
    beta: float = 0.95

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError(f"Q must be square, got shape {Q.shape}")
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ValueError(f"R must be square, got shape {R.shape}")
        if np.abs(Q - Q.T).max() > 1e-10 or np.abs(R - R.T).max() > 1e-10:
            raise ValueError("Q and R must be symmetric")
        if np.linalg.eigvalsh(Q)[0] < -1e-10:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(R)[0] <= 0:
            raise ValueError("R must be positive definite")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie strictly inside (0, 1), got {self.beta}")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @classmethod
    def identity(cls, n: int, m: int, lam: float = 0.5, beta: float = 0.95) -> "CostWeights":
        return cls(Q=np.eye(n), R=np.eye(m), lam=lam, beta=beta)


@dataclass(frozen=True)
class NetworkConfig:
    """Channel and episode parameters: delivery probability, master seed, horizon."""

    delta: float
    seed: int
    horizon: int = 200

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")


class SchedulingPolicy:
    """Maps (step index, observed scheduler state) to a switch value sigma.

    Inside `simulate` the observation is the full AugmentedState; policies
    that only care about the plant state read `.x` (or ignore it)."""

    def select(self, k: int, obs, rng: np.random.Generator) -> int:
        raise NotImplementedError


class Always(SchedulingPolicy):
    """Constant switch value."""

    def __init__(self, sigma: int):
        if sigma not in (1, -1, 0):
            raise ValueError(f"sigma must be one of 1, -1, 0, got {sigma}")
        self.sigma = sigma

    def select(self, k, x, rng):
        return self.sigma


class RoundRobin(SchedulingPolicy):
    """Deterministic cycle through switch values; default alternates control
    and observation every step (the always-transmitting baseline)."""

    def __init__(self, cycle=(1, -1)):
        cycle = tuple(cycle)
        if not cycle or any(s not in (1, -1, 0) for s in cycle):
            raise ValueError("cycle must be a nonempty sequence over {1, -1, 0}")
        self.cycle = cycle

    def select(self, k, x, rng):
        return self.cycle[k % len(self.cycle)]


class UniformRandom(SchedulingPolicy):
    """Uniform choice over the three switch values each step."""

    def __init__(self, choices=(1, 0, -1)):
        choices = tuple(choices)
        if not choices or any(s not in (1, -1, 0) for s in choices):
            raise ValueError("choices must be a nonempty sequence over {1, -1, 0}")
        self.choices = choices

    def select(self, k, x, rng):
        return self.choices[int(rng.integers(len(self.choices)))]


class EpsilonGreedy(SchedulingPolicy):
    """With probability epsilon explore uniformly over {1, -1}; otherwise
    defer to the inner exploiting policy (which is not even consulted on
    exploration steps)."""

    def __init__(self, epsilon: float, exploiter: SchedulingPolicy):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
        self.epsilon = float(epsilon)
        self.exploiter = exploiter

    def select(self, k, x, rng):
        if rng.random() < self.epsilon:
            return 1 if rng.integers(2) == 0 else -1
        return self.exploiter.select(k, x, rng)


def greedy_sigma(q) -> int:
    """Map a 3-vector of Q-values to sigma via SIGMA_ORDER, breaking exact
    ties toward sigma=0, then sigma=1."""
    q = np.asarray(q, dtype=float)
    if q.shape != (3,):
        raise ValueError(f"expected 3 Q-values, got shape {q.shape}")
    top = q.max()
    for idx in _TIE_PREFERENCE:
        if q[idx] == top:
            return SIGMA_ORDER[idx]
    raise AssertionError("unreachable")


class QNetworkGreedy(SchedulingPolicy):
    """Greedy scheduler over a trained Q-function.

    `net` is anything with a q_values(x) -> 3-vector method.  By default the
    network sees the plant state; with augmented=True it sees the whole
    (x, xhat, uhat) stack instead, matching networks trained on it.
    eval_count records how often the network was actually consulted, which
    makes the exploration-override contract observable.
    """

    def __init__(self, net, augmented: bool = False):
        self.net = net
        self.augmented = bool(augmented)
        self.eval_count = 0

    def select(self, k, obs, rng):
        self.eval_count += 1
        if isinstance(obs, AugmentedState):
            obs = obs.vector() if self.augmented else obs.x
        return greedy_sigma(self.net.q_values(obs))


def stage_cost(weights: CostWeights, x, uhat, sigma: int) -> float:
    """c = x'Qx + uhat'R uhat + lam * sigma^2 (sigma is scalar, so
    sigma'sigma is just sigma squared)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    uhat = np.asarray(uhat, dtype=float).reshape(-1)
    return float(x @ weights.Q @ x + uhat @ weights.R @ uhat + weights.lam * float(sigma) ** 2)


@dataclass(frozen=True)
class Trace:
    """One rollout.  Row k holds the state *reached by* step k, i.e. the
    augmented triple (x_{k+1}, xhat_k, uhat_k), together with the events
    (sigma_k, gamma_k, mode_k) and the stage cost/reward of step k (which
    are charged on the pre-step state x_k and the post-event control
    uhat_k).  zeta0 is the initial augmented state the rollout started from.
    """

    zeta0: AugmentedState
    X: np.ndarray        # (T, n) plant states x_{k+1}
    XH: np.ndarray       # (T, n) predictor states xhat_k
    UH: np.ndarray       # (T, m) held controls uhat_k
    sigma: np.ndarray    # (T,) switch values
    gamma: np.ndarray    # (T,) delivery outcomes
    mode: np.ndarray     # (T,) mode indices 1..5
    cost: np.ndarray     # (T,)
    reward: np.ndarray   # (T,)
    horizon: int
    diverged: bool = False
    # summary
    discounted_total: float = 0.0
    avg_reward: float = 0.0
    final_zeta_sq: float = 0.0

    def __len__(self):
        return self.X.shape[0]

    def state_at(self, k: int) -> AugmentedState:
        """Augmented state reached after step k (zeta_{k+1})."""
        return AugmentedState(self.X[k], self.XH[k], self.UH[k])


def simulate(plant: PlantModel, modes: ModeSet, policy: SchedulingPolicy,
             network: NetworkConfig, weights: CostWeights, x0,
             run: int = 0, exploration_seed: Optional[int] = None) -> Trace:
    """Roll out one episode of `network.horizon` steps from x0.

    Per step: sigma from the policy (exploration stream), gamma from
    Bernoulli(delta) (network stream, drawn every step so the drop sequence
    does not depend on the policy), advance through step_components, charge
    the stage cost.  Deterministic given the seeds.  If the augmented state
    norm exceeds 1e12 the trace is truncated there and flagged diverged.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (plant.n,):
        raise ValueError(f"x0 must have dimension {plant.n}, got {x0.shape}")
    if not np.isfinite(x0).all():
        raise ValueError("x0 must be finite")
    net_rng = stream(network.seed, run, "network")
    exp_rng = stream(network.seed if exploration_seed is None else exploration_seed,
                     run, "exploration")

    T = network.horizon
    n, m = plant.n, plant.m
    X = np.empty((T, n)); XH = np.empty((T, n)); UH = np.empty((T, m))
    sig = np.empty(T, dtype=int); gam = np.empty(T, dtype=int)
    mod = np.empty(T, dtype=int); cst = np.empty(T); rwd = np.empty(T)

    state = AugmentedState.initial(x0, m)
    zeta0 = state
    diverged = False
    steps = 0
    for k in range(T):
        sigma = int(policy.select(k, state, exp_rng))
        gamma = 1 if net_rng.random() < network.delta else 0
        nxt = step_components(plant, state, sigma, gamma)
        c = stage_cost(weights, state.x, nxt.uhat_prev, sigma)
        X[k] = nxt.x; XH[k] = nxt.xhat_prev; UH[k] = nxt.uhat_prev
        sig[k] = sigma; gam[k] = gamma
        mod[k] = mode_from_events(sigma, gamma).index
        cst[k] = c; rwd[k] = -c
        state = nxt
        steps = k + 1
        if np.linalg.norm(state.vector()) > DIVERGENCE_NORM:
            diverged = True
            break

    s = slice(0, steps)
    final_sq = float(state.vector() @ state.vector())
    disc = float(np.sum(rwd[s] * weights.beta ** np.arange(steps)))
    # truncated average: diverged rollouts are averaged over the steps they ran
    avg = float(np.sum(rwd[s]) / steps) if steps else 0.0
    return Trace(zeta0=zeta0, X=X[s].copy(), XH=XH[s].copy(), UH=UH[s].copy(),
                 sigma=sig[s].copy(), gamma=gam[s].copy(), mode=mod[s].copy(),
                 cost=cst[s].copy(), reward=rwd[s].copy(), horizon=T,
                 diverged=diverged, discounted_total=disc, avg_reward=avg,
                 final_zeta_sq=final_sq)


def monte_carlo_decay(plant: Optional[PlantModel], modes: ModeSet,
                      policy: SchedulingPolicy, network: NetworkConfig,
                      runs: int, x0=None,
                      exploration_seed: Optional[int] = None) -> DecayEstimate:
    """Estimate the mean-square decay envelope over independent runs.

    All runs share the same initial state (default: the all-ones vector) and
    step through the mode matrices, so synthetic mode sets work without a
    plant; the plant argument only supplies a default dimension check.  The
    mean of zeta_k' zeta_k over runs is fit log-linearly: log E = log(
    zeta_const |zeta_0|^2) + k log(xi).  Runs whose norm passes 1e12 are
    truncated and counted as diverged; if every run diverges the estimate is
    flagged all_diverged with the partial curve attached.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    n, m = modes.n, modes.m
    if plant is not None and (plant.n, plant.m) != (n, m):
        raise ValueError("plant and mode set dimensions disagree")
    if x0 is None:
        x0 = np.ones(n)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (n,):
        raise ValueError(f"x0 must have dimension {n}, got {x0.shape}")

    T = network.horizon
    sq = np.zeros((runs, T + 1))
    diverged = 0
    for r in range(runs):
        net_rng = stream(network.seed, r, "network")
        exp_rng = stream(network.seed if exploration_seed is None else exploration_seed,
                         r, "exploration")
        state = AugmentedState.initial(x0, m)
        sq[r, 0] = state.vector() @ state.vector()
        alive = True
        for k in range(T):
            if not alive:
                sq[r, k + 1] = np.inf
                continue
            sigma = int(policy.select(k, state, exp_rng))
            gamma = 1 if net_rng.random() < network.delta else 0
            state = step_augmented(modes, state, mode_from_events(sigma, gamma))
            val = float(state.vector() @ state.vector())
            sq[r, k + 1] = val
            if val > DIVERGENCE_NORM ** 2:
                alive = False
                diverged += 1

    # compensated column means keep aggregation order-independent
    mean_sq = np.array([math.fsum(sq[:, k]) / runs if np.isfinite(sq[:, k]).all()
                        else np.inf for k in range(T + 1)])
    frac = diverged / runs
    if diverged == runs:
        return DecayEstimate(zeta_const=float("inf"), xi=float("inf"), r_squared=0.0,
                             mean_zeta_sq=mean_sq, diverged_fraction=frac,
                             all_diverged=True)

    ks = np.flatnonzero(np.isfinite(mean_sq) & (mean_sq > 0.0))
    if ks.size < 2:
        # degenerate (e.g. zero initial state): nothing to fit, decay is vacuous
        return DecayEstimate(zeta_const=1.0, xi=np.finfo(float).tiny, r_squared=1.0,
                             mean_zeta_sq=mean_sq, diverged_fraction=frac)
    y = np.log(mean_sq[ks])
    slope, intercept = np.polyfit(ks, y, 1)
    fit = intercept + slope * ks
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res < 1e-18 else 0.0)
    zeta0_sq = 2.0 * float(x0 @ x0)  # zeta_0 = (x0, x0, 0)
    xi = float(np.exp(slope))
    zeta_const = max(1.0, float(np.exp(intercept)) / zeta0_sq)
    return DecayEstimate(zeta_const=zeta_const, xi=xi, r_squared=r2,
                         mean_zeta_sq=mean_sq, diverged_fraction=frac)


def average_reward_stats(plant: PlantModel, modes: ModeSet, policy: SchedulingPolicy,
                         network: NetworkConfig, weights: CostWeights, episodes: int,
                         init_box: float = 10.0,
                         exploration_seed: Optional[int] = None):
    """Per-step reward averaged over episodes with random initial states.

    Returns (mean, standard error, per-episode array).  Episode e draws x0
    uniformly from [-init_box, init_box]^n on the init stream and runs
    `simulate` with run index e, so two policies evaluated under the same
    master seed see identical initial states and drop sequences (paired
    comparison).  Diverged episodes contribute the average over the steps
    they ran and are counted like any other.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    per_episode = np.empty(episodes)
    for e in range(episodes):
        x0 = stream(network.seed, e, "init").uniform(-init_box, init_box, plant.n)
        trace = simulate(plant, modes, policy, network, weights, x0,
                         run=e, exploration_seed=exploration_seed)
        per_episode[e] = trace.avg_reward
    mean = math.fsum(per_episode) / episodes
    stderr = float(np.std(per_episode, ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return float(mean), stderr, per_episode


def average_reward(plant, modes, policy, network, weights, episodes, **kwargs) -> float:
    """Mean per-step reward over episodes (see average_reward_stats)."""
    mean, _, _ = average_reward_stats(plant, modes, policy, network, weights,
                                      episodes, **kwargs)
    return mean


def discounted_return(trace: Trace, beta: float) -> float:
    """Sum of beta^k r_k over the recorded steps of a trace."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie strictly inside (0, 1), got {beta}")
    T = len(trace)
    return float(np.sum(trace.reward * beta ** np.arange(T)))


def trace_to_csv(trace: Trace) -> str:
    """Render a trace as CSV; row k is the post-step state of step k."""
    n = trace.X.shape[1]
    m = trace.UH.shape[1]
    header = (["k"] + [f"x{i+1}" for i in range(n)] + [f"xhat{i+1}" for i in range(n)]
              + [f"uhat{i+1}" for i in range(m)] + ["sigma", "gamma", "mode", "cost", "reward"])
    lines = [",".join(header)]
    for k in range(len(trace)):
        cells = ([str(k)] + [str(float(v)) for v in trace.X[k]]
                 + [str(float(v)) for v in trace.XH[k]]
                 + [str(float(v)) for v in trace.UH[k]]
                 + [str(int(trace.sigma[k])), str(int(trace.gamma[k])), str(int(trace.mode[k])),
                    str(float(trace.cost[k])), str(float(trace.reward[k]))])
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def decay_to_csv(mean_zeta_sq) -> str:
    """Render a mean squared-state curve as CSV (k, mean_zeta_sq)."""
    lines = ["k,mean_zeta_sq"]
    for k, v in enumerate(np.asarray(mean_zeta_sq, dtype=float)):
        lines.append(f"{k},{str(float(v))}")
    return "\n".join(lines) + "\n"
