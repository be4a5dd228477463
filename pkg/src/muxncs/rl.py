"""Deep Q-learning for the transmission scheduler.

A small dense network (two rectified hidden layers, 1024/256 by default)
maps the plant state x_k to three Q-values ordered (sigma=1, sigma=0,
sigma=-1).  Training is the classic replay/target-network scheme: roll the
closed loop with an epsilon-greedy policy whose exploration rate is the
*certified* epsilon-bar, store (sigma, x, r, x') transitions in a bounded
FIFO, sample uniform mini-batches, and descend the temporal-difference
loss

    mean_i [ Q(x_i, sigma_i; theta) - (r_i + beta * max_a Qhat(x'_i, a; theta-)) ]^2

with the target parameters theta- synced to theta every fixed number of
steps.  Everything is plain NumPy; gradients are hand-derived and checked
against finite differences in the test suite.

The exploration gate is deliberate: `train` refuses to run without a
stability certificate unless explicitly overridden, so the behavior
policy is mean-square stable even while the Q-function is nonsense.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import AugmentedState, ModeSet, PlantModel, step_components
from .sim import (DIVERGENCE_NORM, CostWeights, NetworkConfig,
                  greedy_sigma, stage_cost, stream)
from .stability import NumericalError, StabilityCertificate

__all__ = [
    "Experience",
    "ReplayMemory",
    "QNetwork",
    "TrainConfig",
    "TrainResult",
    "forward",
    "td_loss",
    "td_update",
    "sync_target",
    "train",
    "save_weights",
    "load_weights",
    "curve_to_csv",
]

# sigma value -> Q-value index (inverse of SIGMA_ORDER)
_ACTION_INDEX = {1: 0, 0: 1, -1: 2}


@dataclass(frozen=True)
class Experience:
    """One stored transition (sigma_k, x_k, r_k, x_{k+1})."""

    sigma: int
    state: np.ndarray
    reward: float
    next_state: np.ndarray

    def __post_init__(self):
        if self.sigma not in (1, -1, 0):
            raise ValueError(f"sigma must be one of 1, -1, 0, got {self.sigma}")


class ReplayMemory:
    """Bounded FIFO of experiences with uniform mini-batch sampling.

    Alongside the deque of Experience objects the buffer keeps ring arrays
    of the stacked fields, so the training loop can pull a mini-batch as
    four ready-made arrays instead of restacking objects every step.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf = deque(maxlen=capacity)
        self._states = None
        self._start = 0

    def push(self, exp: Experience):
        if self._states is None:
            n = np.asarray(exp.state, dtype=float).size
            self._states = np.empty((self.capacity, n))
            self._next = np.empty((self.capacity, n))
            self._rewards = np.empty(self.capacity)
            self._actions = np.empty(self.capacity, dtype=int)
        if len(self._buf) == self.capacity:  # deque drops the left entry
            slot = self._start
            self._start = (self._start + 1) % self.capacity
        else:
            slot = len(self._buf)
        self._states[slot] = exp.state
        self._next[slot] = exp.next_state
        self._rewards[slot] = exp.reward
        self._actions[slot] = _ACTION_INDEX[exp.sigma]
        self._buf.append(exp)

    def __len__(self):
        return len(self._buf)

    def __getitem__(self, i: int) -> Experience:
        return self._buf[i]

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform sample without replacement; requires enough entries."""
        idx = self._sample_idx(batch_size, rng)
        return [self._buf[int(i)] for i in idx]

    def sample_arrays(self, batch_size: int, rng: np.random.Generator):
        """Like sample, but returns stacked (X, X', r, action-index) arrays."""
        idx = self._sample_idx(batch_size, rng)
        phys = (self._start + idx) % self.capacity
        return (self._states[phys], self._next[phys],
                self._rewards[phys], self._actions[phys])

    def _sample_idx(self, batch_size: int, rng: np.random.Generator):
        if batch_size > len(self._buf):
            raise ValueError(f"cannot sample {batch_size} from {len(self._buf)} entries")
        return rng.choice(len(self._buf), size=batch_size, replace=False)


class QNetwork:
    """Dense rectifier network state -> 3 Q-values; weights are (in, out)."""

    def __init__(self, sizes, weights, biases):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or sizes[-1] != 3:
            raise ValueError(f"output layer must have 3 neurons, got sizes {sizes}")
        if len(weights) != len(sizes) - 1 or len(biases) != len(sizes) - 1:
            raise ValueError("one weight matrix and bias vector per layer required")
        self.sizes = sizes
        self.weights = []
        self.biases = []
        for i, (W, b) in enumerate(zip(weights, biases)):
            W = np.asarray(W, dtype=float)
            b = np.asarray(b, dtype=float).reshape(-1)
            if W.shape != (sizes[i], sizes[i + 1]):
                raise ValueError(f"layer {i} weights have shape {W.shape}, "
                                 f"expected {(sizes[i], sizes[i + 1])}")
            if b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} bias has shape {b.shape}, "
                                 f"expected {(sizes[i + 1],)}")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise NumericalError(f"layer {i} parameters are not finite")
            self.weights.append(W)
            self.biases.append(b)
        self.meta = {}
        self._adam = None
        self._ws = {}

    @classmethod
    def initialize(cls, sizes, rng: np.random.Generator) -> "QNetwork":
        """Uniform init scaled by fan-in: U(-1/sqrt(n_in), 1/sqrt(n_in))."""
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(n_in)
            weights.append(rng.uniform(-bound, bound, (n_in, n_out)))
            biases.append(rng.uniform(-bound, bound, n_out))
        return cls(sizes, weights, biases)

    def copy(self) -> "QNetwork":
        return QNetwork(self.sizes, [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases])

    def q_values(self, x) -> np.ndarray:
        """Q-values for one state, ordered per SIGMA_ORDER = (1, 0, -1)."""
        q = self._forward_ws(np.asarray(x, dtype=float).reshape(1, -1))
        if not np.isfinite(q).all():
            raise NumericalError("forward pass produced non-finite Q-values")
        return q[0].copy()

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        # overflow -> inf, caught by the finiteness checks downstream
        with np.errstate(over="ignore", invalid="ignore"):
            H = np.asarray(X, dtype=float)
            for W, b in zip(self.weights[:-1], self.biases[:-1]):
                H = np.maximum(H @ W + b, 0.0)
            return H @ self.weights[-1] + self.biases[-1]

    def _workspace(self, rows: int) -> dict:
        """Reusable per-batch-size buffers for the hot training paths."""
        ws = self._ws.get(rows)
        if ws is None:
            hidden = self.sizes[1:-1]
            ws = {
                "pre": [np.empty((rows, n)) for n in hidden],
                "act": [np.empty((rows, n)) for n in hidden],
                "fwd": [np.empty((rows, n)) for n in hidden],
                "dh": [np.empty((rows, n)) for n in hidden],
                "mask": [np.empty((rows, n), dtype=bool) for n in hidden],
                "out": np.empty((rows, self.sizes[-1])),
                "cout": np.empty((rows, self.sizes[-1])),
                "dQ": np.empty((rows, self.sizes[-1])),
                "rows": np.arange(rows),
                "ymax": np.empty(rows),
                "y": np.empty(rows),
            }
            self._ws[rows] = ws
        return ws

    def _forward_ws(self, X: np.ndarray) -> np.ndarray:
        """forward_batch into reusable buffers.

        The result is only valid until the next buffered call with the same
        row count on this network; callers copy out what they keep.
        """
        ws = self._workspace(X.shape[0])
        with np.errstate(over="ignore", invalid="ignore"):
            H = X
            for i, (W, b) in enumerate(zip(self.weights[:-1], self.biases[:-1])):
                Z = ws["fwd"][i]
                np.dot(H, W, out=Z)
                Z += b
                np.maximum(Z, 0.0, out=Z)
                H = Z
            Q = ws["out"]
            np.dot(H, self.weights[-1], out=Q)
            Q += self.biases[-1]
        return Q

    def _forward_cache(self, X: np.ndarray):
        """Forward pass keeping pre-activations for backprop (buffered)."""
        ws = self._workspace(X.shape[0])
        with np.errstate(over="ignore", invalid="ignore"):
            acts = [X]
            pres = []
            H = X
            for i, (W, b) in enumerate(zip(self.weights[:-1], self.biases[:-1])):
                Z = ws["pre"][i]
                np.dot(H, W, out=Z)
                Z += b
                pres.append(Z)
                H = np.maximum(Z, 0.0, out=ws["act"][i])
                acts.append(H)
            Q = ws["cout"]
            np.dot(H, self.weights[-1], out=Q)
            Q += self.biases[-1]
        return Q, acts, pres

    def param_bytes(self) -> bytes:
        """Stable byte image of all parameters (for staleness checks)."""
        chunks = []
        for W, b in zip(self.weights, self.biases):
            chunks.append(W.tobytes())
            chunks.append(b.tobytes())
        return b"".join(chunks)


@dataclass
class TrainConfig:
    """Hyperparameters; defaults match what the CLI advertises.

    epsilon is the exploration rate and must come with the certificate that
    vouches for it -- `train` enforces that unless allow_uncertified is set.
    """

    epsilon: float
    certificate: Optional[StabilityCertificate] = None
    batch_size: int = 32
    learning_rate: float = 0.001
    episodes: int = 800
    target_sync_period: int = 100
    beta: float = 0.95
    replay_capacity: int = 1000
    hidden: tuple = (1024, 256)
    optimizer: str = "sgd"
    init_box: float = 10.0
    # feed the Q-network the whole (x, xhat, uhat) stack instead of x alone
    augmented: bool = False

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        for name in ("batch_size", "learning_rate", "target_sync_period",
                     "replay_capacity", "init_box"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie strictly inside (0, 1), got {self.beta}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass
class TrainResult:
    """Trained network plus the per-episode total-reward curve.

    failed marks runs that aborted on a non-finite loss or where more than
    half the late episodes diverged; artifacts are still attached.
    """

    net: QNetwork
    curve: np.ndarray
    failed: bool = False
    reason: Optional[str] = None
    diverged_episodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def forward(net: QNetwork, state) -> np.ndarray:
    """Q-values of one state (module-level convenience over net.q_values)."""
    return net.q_values(state)


def _batch_arrays(batch):
    X = np.stack([np.asarray(e.state, dtype=float) for e in batch])
    Xn = np.stack([np.asarray(e.next_state, dtype=float) for e in batch])
    r = np.array([e.reward for e in batch], dtype=float)
    a = np.array([_ACTION_INDEX[e.sigma] for e in batch], dtype=int)
    return X, Xn, r, a


def td_loss(net: QNetwork, target: QNetwork, batch, beta: float) -> float:
    """Mean squared TD error of a batch under the current parameters."""
    X, Xn, r, a = _batch_arrays(batch)
    q = net.forward_batch(X)[np.arange(len(batch)), a]
    y = r + beta * target.forward_batch(Xn).max(axis=1)
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean((q - y) ** 2))


def _gradients(net: QNetwork, target: QNetwork, batch, beta: float):
    X, Xn, r, a = _batch_arrays(batch)
    return _gradients_arrays(net, target, X, Xn, r, a, beta)


def _gradients_arrays(net: QNetwork, target: QNetwork, X, Xn, r, a, beta: float):
    B = X.shape[0]
    ws = net._workspace(B)
    rows = ws["rows"]
    Q, acts, pres = net._forward_cache(X)
    # if the parameters have blown up this arithmetic saturates to inf/nan;
    # the caller turns a non-finite loss into a NumericalError
    with np.errstate(over="ignore", invalid="ignore"):
        y = ws["y"]
        np.max(target._forward_ws(Xn), axis=1, out=ws["ymax"])
        np.multiply(ws["ymax"], beta, out=y)
        y += r
        err = Q[rows, a]
        err -= y
        loss = float(np.mean(err ** 2))

        dQ = ws["dQ"]
        dQ.fill(0.0)
        dQ[rows, a] = 2.0 * err / B
        grads_W = [None] * len(net.weights)
        grads_b = [None] * len(net.biases)
        delta = dQ
        grads_W[-1] = acts[-1].T @ delta
        grads_b[-1] = delta.sum(axis=0)
        for layer in range(len(net.weights) - 2, -1, -1):
            dh = ws["dh"][layer]
            np.dot(delta, net.weights[layer + 1].T, out=dh)
            np.greater(pres[layer], 0.0, out=ws["mask"][layer])
            np.multiply(dh, ws["mask"][layer], out=dh)
            delta = dh
            grads_W[layer] = acts[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
    return loss, grads_W, grads_b


def td_update(net: QNetwork, target: QNetwork, batch, cfg: TrainConfig) -> float:
    """One gradient step on the TD loss; returns the (pre-step) loss.

    The target network is read, never written.  A non-finite loss aborts
    with a NumericalError carrying the batch diagnostics.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    X, Xn, r, a = _batch_arrays(batch)
    return _td_update_arrays(net, target, X, Xn, r, a, cfg)


def _td_update_arrays(net: QNetwork, target: QNetwork, X, Xn, r, a,
                      cfg: TrainConfig) -> float:
    if net.sizes != target.sizes:
        raise ValueError("net and target must share an architecture")
    loss, grads_W, grads_b = _gradients_arrays(net, target, X, Xn, r, a, cfg.beta)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite TD loss on a batch of {len(r)} "
                             f"(reward range {r.min():.3g}..{r.max():.3g})")
    lr = cfg.learning_rate
    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.optimizer == "sgd":
            for W, b, gW, gb in zip(net.weights, net.biases, grads_W, grads_b):
                W -= lr * gW
                b -= lr * gb
        else:  # adam
            if net._adam is None:
                net._adam = {
                    "t": 0,
                    "mW": [np.zeros_like(W) for W in net.weights],
                    "vW": [np.zeros_like(W) for W in net.weights],
                    "mb": [np.zeros_like(b) for b in net.biases],
                    "vb": [np.zeros_like(b) for b in net.biases],
                    # scratch; every element is overwritten before it is read
                    "sW": [np.empty_like(W) for W in net.weights],
                    "sb": [np.empty_like(b) for b in net.biases],
                    "uW": [np.empty_like(W) for W in net.weights],
                    "ub": [np.empty_like(b) for b in net.biases],
                }
            st = net._adam
            st["t"] += 1
            b1, b2, eps = 0.9, 0.999, 1e-8
            corr1 = 1.0 - b1 ** st["t"]
            corr2 = 1.0 - b2 ** st["t"]
            # in-place throughout: this runs a couple hundred thousand times
            # on quarter-million-element arrays, so temporaries dominate cost
            # (op order matches m = b1 m + (1-b1) g, v = b2 v + (1-b2) g^2,
            #  p -= lr (m/corr1) / (sqrt(v/corr2) + eps) exactly)
            for i, (gW, gb) in enumerate(zip(grads_W, grads_b)):
                for g, m, v, p, s, u in (
                        (gW, st["mW"][i], st["vW"][i], net.weights[i],
                         st["sW"][i], st["uW"][i]),
                        (gb, st["mb"][i], st["vb"][i], net.biases[i],
                         st["sb"][i], st["ub"][i])):
                    np.multiply(g, 1.0 - b1, out=s)
                    m *= b1
                    m += s
                    np.multiply(g, g, out=s)
                    s *= 1.0 - b2
                    v *= b2
                    v += s
                    np.divide(v, corr2, out=s)
                    np.sqrt(s, out=s)
                    s += eps
                    np.divide(m, corr1, out=u)
                    u *= lr
                    u /= s
                    p -= u
    return loss


def sync_target(net: QNetwork, target: QNetwork) -> QNetwork:
    """Copy the policy parameters into the target network (theta- <- theta)."""
    if net.sizes != target.sizes:
        raise ValueError("net and target must share an architecture")
    for i in range(len(net.weights)):
        np.copyto(target.weights[i], net.weights[i])
        np.copyto(target.biases[i], net.biases[i])
    return target


def _check_gate(cfg: TrainConfig, network: NetworkConfig, allow_uncertified: bool):
    if cfg.certificate is None:
        if not allow_uncertified:
            raise ValueError(
                "training requires a stability certificate for its exploration "
                "rate; run the feasibility analysis first or pass "
                "allow_uncertified=True to override")
        return
    cert = cfg.certificate
    if abs(cert.delta - network.delta) > 1e-12:
        raise ValueError(f"certificate is for delta={cert.delta}, "
                         f"but the channel has delta={network.delta}")
    if cfg.epsilon < cert.epsilon - 1e-12:
        raise ValueError(f"certificate covers epsilon >= {cert.epsilon}, "
                         f"got exploration rate {cfg.epsilon}")


def train(plant: PlantModel, modes: ModeSet, network: NetworkConfig,
          weights: CostWeights, cfg: TrainConfig,
          allow_uncertified: bool = False, progress=None) -> TrainResult:
    """Run the full training loop and return the network plus reward curve.

    Per episode: fresh x0 from the init stream, epsilon-greedy rollout
    (exploration stream; greedy actions from the live network), Bernoulli
    drops (network stream); per step the transition is stored, one uniform
    batch is sampled (replay stream) once the buffer holds a batch, one TD
    gradient step is applied, and the target is synced every
    cfg.target_sync_period environment steps.  Weight init draws from the
    weights stream, so the whole run is a pure function of the master seed.

    progress, if given, is called as progress(episode_index, episode_total)
    after each episode.
    """
    _check_gate(cfg, network, allow_uncertified)
    w_rng = stream(network.seed, 0, "weights")
    in_dim = 2 * plant.n + plant.m if cfg.augmented else plant.n

    def _feat(s: AugmentedState) -> np.ndarray:
        return s.vector() if cfg.augmented else s.x.copy()

    net = QNetwork.initialize([in_dim, *cfg.hidden, 3], w_rng)
    net.meta = {"epsilon": cfg.epsilon, "delta": network.delta, "seed": network.seed,
                "input": "zeta" if cfg.augmented else "x"}
    target = net.copy()
    replay = ReplayMemory(cfg.replay_capacity)
    replay_rng = stream(network.seed, 0, "replay")

    curve = []
    diverged_flags = []
    failure = None
    global_step = 0
    for episode in range(cfg.episodes):
        x0 = stream(network.seed, episode, "init").uniform(-cfg.init_box, cfg.init_box, plant.n)
        exp_rng = stream(network.seed, episode, "exploration")
        net_rng = stream(network.seed, episode, "network")
        state = AugmentedState.initial(x0, plant.m)
        rewards = []
        diverged = False
        for k in range(network.horizon):
            feat = _feat(state)
            try:
                if exp_rng.random() < cfg.epsilon:
                    sigma = 1 if exp_rng.integers(2) == 0 else -1
                else:
                    sigma = greedy_sigma(net.q_values(feat))
            except NumericalError as exc:
                # parameters went non-finite between updates
                failure = f"episode {episode}, step {k}: {exc}"
                break
            gamma = 1 if net_rng.random() < network.delta else 0
            nxt = step_components(plant, state, sigma, gamma)
            r = -stage_cost(weights, state.x, nxt.uhat_prev, sigma)
            replay.push(Experience(sigma=sigma, state=feat, reward=r,
                                   next_state=_feat(nxt)))
            rewards.append(r)
            state = nxt
            if len(replay) >= cfg.batch_size:
                X, Xn, br, ba = replay.sample_arrays(cfg.batch_size, replay_rng)
                try:
                    _td_update_arrays(net, target, X, Xn, br, ba, cfg)
                except NumericalError as exc:
                    failure = f"episode {episode}, step {k}: {exc}"
                    break
            global_step += 1
            if global_step % cfg.target_sync_period == 0:
                sync_target(net, target)
            if np.linalg.norm(state.vector()) > DIVERGENCE_NORM:
                diverged = True
                break
        curve.append(math.fsum(rewards))
        diverged_flags.append(diverged)
        if progress is not None:
            progress(episode, curve[-1])
        if failure is not None:
            break

    flags = np.array(diverged_flags, dtype=bool)
    if failure is None and len(flags):
        late = flags[len(flags) // 2:]
        if late.size and late.mean() > 0.5:
            failure = (f"{int(late.sum())} of the last {late.size} episodes "
                       f"diverged (> 50%)")
    return TrainResult(net=net, curve=np.array(curve), failed=failure is not None,
                       reason=failure, diverged_episodes=flags)


def save_weights(net: QNetwork, meta: Optional[dict] = None) -> dict:
    """Serialize a network to a JSON-ready document (see load_weights)."""
    doc_meta = dict(net.meta)
    if meta:
        doc_meta.update(meta)
    return {
        "arch": list(net.sizes),
        "layers": [{"w": W.tolist(), "b": b.tolist()}
                   for W, b in zip(net.weights, net.biases)],
        "meta": doc_meta,
    }


def load_weights(doc: dict) -> QNetwork:
    """Rebuild a network from its document; round-trips bit-exactly."""
    if not isinstance(doc, dict) or not doc:
        raise ValueError("weights document is empty or not an object")
    for key in ("arch", "layers"):
        if key not in doc:
            raise ValueError(f"weights document missing field {key!r}")
    arch = doc["arch"]
    layers = doc["layers"]
    if not isinstance(arch, list) or len(arch) < 2:
        raise ValueError(f"field 'arch' must be a list of at least 2 sizes, got {arch!r}")
    if not isinstance(layers, list) or len(layers) != len(arch) - 1:
        raise ValueError(f"field 'layers' must hold {len(arch) - 1} entries, "
                         f"got {len(layers) if isinstance(layers, list) else type(layers)}")
    weights, biases = [], []
    for i, layer in enumerate(layers):
        if "w" not in layer or "b" not in layer:
            raise ValueError(f"layers[{i}] must have fields 'w' and 'b'")
        W = np.asarray(layer["w"], dtype=float)
        b = np.asarray(layer["b"], dtype=float)
        expected = (int(arch[i]), int(arch[i + 1]))
        if W.shape != expected:
            raise ValueError(f"layers[{i}].w has shape {W.shape}, expected {expected}")
        if b.shape != (expected[1],):
            raise ValueError(f"layers[{i}].b has shape {b.shape}, expected {(expected[1],)}")
        weights.append(W)
        biases.append(b)
    net = QNetwork(arch, weights, biases)
    net.meta = dict(doc.get("meta", {}))
    return net


def curve_to_csv(curve, window: int = 100) -> str:
    """Reward curve as CSV: episode, total reward, trailing moving average."""
    curve = np.asarray(curve, dtype=float)
    lines = ["episode,total_reward,moving_avg_100"]
    for e in range(curve.size):
        lo = max(0, e - window + 1)
        avg = float(curve[lo:e + 1].mean())
        lines.append(f"{e},{str(float(curve[e]))},{str(avg)}")
    return "\n".join(lines) + "\n"
