"""Plant, controller, predictor and the augmented jump-linear dynamics.

A linear plant x_{k+1} = A x_k + B u_k is controlled over a shared network
that fits one packet per step: the scheduler either sends a control packet
(sigma = 1), requests an observation (sigma = -1), or stays silent
(sigma = 0).  Each transmission succeeds with probability delta
(gamma = 1) or is dropped (gamma = 0).  The controller keeps an open-loop
predictor xhat of the plant state, reset to the true state whenever an
observation gets through, and the actuator holds the last control value
uhat that arrived.

Stacking zeta = (x, xhat_prev, uhat_prev) turns the closed loop into a
jump-linear system zeta_{k+1} = Gamma_mode zeta_k with five modes, one per
joint (sigma, gamma) outcome.  `step_components` applies the raw update
equations; `build_mode_set` assembles the equivalent mode matrices.  The
two must agree -- that equivalence is the defining invariant and is what
the test suite checks the matrices against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PlantModel",
    "AugmentedState",
    "Mode",
    "ModeSet",
    "MODE_TABLE",
    "build_mode_set",
    "step_components",
    "step_augmented",
    "mode_from_events",
]


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class PlantModel:
    """Discrete-time plant with an emulated stabilizing state-feedback gain.

    A : (n, n) state transition
    B : (n, m) input map
    C : (r, n) output map; carried for completeness, never used dynamically
        (the observation link transmits the full state)
    K : (m, n) feedback gain, required to stabilize the unnetworked loop,
        i.e. spectral_radius(A + B K) < 1
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        K = _as_matrix(self.K, "K")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        m = B.shape[1]
        if K.shape != (m, n):
            raise ValueError(f"K must be {(m, n)}, got {K.shape}")
        if C.shape[1] != n:
            raise ValueError(f"C has {C.shape[1]} columns, expected {n}")
        rho = max(abs(np.linalg.eigvals(A + B @ K)))
        if not rho < 1.0:
            raise ValueError(
                f"K does not stabilize the loop: spectral radius of A+BK is {rho:.6g} >= 1"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "K", K)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def r(self) -> int:
        return self.C.shape[0]

    @classmethod
    def from_dict(cls, doc: dict) -> "PlantModel":
        """Build from a JSON-style document with keys A, B, C, K (row-major).

        C may be omitted; it defaults to the identity (full-state output).
        """
        try:
            A = _as_matrix(doc["A"], "A")
            B = _as_matrix(doc["B"], "B")
            K = _as_matrix(doc["K"], "K")
        except KeyError as exc:
            raise ValueError(f"plant document missing field {exc}") from exc
        C = _as_matrix(doc["C"], "C") if "C" in doc else np.eye(A.shape[0])
        return cls(A=A, B=B, C=C, K=K)


@dataclass(frozen=True)
class AugmentedState:
    """Concatenated state zeta_k = (x_k, xhat_{k-1}, uhat_{k-1}).

    Flattening order is exactly (x, xhat_prev, uhat_prev), length 2n+m.
    At k = 0 the convention is xhat_prev = x0 and uhat_prev = 0.
    """

    x: np.ndarray
    xhat_prev: np.ndarray
    uhat_prev: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(-1))
        object.__setattr__(self, "xhat_prev", np.asarray(self.xhat_prev, dtype=float).reshape(-1))
        object.__setattr__(self, "uhat_prev", np.asarray(self.uhat_prev, dtype=float).reshape(-1))
        if self.x.shape != self.xhat_prev.shape:
            raise ValueError("x and xhat_prev must have the same dimension")

    @classmethod
    def initial(cls, x0, m: int) -> "AugmentedState":
        """State at k=0: predictor seeded with x0, no control in flight."""
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        return cls(x=x0, xhat_prev=x0.copy(), uhat_prev=np.zeros(m))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.xhat_prev, self.uhat_prev])

    @classmethod
    def from_vector(cls, zeta: np.ndarray, n: int, m: int) -> "AugmentedState":
        zeta = np.asarray(zeta, dtype=float).reshape(-1)
        if zeta.size != 2 * n + m:
            raise ValueError(f"vector of length {zeta.size}, expected {2 * n + m}")
        return cls(zeta[:n], zeta[n:2 * n], zeta[2 * n:])


# (switch value, outcome) for modes 1..5; outcome is "S", "F" or None.
MODE_TABLE = {
    1: (1, "S"),
    2: (1, "F"),
    3: (-1, "S"),
    4: (-1, "F"),
    5: (0, None),
}


@dataclass(frozen=True)
class Mode:
    """One jump mode: a (switch, transmission outcome) pair, indexed 1..5."""

    index: int

    def __post_init__(self):
        if self.index not in MODE_TABLE:
            raise ValueError(f"mode index must be 1..5, got {self.index}")

    @property
    def switch(self) -> int:
        return MODE_TABLE[self.index][0]

    @property
    def outcome(self):
        return MODE_TABLE[self.index][1]


@dataclass(frozen=True)
class ModeSet:
    """The five Gamma matrices of the jump system, plus plant dimensions.

    gamma[i-1] governs mode i.  Modes 2, 4 and 5 share the no-update matrix
    Gamma_0, so gamma[1], gamma[3] and gamma[4] must be identical.
    """

    gamma: tuple
    n: int
    m: int

    def __post_init__(self):
        mats = tuple(np.asarray(g, dtype=float) for g in self.gamma)
        if len(mats) != 5:
            raise ValueError(f"expected 5 mode matrices, got {len(mats)}")
        d = 2 * self.n + self.m
        for i, g in enumerate(mats):
            if g.shape != (d, d):
                raise ValueError(f"gamma[{i}] has shape {g.shape}, expected {(d, d)}")
        if not (np.array_equal(mats[1], mats[3]) and np.array_equal(mats[1], mats[4])):
            raise ValueError("modes 2, 4, 5 must share the same matrix")
        object.__setattr__(self, "gamma", mats)

    @property
    def dim(self) -> int:
        return 2 * self.n + self.m

    def matrix(self, mode: int) -> np.ndarray:
        return self.gamma[mode - 1]


def build_mode_set(plant: PlantModel) -> ModeSet:
    """Assemble the mode matrices from the component update equations.

    Within a step the updates happen in this order (zeta = (x, xh, uh)):

        xhat_k  = x_k             if sigma=-1 and gamma=1   (observation lands)
                  A xh + B uh     otherwise                 (open-loop predictor)
        uhat_k  = K xhat_k        if sigma=+1 and gamma=1   (control lands)
                  uh              otherwise                 (actuator hold)
        x_{k+1} = A x_k + B uhat_k

    Substituting gives

        Gamma_plus  = [[A, B K A, B K B], [0, A, B], [0, K A, K B]]
        Gamma_minus = [[A, 0, B], [I, 0, 0], [0, 0, I]]
        Gamma_zero  = [[A, 0, B], [0, A, B], [0, 0, I]]

    for modes 1, 3 and {2,4,5} respectively.
    """
    A, B, K = plant.A, plant.B, plant.K
    n, m = plant.n, plant.m
    I_n = np.eye(n)
    I_m = np.eye(m)
    Z_nn = np.zeros((n, n))
    Z_nm = np.zeros((n, m))
    Z_mn = np.zeros((m, n))

    gamma_plus = np.block([
        [A, B @ K @ A, B @ K @ B],
        [Z_nn, A, B],
        [Z_mn, K @ A, K @ B],
    ])
    gamma_minus = np.block([
        [A, Z_nn, B],
        [I_n, Z_nn, Z_nm],
        [Z_mn, Z_mn, I_m],
    ])
    gamma_zero = np.block([
        [A, Z_nn, B],
        [Z_nn, A, B],
        [Z_mn, Z_mn, I_m],
    ])
    return ModeSet(
        gamma=(gamma_plus, gamma_zero, gamma_minus, gamma_zero, gamma_zero),
        n=n,
        m=m,
    )


def step_components(plant: PlantModel, state: AugmentedState, switch: int, drop: int) -> AugmentedState:
    """Advance one step by the raw update equations (the ground truth).

    switch is sigma in {1, -1, 0}; drop is gamma in {0, 1} (1 = delivered).
    Returns the next augmented state (x_{k+1}, xhat_k, uhat_k).
    """
    if switch not in (1, -1, 0):
        raise ValueError(f"switch must be one of 1, -1, 0, got {switch}")
    if drop not in (0, 1):
        raise ValueError(f"drop must be 0 or 1, got {drop}")
    A, B, K = plant.A, plant.B, plant.K
    x, xh, uh = state.x, state.xhat_prev, state.uhat_prev

    if switch == -1 and drop == 1:
        xhat = x.copy()
    else:
        xhat = A @ xh + B @ uh
    if switch == 1 and drop == 1:
        uhat = K @ xhat
    else:
        uhat = uh.copy()
    x_next = A @ x + B @ uhat
    return AugmentedState(x=x_next, xhat_prev=xhat, uhat_prev=uhat)


def step_augmented(modes: ModeSet, state: AugmentedState, mode) -> AugmentedState:
    """Advance one step through the mode matrix: unflatten(Gamma_mode @ flatten)."""
    index = mode.index if isinstance(mode, Mode) else int(mode)
    zeta = modes.matrix(index) @ state.vector()
    return AugmentedState.from_vector(zeta, modes.n, modes.m)


def mode_from_events(switch: int, drop: int) -> Mode:
    """Map a realized (sigma, gamma) pair to its mode index.

    (1,1) -> 1, (1,0) -> 2, (-1,1) -> 3, (-1,0) -> 4, (0,*) -> 5.
    """
    if switch not in (1, -1, 0):
        raise ValueError(f"switch must be one of 1, -1, 0, got {switch}")
    if drop not in (0, 1):
        raise ValueError(f"drop must be 0 or 1, got {drop}")
    if switch == 0:
        return Mode(5)
    if switch == 1:
        return Mode(1 if drop == 1 else 2)
    return Mode(3 if drop == 1 else 4)
