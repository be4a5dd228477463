"""Switching-policy probability algebra for the five-mode jump system.

The scheduler draws sigma by an epsilon-greedy rule: with probability
epsilon it explores uniformly over {1, -1}; otherwise the exploiting
policy picks sigma = 1 with probability p, sigma = -1 with probability q
and stays silent with probability 1-p-q.  Combined with the Bernoulli
delivery channel (success probability delta) this induces an i.i.d.
distribution over the five modes.

Three extreme exploitation choices ("corner cases") bracket everything:

    C1: (p, q) = (0, 1)  -- observations only
    C2: (p, q) = (1, 0)  -- controls only
    C3: (p, q) = (0, 0)  -- silence

Every general (p, q) mode distribution is the convex combination
q*C1 + p*C2 + (1-p-q)*C3; `convex_combination_check` evaluates the
identity numerically, which is the computational content behind reducing
stability certification to the three corners.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SwitchDistribution",
    "ExploitParams",
    "ModeDistribution",
    "TransitionMatrix",
    "switch_distribution",
    "corner_case",
    "mode_distribution",
    "transition_matrix",
    "convex_combination_check",
]

_SUM_TOL = 1e-12


def _check_prob(value: float, name: str) -> float:
    value = float(value)
    if not -_SUM_TOL <= value <= 1.0 + _SUM_TOL:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    # Differences such as 1 - p - q can land a hair outside [0, 1]; snap
    # round-off back onto the boundary so downstream code sees a probability.
    return min(max(value, 0.0), 1.0)


@dataclass(frozen=True)
class SwitchDistribution:
    """Probabilities of sigma = 1, 0, -1 (in that order)."""

    prob_plus: float
    prob_zero: float
    prob_minus: float

    def __post_init__(self):
        for name in ("prob_plus", "prob_zero", "prob_minus"):
            object.__setattr__(self, name, _check_prob(getattr(self, name), name))
        total = self.prob_plus + self.prob_zero + self.prob_minus
        if abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"switch probabilities sum to {total!r}, not 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.prob_plus, self.prob_zero, self.prob_minus])


@dataclass(frozen=True)
class ExploitParams:
    """Exploitation-phase probabilities: sigma=1 w.p. p, sigma=-1 w.p. q."""

    p: float
    q: float

    def __post_init__(self):
        object.__setattr__(self, "p", _check_prob(self.p, "p"))
        object.__setattr__(self, "q", _check_prob(self.q, "q"))
        if self.p + self.q > 1.0 + _SUM_TOL:
            raise ValueError(f"p + q must be <= 1, got {self.p + self.q}")


@dataclass(frozen=True)
class ModeDistribution:
    """Probabilities (P1..P5) of the five modes, i.i.d. across steps."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float).reshape(-1)
        if probs.shape != (5,):
            raise ValueError(f"expected 5 mode probabilities, got shape {probs.shape}")
        if (probs < -_SUM_TOL).any() or (probs > 1 + _SUM_TOL).any():
            raise ValueError(f"mode probabilities out of [0, 1]: {probs}")
        if abs(probs.sum() - 1.0) > _SUM_TOL:
            raise ValueError(f"mode probabilities sum to {probs.sum()!r}, not 1")
        object.__setattr__(self, "probs", np.clip(probs, 0.0, 1.0))

    def __getitem__(self, i: int) -> float:
        return float(self.probs[i])


@dataclass(frozen=True)
class TransitionMatrix:
    """5x5 mode transition matrix; all rows equal because modes are i.i.d."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.shape != (5, 5):
            raise ValueError(f"expected a 5x5 matrix, got {rows.shape}")
        if np.abs(rows.sum(axis=1) - 1.0).max() > _SUM_TOL:
            raise ValueError("every row must sum to 1")
        for i in range(1, 5):
            if not np.array_equal(rows[0], rows[i]):
                raise ValueError("rows must be identical (i.i.d. mode process)")
        object.__setattr__(self, "rows", rows)


def switch_distribution(epsilon: float, exploit: ExploitParams) -> SwitchDistribution:
    """Epsilon-greedy mixture of uniform {1,-1} exploration and (p, q) exploitation.

    Returns (eps/2 + (1-eps) p, (1-eps)(1-p-q), eps/2 + (1-eps) q).
    """
    eps = _check_prob(epsilon, "epsilon")
    p, q = exploit.p, exploit.q
    return SwitchDistribution(
        prob_plus=eps / 2 + (1 - eps) * p,
        prob_zero=(1 - eps) * (1 - p - q),
        prob_minus=eps / 2 + (1 - eps) * q,
    )


_CORNERS = {1: ExploitParams(p=0.0, q=1.0), 2: ExploitParams(p=1.0, q=0.0), 3: ExploitParams(p=0.0, q=0.0)}


def corner_case(c: int, epsilon: float) -> SwitchDistribution:
    """Switch distribution of corner case c in {1, 2, 3}.

    C1 = (eps/2, 0, 1-eps/2), C2 = (1-eps/2, 0, eps/2), C3 = (eps/2, 1-eps, eps/2).
    """
    if c not in _CORNERS:
        raise ValueError(f"corner case must be 1, 2 or 3, got {c}")
    return switch_distribution(epsilon, _CORNERS[c])


def mode_distribution(delta: float, switch: SwitchDistribution) -> ModeDistribution:
    """Combine a switch distribution with the delivery probability delta.

    P1 = delta*P(sigma=1),  P2 = (1-delta)*P(sigma=1),
    P3 = delta*P(sigma=-1), P4 = (1-delta)*P(sigma=-1), P5 = P(sigma=0).
    delta = 0 is rejected (a channel that never delivers is out of scope).
    """
    delta = float(delta)
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    return ModeDistribution(np.array([
        delta * switch.prob_plus,
        (1 - delta) * switch.prob_plus,
        delta * switch.prob_minus,
        (1 - delta) * switch.prob_minus,
        switch.prob_zero,
    ]))


def transition_matrix(dist: ModeDistribution) -> TransitionMatrix:
    """Replicate the mode distribution into the (row-constant) transition matrix."""
    return TransitionMatrix(np.tile(dist.probs, (5, 1)))


def convex_combination_check(epsilon: float, exploit: ExploitParams, deltas=None) -> float:
    """Max absolute residual of the corner-case decomposition over a delta grid.

    Checks mode_distribution(delta, switch(eps, p, q)) against
    q*C1 + p*C2 + (1-p-q)*C3 (weights alpha1 = q, alpha2 = p) and returns
    the largest componentwise deviation.
    """
    if deltas is None:
        deltas = np.linspace(0.1, 1.0, 10)
    p, q = exploit.p, exploit.q
    worst = 0.0
    for delta in deltas:
        general = mode_distribution(delta, switch_distribution(epsilon, exploit)).probs
        corners = [mode_distribution(delta, corner_case(c, epsilon)).probs for c in (1, 2, 3)]
        combo = q * corners[0] + p * corners[1] + (1 - p - q) * corners[2]
        worst = max(worst, float(np.abs(general - combo).max()))
    return worst
