"""Mean-square stability certification for the five-mode jump system.

For an i.i.d. mode process with distribution P and matrices Gamma_j, the
closed loop is mean-square stable (MSS) iff the second-moment map is a
contraction.  Two complementary tools are provided:

* `spectral_radius_mss` -- the exact necessary-and-sufficient test
  rho(sum_j P_j Gamma_j (x) Gamma_j) < 1 on the d^2-dimensional Kronecker
  lift.  Cheap and solver-free, used as an oracle and sanity check.

* `lmi_feasible` -- a common-V Lyapunov feasibility program: find one
  V >= I with sum_j P_j^c Gamma_j' V Gamma_j < V simultaneously for the
  three corner-case distributions C1, C2, C3 at a given (delta, epsilon).
  Because every general (p, q) mode distribution is a convex combination
  of the corners, one feasible V certifies MSS for *every* exploitation
  policy at that exploration rate.

`find_epsilon_bar` bisects for the smallest certified exploration rate,
and `sweep_delta` tabulates it across delivery probabilities.

Certificates are never taken on a solver's word: margins are recomputed
from the returned V by a dense eigenvalue check, and anything that fails
re-verification is treated as a solver failure, not as feasibility.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .markov import ModeDistribution, corner_case, mode_distribution
from .model import ModeSet

__all__ = [
    "NumericalError",
    "SolverFailure",
    "NonMonotoneFeasibility",
    "StabilityCertificate",
    "Infeasible",
    "NoFeasibleEpsilon",
    "DecayEstimate",
    "spectral_radius_mss",
    "lmi_margin",
    "corner_margins",
    "lmi_feasible",
    "find_epsilon_bar",
    "sweep_delta",
    "sweep_to_csv",
    "SweepRow",
]

# Decrease enforced in the solver (sum_j ... <= (1-MU) V) and the stricter
# threshold the recomputed eigenvalue margins must clear.
_MU = 1e-6
VERIFY_TOL = -1e-9


class NumericalError(RuntimeError):
    """An eigenvalue or conic solve failed to produce a trustworthy answer."""


class SolverFailure(NumericalError):
    """No solver produced a verifiable answer; feasibility is UNKNOWN.

    Callers must not treat this as infeasibility.
    """

    def __init__(self, message: str, attempts=None):
        super().__init__(message)
        self.attempts = list(attempts or [])


class NonMonotoneFeasibility(RuntimeError):
    """Grid pre-scan found a feasible epsilon below an infeasible one."""

    def __init__(self, delta: float, grid, flags):
        self.delta = delta
        self.grid = list(grid)
        self.flags = list(flags)
        pairs = ", ".join(f"{e:.3f}:{f}" for e, f in zip(self.grid, self.flags))
        super().__init__(f"feasibility not monotone in epsilon at delta={delta} ({pairs})")


@dataclass(frozen=True)
class StabilityCertificate:
    """A verified common Lyapunov certificate at one (delta, epsilon).

    V       : symmetric matrix with smallest eigenvalue 1 (scale fixed)
    margins : most-positive eigenvalue of sum_j P_j^c Gamma_j' V Gamma_j - V
              for corners c = 1, 2, 3; all strictly negative
    """

    V: np.ndarray
    margins: np.ndarray
    epsilon: float
    delta: float

    def verify(self, modes: ModeSet, tol: float = VERIFY_TOL) -> np.ndarray:
        """Recompute the margins from scratch; raise if any check fails.

        Returns the freshly computed 3-vector of corner margins.
        """
        V = np.asarray(self.V, dtype=float)
        if V.shape != (modes.dim, modes.dim):
            raise ValueError(f"V has shape {V.shape}, expected {(modes.dim,) * 2}")
        if np.abs(V - V.T).max() > 1e-10:
            raise ValueError("V is not symmetric within 1e-10")
        lam_min = float(np.linalg.eigvalsh(V)[0])
        if lam_min < 1.0 - 1e-9:
            raise ValueError(f"smallest eigenvalue of V is {lam_min}, expected >= 1")
        fresh = corner_margins(V, self.delta, self.epsilon, modes)
        if not (fresh < tol).all():
            raise ValueError(f"certificate margins {fresh} are not all < {tol}")
        return fresh

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "epsilon": self.epsilon,
            "margins": [float(m) for m in self.margins],
            "V": [[float(v) for v in row] for row in self.V],
        }


@dataclass(frozen=True)
class Infeasible:
    """Outcome of lmi_feasible when the feasibility program has no solution.

    best_margin, when present, is the smallest uniform decrease margin t
    achievable by any V >= I of bounded trace (positive here, since t < 0
    would mean feasible); it quantifies how far from certifiable the point is.
    """

    delta: float
    epsilon: float
    best_margin: Optional[float] = None


@dataclass(frozen=True)
class NoFeasibleEpsilon:
    """No exploration rate in [0, 1] is certifiable at this delta."""

    delta: float
    grid: tuple = ()
    feasible_flags: tuple = ()


@dataclass(frozen=True)
class DecayEstimate:
    """Fitted geometric envelope E[zeta_k' zeta_k] ~= zeta_const * xi^k * |zeta_0|^2.

    Produced by Monte-Carlo second-moment estimation (`sim.monte_carlo_decay`):
    a log-linear least-squares fit of the mean squared state over time.
    xi < 1 indicates observed mean-square decay.  Extra fields carry the raw
    curve and divergence bookkeeping for reporting.
    """

    zeta_const: float
    xi: float
    r_squared: float
    mean_zeta_sq: Optional[np.ndarray] = None
    diverged_fraction: float = 0.0
    all_diverged: bool = False

    def __post_init__(self):
        if not self.all_diverged:
            if self.zeta_const < 1.0:
                raise ValueError("zeta_const must be >= 1")
            if not self.xi > 0.0:
                raise ValueError("xi must be positive")


def _corner_distributions(delta: float, epsilon: float):
    return [mode_distribution(delta, corner_case(c, epsilon)) for c in (1, 2, 3)]


def spectral_radius_mss(dist: ModeDistribution, modes: ModeSet) -> float:
    """Spectral radius of the second-moment map sum_j P_j (Gamma_j (x) Gamma_j).

    The i.i.d. jump system is MSS iff this is < 1.  Exact but O(d^6), so it
    serves as the oracle against which the LMI certificates are checked.
    """
    d = modes.dim
    M = np.zeros((d * d, d * d))
    for j in range(5):
        P = dist[j]
        if P == 0.0:
            continue
        G = modes.gamma[j]
        M += P * np.kron(G, G)
    try:
        eigs = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigenvalue computation failed on the {d*d}x{d*d} "
                             f"second-moment matrix: {exc}") from exc
    return float(np.abs(eigs).max())


def lmi_margin(V: np.ndarray, dist: ModeDistribution, modes: ModeSet) -> float:
    """Most-positive eigenvalue of sum_j P_j Gamma_j' V Gamma_j - V."""
    S = -np.asarray(V, dtype=float)
    for j in range(5):
        P = dist[j]
        if P == 0.0:
            continue
        G = modes.gamma[j]
        S = S + P * (G.T @ V @ G)
    return float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1])


def corner_margins(V: np.ndarray, delta: float, epsilon: float, modes: ModeSet) -> np.ndarray:
    """Margins of the three corner-case LMIs for a candidate V."""
    return np.array([lmi_margin(V, dist, modes) for dist in _corner_distributions(delta, epsilon)])


def _solve_common_v(delta: float, epsilon: float, modes: ModeSet):
    """Run the joint feasibility program through a chain of conic solvers.

    Formulation: minimize trace(V) over symmetric V subject to V >= I and
    sum_j P_j^c Gamma_j' V Gamma_j <= (1 - MU) V for c = 1, 2, 3.  The LMIs
    are homogeneous in V, so V >= I fixes the scale and the trace objective
    keeps the solution bounded; MU turns strict decrease into a closed cone.

    Returns ("certified", V) with V rescaled to smallest eigenvalue 1 and
    margins already re-verified, ("infeasible", None), or
    ("unknown", attempts) when no solver gave a verifiable answer.
    """
    import cvxpy as cp

    dists = _corner_distributions(delta, epsilon)
    d = modes.dim
    V = cp.Variable((d, d), symmetric=True)
    constraints = [V >> np.eye(d)]
    for dist in dists:
        S = sum(dist[j] * (modes.gamma[j].T @ V @ modes.gamma[j]) for j in range(5))
        constraints.append(S << (1.0 - _MU) * V)
    problem = cp.Problem(cp.Minimize(cp.trace(V)), constraints)

    attempts = []
    for solver in (cp.CLARABEL, cp.CVXOPT):
        try:
            with warnings.catch_warnings():
                # inaccurate-solution warnings are redundant: statuses are
                # inspected and every candidate V is re-verified below
                warnings.simplefilter("ignore")
                problem.solve(solver=solver)
            status = problem.status
        except Exception as exc:  # solver crashes count as unknowns
            attempts.append((str(solver), f"exception: {exc}"))
            continue
        attempts.append((str(solver), status))
        if status == cp.OPTIMAL and V.value is not None:
            Vv = np.asarray(V.value, dtype=float)
            Vv = 0.5 * (Vv + Vv.T)
            lam_min = float(np.linalg.eigvalsh(Vv)[0])
            if lam_min <= 0:
                continue  # not even positive definite; try the next solver
            Vv = Vv / lam_min  # pin the V >= I normalization exactly
            margins = corner_margins(Vv, delta, epsilon, modes)
            if (margins < VERIFY_TOL).all():
                return "certified", (Vv, margins)
            attempts[-1] = (str(solver), f"{status} but margins {margins} failed re-verification")
        elif status == cp.INFEASIBLE:
            return "infeasible", None
        # inaccurate / unbounded / solver_error: fall through to the next solver
    return "unknown", attempts


def _best_margin_diagnostic(delta: float, epsilon: float, modes: ModeSet) -> Optional[float]:
    """Smallest uniform margin t with V >= I, trace(V) bounded (diagnostic only).

    Solved separately because the margin program needs a trace cap to stay
    bounded; only called on infeasible points, where t comes out positive.
    """
    import cvxpy as cp

    dists = _corner_distributions(delta, epsilon)
    d = modes.dim
    V = cp.Variable((d, d), symmetric=True)
    t = cp.Variable()
    constraints = [V >> np.eye(d), cp.trace(V) <= 100.0 * d]
    for dist in dists:
        S = sum(dist[j] * (modes.gamma[j].T @ V @ modes.gamma[j]) for j in range(5))
        constraints.append(S - V << t * np.eye(d))
    problem = cp.Problem(cp.Minimize(t), constraints)
    for solver in (cp.CVXOPT, cp.CLARABEL):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                problem.solve(solver=solver)
        except Exception:
            continue
        if problem.status == cp.OPTIMAL and t.value is not None:
            return float(t.value)
    return None


def lmi_feasible(delta: float, epsilon: float, modes: ModeSet, diagnose: bool = False):
    """Certify (delta, epsilon) by the common-V corner-case LMIs.

    Returns a StabilityCertificate whose margins were recomputed by an
    independent eigenvalue check, or Infeasible.  Raises SolverFailure when
    every solver came back inconclusive -- which means UNKNOWN, not
    infeasible.  With diagnose=True an Infeasible result carries the
    best-attainable margin (how close the program came to feasibility).
    """
    delta = float(delta)
    epsilon = float(epsilon)
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")

    verdict, payload = _solve_common_v(delta, epsilon, modes)
    if verdict == "certified":
        Vv, margins = payload
        return StabilityCertificate(V=Vv, margins=margins, epsilon=epsilon, delta=delta)
    if verdict == "infeasible":
        best = _best_margin_diagnostic(delta, epsilon, modes) if diagnose else None
        return Infeasible(delta=delta, epsilon=epsilon, best_margin=best)
    raise SolverFailure(
        f"no solver resolved feasibility at delta={delta}, epsilon={epsilon}; "
        f"treat as unknown (attempts: {payload})",
        attempts=payload,
    )


_PRESCAN_POINTS = 21


def find_epsilon_bar(delta: float, modes: ModeSet, tol: float = 1e-3):
    """Smallest certified exploration rate at a given delta, by bisection.

    A 21-point grid pre-scan over [0, 1] first validates that feasibility is
    monotone in epsilon (raising NonMonotoneFeasibility with the full grid if
    not), then bisection narrows the boundary to within tol.  Returns
    (epsilon_bar, certificate) where the certificate is always at the
    returned epsilon_bar, or NoFeasibleEpsilon when even epsilon = 1 fails.
    Points where the solvers are inconclusive are conservatively treated as
    uncertified, so the result never rests on an unverified solve.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid = np.linspace(0.0, 1.0, _PRESCAN_POINTS)
    flags = []   # True / False / None (unknown)
    certs = {}
    for eps in grid:
        try:
            result = lmi_feasible(delta, float(eps), modes)
        except SolverFailure:
            flags.append(None)
            continue
        if isinstance(result, StabilityCertificate):
            flags.append(True)
            certs[float(eps)] = result
        else:
            flags.append(False)

    known = [(e, f) for e, f in zip(grid, flags) if f is not None]
    seen_feasible = False
    for _, feas in known:
        if feas:
            seen_feasible = True
        elif seen_feasible:
            raise NonMonotoneFeasibility(delta, grid, flags)

    feasible_eps = [float(e) for e, f in zip(grid, flags) if f]
    if not feasible_eps:
        if flags[-1] is None:
            raise SolverFailure(
                f"epsilon=1 unresolved at delta={delta}; cannot rule out feasibility"
            )
        return NoFeasibleEpsilon(delta=delta, grid=tuple(grid), feasible_flags=tuple(flags))

    hi = feasible_eps[0]
    cert = certs[hi]
    if hi == 0.0:
        return 0.0, cert
    # last grid point strictly below hi (infeasible or unknown there)
    lo = float(grid[np.searchsorted(grid, hi) - 1])
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        try:
            result = lmi_feasible(delta, mid, modes)
        except SolverFailure:
            result = None  # unknown: keep the certified upper end
        if isinstance(result, StabilityCertificate):
            hi, cert = mid, result
        else:
            lo = mid
    return hi, cert


@dataclass(frozen=True)
class SweepRow:
    """One delta's outcome in an epsilon-bar sweep."""

    delta: float
    epsilon_bar: Optional[float]
    margins: Optional[np.ndarray]
    status: str
    certificate: Optional[StabilityCertificate] = field(default=None, repr=False)


def _sweep_point(delta: float, modes: ModeSet, tol: float) -> SweepRow:
    try:
        result = find_epsilon_bar(delta, modes, tol=tol)
    except NonMonotoneFeasibility:
        return SweepRow(delta, None, None, "non_monotone")
    except NumericalError:
        return SweepRow(delta, None, None, "solver_failure")
    if isinstance(result, NoFeasibleEpsilon):
        return SweepRow(delta, None, None, "no_feasible_epsilon")
    eps_bar, cert = result
    return SweepRow(delta, eps_bar, cert.margins, "certified", certificate=cert)


def sweep_delta(grid, modes: ModeSet, tol: float = 1e-3, workers: Optional[int] = None):
    """Run find_epsilon_bar per delta; per-point failures become flagged rows.

    Points are independent; set workers > 1 (or the MUXNCS_THREADS
    environment variable) to solve them concurrently.  Row order always
    follows the input grid, so output is deterministic either way.
    """
    grid = [float(d) for d in grid]
    for delta in grid:
        if not 0.0 < delta <= 1.0:
            raise ValueError(f"delta grid values must lie in (0, 1], got {delta}")
    if workers is None:
        workers = int(os.environ.get("MUXNCS_THREADS", "1") or 1)
    workers = max(1, min(workers, len(grid) or 1))
    if workers == 1:
        return [_sweep_point(delta, modes, tol) for delta in grid]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda d: _sweep_point(d, modes, tol), grid))


def sweep_to_csv(rows) -> str:
    """Render sweep rows as CSV (header delta,epsilon_bar,margin_c1..c3,status)."""
    lines = ["delta,epsilon_bar,margin_c1,margin_c2,margin_c3,status"]
    for row in rows:
        eps = "" if row.epsilon_bar is None else str(float(row.epsilon_bar))
        if row.margins is None:
            m1 = m2 = m3 = ""
        else:
            m1, m2, m3 = (str(float(m)) for m in row.margins)
        lines.append(f"{float(row.delta)},{eps},{m1},{m2},{m3},{row.status}")
    return "\n".join(lines) + "\n"
