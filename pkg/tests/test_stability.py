import numpy as np
import pytest

import muxncs.stability as stab
from muxncs.markov import ExploitParams, ModeDistribution, corner_case, \
    mode_distribution, switch_distribution
from muxncs.model import ModeSet
from muxncs.stability import (DecayEstimate, Infeasible, NoFeasibleEpsilon,
                              NonMonotoneFeasibility, SolverFailure,
                              StabilityCertificate, SweepRow, corner_margins,
                              find_epsilon_bar, lmi_feasible, lmi_margin,
                              spectral_radius_mss, sweep_delta, sweep_to_csv)


def scalar_modes(a1, a3, a0):
    """Modes that are multiples of the identity: every question has a closed form.

    With Gamma_1 = a1 I, Gamma_-1 = a3 I and the hold matrix a0 I, the
    second-moment map is (sum_j P_j a_j^2) I, so MSS reduces to a scalar
    comparison and the LMI boundary can be computed by hand.
    """
    d = 3  # n = 1, m = 1
    g1, g3, g0 = a1 * np.eye(d), a3 * np.eye(d), a0 * np.eye(d)
    return ModeSet(gamma=(g1, g0, g3, g0, g0), n=1, m=1)


def scalar_factor(a1, a3, a0, delta, switch):
    probs = mode_distribution(delta, switch).probs
    return float(probs @ np.array([a1, a0, a3, a0, a0]) ** 2)


# boundary of 1.1025 - 0.8525 eps < 1 for the (0.5, 0.5, 1.05) system at delta=1
_EPS_STAR = 0.1025 / 0.8525


@pytest.fixture(scope="module")
def demo_search(demo_modes):
    return find_epsilon_bar(0.8, demo_modes)


@pytest.fixture(scope="module")
def cert_08(demo_modes):
    cert = lmi_feasible(0.8, 0.8, demo_modes)
    assert isinstance(cert, StabilityCertificate)
    return cert


# --------------------------------------------------------- spectral radius

def test_spectral_radius_pure_hold_is_one(demo_modes):
    dist = ModeDistribution(np.array([0.0, 0.0, 0.0, 0.0, 1.0]))
    assert abs(spectral_radius_mss(dist, demo_modes) - 1.0) < 1e-9


def test_spectral_radius_contractive_scalar():
    dist = mode_distribution(0.7, corner_case(3, 0.3))
    rho = spectral_radius_mss(dist, scalar_modes(0.5, 0.5, 0.5))
    assert abs(rho - 0.25) < 1e-12


def test_spectral_radius_single_mode():
    dist = ModeDistribution(np.array([1.0, 0.0, 0.0, 0.0, 0.0]))
    rho = spectral_radius_mss(dist, scalar_modes(0.9, 0.5, 0.5))
    assert abs(rho - 0.81) < 1e-12


def test_spectral_radius_matches_scalar_factor():
    modes = scalar_modes(0.5, 0.5, 1.05)
    for delta, eps in ((1.0, 0.3), (0.6, 0.5), (0.25, 0.0)):
        switch = switch_distribution(eps, ExploitParams(p=0.2, q=0.3))
        rho = spectral_radius_mss(mode_distribution(delta, switch), modes)
        assert abs(rho - scalar_factor(0.5, 0.5, 1.05, delta, switch)) < 1e-10


# -------------------------------------------------------------- LMI margins

def test_lmi_margin_scalar_closed_form():
    modes = scalar_modes(0.5, 0.5, 1.05)
    dist = mode_distribution(1.0, corner_case(3, 0.2))
    factor = 1.1025 - 0.8525 * 0.2
    margin = lmi_margin(2.0 * np.eye(3), dist, modes)
    assert abs(margin - 2.0 * (factor - 1.0)) < 1e-12


def test_corner_margins_shape(demo_modes):
    m = corner_margins(np.eye(demo_modes.dim), 0.8, 0.5, demo_modes)
    assert m.shape == (3,)


# ------------------------------------------------------------- lmi_feasible

def test_lmi_feasible_validates_inputs(demo_modes):
    with pytest.raises(ValueError, match="delta"):
        lmi_feasible(0.0, 0.5, demo_modes)
    with pytest.raises(ValueError, match="epsilon"):
        lmi_feasible(0.8, 1.5, demo_modes)


def test_infeasible_point_with_diagnostic(demo_modes):
    res = lmi_feasible(0.8, 0.001, demo_modes, diagnose=True)
    assert isinstance(res, Infeasible)
    assert (res.delta, res.epsilon) == (0.8, 0.001)
    assert res.best_margin is not None and res.best_margin > 0


def test_infeasible_no_diagnostic_by_default(demo_modes):
    res = lmi_feasible(0.8, 0.001, demo_modes)
    assert isinstance(res, Infeasible) and res.best_margin is None


def test_certificate_implies_mss_for_all_exploit_policies(cert_08, demo_modes):
    fresh = cert_08.verify(demo_modes)
    assert (fresh < stab.VERIFY_TOL).all()
    rng = np.random.default_rng(7)
    for _ in range(20):
        q = rng.uniform(0, 1)
        p = rng.uniform(0, 1 - q)
        switch = switch_distribution(cert_08.epsilon, ExploitParams(p=p, q=q))
        dist = mode_distribution(cert_08.delta, switch)
        assert lmi_margin(cert_08.V, dist, demo_modes) < 0
        assert spectral_radius_mss(dist, demo_modes) < 1


def test_certificate_dict_fields(cert_08):
    doc = cert_08.to_dict()
    assert set(doc) == {"delta", "epsilon", "margins", "V"}
    assert len(doc["margins"]) == 3
    assert all(isinstance(v, float) for row in doc["V"] for v in row)


# --------------------------------------------- certificate verify rejections

def test_verify_rejects_wrong_shape(cert_08, demo_modes):
    bad = StabilityCertificate(V=np.eye(3), margins=cert_08.margins,
                               epsilon=cert_08.epsilon, delta=cert_08.delta)
    with pytest.raises(ValueError, match="shape"):
        bad.verify(demo_modes)


def test_verify_rejects_asymmetry(cert_08, demo_modes):
    V = cert_08.V.copy()
    V[0, 1] += 1e-6
    bad = StabilityCertificate(V=V, margins=cert_08.margins,
                               epsilon=cert_08.epsilon, delta=cert_08.delta)
    with pytest.raises(ValueError, match="symmetric"):
        bad.verify(demo_modes)


def test_verify_rejects_deflated_scale(cert_08, demo_modes):
    bad = StabilityCertificate(V=0.5 * cert_08.V, margins=cert_08.margins,
                               epsilon=cert_08.epsilon, delta=cert_08.delta)
    with pytest.raises(ValueError, match="eigenvalue"):
        bad.verify(demo_modes)


def test_verify_rejects_wrong_operating_point(cert_08, demo_modes):
    # certificate claims an epsilon far below what its V supports
    bad = StabilityCertificate(V=cert_08.V, margins=cert_08.margins,
                               epsilon=0.01, delta=cert_08.delta)
    with pytest.raises(ValueError, match="margins"):
        bad.verify(demo_modes)


# --------------------------------------------------------- find_epsilon_bar

def test_epsilon_bar_demo_point(demo_search, demo_modes):
    eps_bar, cert = demo_search
    assert abs(eps_bar - 0.2625) < 0.005
    assert cert.epsilon == eps_bar and cert.delta == 0.8
    cert.verify(demo_modes)


def test_epsilon_bar_scalar_closed_form():
    eps_bar, cert = find_epsilon_bar(1.0, scalar_modes(0.5, 0.5, 1.05))
    assert _EPS_STAR - 1e-9 <= eps_bar <= _EPS_STAR + 1.1e-3
    assert isinstance(cert, StabilityCertificate)


def test_epsilon_bar_zero_when_always_stable():
    eps_bar, cert = find_epsilon_bar(0.5, scalar_modes(0.5, 0.5, 0.5))
    assert eps_bar == 0.0
    assert cert.epsilon == 0.0


def test_epsilon_bar_none_when_never_stable():
    res = find_epsilon_bar(0.8, scalar_modes(1.2, 1.2, 1.2))
    assert isinstance(res, NoFeasibleEpsilon)
    assert len(res.grid) == 21
    assert res.feasible_flags == (False,) * 21


def test_epsilon_bar_rejects_bad_tol(demo_modes):
    with pytest.raises(ValueError, match="tol"):
        find_epsilon_bar(0.8, demo_modes, tol=0.0)


def _fake_cert(delta, eps):
    return StabilityCertificate(V=np.eye(3), margins=np.array([-0.5, -0.5, -0.5]),
                                epsilon=float(eps), delta=float(delta))


def test_non_monotone_grid_raises(monkeypatch):
    def fake(delta, eps, modes, diagnose=False):
        if 0.29 <= eps <= 0.51:
            return _fake_cert(delta, eps)
        return Infeasible(delta=delta, epsilon=eps)

    monkeypatch.setattr(stab, "lmi_feasible", fake)
    with pytest.raises(NonMonotoneFeasibility, match="not monotone") as exc:
        find_epsilon_bar(0.8, scalar_modes(0.5, 0.5, 0.5))
    assert len(exc.value.grid) == 21 and len(exc.value.flags) == 21
    assert exc.value.flags[6] is True and exc.value.flags[11] is False


def test_unknown_points_never_certify(monkeypatch):
    """Solver blackouts below the boundary must push the answer up, not down."""
    calls = {"unknown": 0}

    def fake(delta, eps, modes, diagnose=False):
        if 0.225 <= eps < 0.23:
            calls["unknown"] += 1
            raise SolverFailure("blackout")
        if eps >= 0.23:
            return _fake_cert(delta, eps)
        return Infeasible(delta=delta, epsilon=eps)

    monkeypatch.setattr(stab, "lmi_feasible", fake)
    eps_bar, cert = find_epsilon_bar(0.8, scalar_modes(0.5, 0.5, 0.5))
    assert calls["unknown"] > 0
    assert 0.23 <= eps_bar <= 0.232
    assert cert.epsilon == eps_bar


def test_all_unknown_raises_solver_failure(monkeypatch):
    def fake(delta, eps, modes, diagnose=False):
        raise SolverFailure("blackout")

    monkeypatch.setattr(stab, "lmi_feasible", fake)
    with pytest.raises(SolverFailure, match="cannot rule out"):
        find_epsilon_bar(0.8, scalar_modes(0.5, 0.5, 0.5))


# ----------------------------------------------------------------- sweeping

def test_sweep_matches_single_search():
    modes = scalar_modes(0.5, 0.5, 1.05)
    rows = sweep_delta([1.0], modes)
    eps_bar, cert = find_epsilon_bar(1.0, modes)
    assert rows[0].status == "certified"
    assert rows[0].epsilon_bar == eps_bar
    assert np.array_equal(rows[0].margins, cert.margins)


def test_sweep_parallel_matches_serial():
    modes = scalar_modes(0.5, 0.5, 1.05)
    grid = [0.6, 1.0]
    serial = sweep_delta(grid, modes, workers=1)
    parallel = sweep_delta(grid, modes, workers=2)
    for a, b in zip(serial, parallel):
        assert (a.delta, a.epsilon_bar, a.status) == (b.delta, b.epsilon_bar, b.status)
        assert np.array_equal(a.margins, b.margins)


def test_sweep_flags_failures_per_point(monkeypatch):
    def fake(delta, modes, tol=1e-3):
        if delta < 0.3:
            raise SolverFailure("blackout")
        if delta < 0.6:
            raise NonMonotoneFeasibility(delta, [0.0, 1.0], [True, False])
        return NoFeasibleEpsilon(delta=delta)

    monkeypatch.setattr(stab, "find_epsilon_bar", fake)
    rows = sweep_delta([0.2, 0.5, 0.9], scalar_modes(0.5, 0.5, 0.5))
    assert [r.status for r in rows] == ["solver_failure", "non_monotone",
                                        "no_feasible_epsilon"]
    assert all(r.epsilon_bar is None and r.margins is None for r in rows)


def test_sweep_rejects_bad_grid(demo_modes):
    with pytest.raises(ValueError, match="grid"):
        sweep_delta([0.5, 0.0], demo_modes)


def test_sweep_csv_rendering():
    rows = [
        SweepRow(0.5, 0.25, np.array([-0.1, -0.2, -0.3]), "certified"),
        SweepRow(0.1, None, None, "no_feasible_epsilon"),
    ]
    assert sweep_to_csv(rows) == (
        "delta,epsilon_bar,margin_c1,margin_c2,margin_c3,status\n"
        "0.5,0.25,-0.1,-0.2,-0.3,certified\n"
        "0.1,,,,,no_feasible_epsilon\n"
    )


# ------------------------------------------------------------ DecayEstimate

def test_decay_estimate_validation():
    with pytest.raises(ValueError, match="zeta_const"):
        DecayEstimate(zeta_const=0.5, xi=0.9, r_squared=1.0)
    with pytest.raises(ValueError, match="positive"):
        DecayEstimate(zeta_const=2.0, xi=0.0, r_squared=1.0)
    est = DecayEstimate(zeta_const=np.inf, xi=np.inf, r_squared=0.0,
                        all_diverged=True)
    assert est.all_diverged
