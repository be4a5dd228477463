"""Command-line front end: analyze, sweep, simulate, train, compare.

Every command reads a JSON run configuration, writes CSV/JSON artifacts
plus a rendered PNG into the output directory, and is deterministic given
the configured seed (wall-clock timestamps only ever go to run_meta.json).

Exit codes: 0 success, 1 usage/validation error, 2 infeasible,
3 numerical/solver failure, 4 training failure.
"""

from __future__ import annotations

import functools
import json
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import __version__
from .model import PlantModel, build_mode_set
from .rl import TrainConfig, curve_to_csv, load_weights, save_weights, train
from .sim import (Always, CostWeights, EpsilonGreedy, NetworkConfig, QNetworkGreedy,
                  RoundRobin, UniformRandom, average_reward_stats, decay_to_csv,
                  monte_carlo_decay, simulate, trace_to_csv)
from .stability import (Infeasible, NoFeasibleEpsilon, NonMonotoneFeasibility,
                        NumericalError, StabilityCertificate, find_epsilon_bar,
                        lmi_feasible, sweep_delta, sweep_to_csv)

# click would exit with 2 on usage errors, which collides with the
# "infeasible" exit code; remap to the documented contract.
click.UsageError.exit_code = 1

POLICY_NAMES = ("egreedy", "round-robin", "round-robin3", "random",
                "always:+1", "always:0", "always:-1", "dqn:<weights-file>",
                "dqn-greedy:<weights-file>")


@dataclass
class RunConfig:
    plant: PlantModel
    delta: float
    cost: CostWeights
    horizon: int
    seed: int
    epsilon: Optional[float]
    x0: Optional[np.ndarray]
    init_box: float
    path: str


def load_config(path: str) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(2, "no such config file", str(p))
    doc = json.loads(p.read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must be a JSON object")
    if "plant" not in doc:
        raise ValueError(f"config {path} is missing the 'plant' section")
    plant_doc = doc["plant"]
    if isinstance(plant_doc, str):
        plant_path = (p.parent / plant_doc) if not Path(plant_doc).is_absolute() else Path(plant_doc)
        if not plant_path.exists():
            raise FileNotFoundError(2, "no such plant file", str(plant_path))
        plant_doc = json.loads(plant_path.read_text())
    plant = PlantModel.from_dict(plant_doc)

    if "delta" not in doc:
        raise ValueError(f"config {path} is missing 'delta'")
    delta = float(doc["delta"])
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")

    cost_doc = doc.get("cost", {})
    Q = np.asarray(cost_doc["Q"], dtype=float) if "Q" in cost_doc else np.eye(plant.n)
    R = np.asarray(cost_doc["R"], dtype=float) if "R" in cost_doc else np.eye(plant.m)
    cost = CostWeights(Q=Q, R=R, lam=float(cost_doc.get("lambda", 0.5)),
                       beta=float(cost_doc.get("beta", 0.95)))

    horizon = int(doc.get("horizon", 200))
    seed = int(doc.get("seed", 0))
    epsilon = float(doc["epsilon"]) if "epsilon" in doc else None
    x0 = np.asarray(doc["x0"], dtype=float) if "x0" in doc else None
    init_box = float(doc.get("initial_box", 10.0))
    return RunConfig(plant=plant, delta=delta, cost=cost, horizon=horizon,
                     seed=seed, epsilon=epsilon, x0=x0, init_box=init_box,
                     path=str(p))


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _exit_codes(fn):
    """Map exception classes onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (SystemExit, click.exceptions.Exit, click.ClickException):
            raise
        except FileNotFoundError as exc:
            _fail(3, f"file not found: {exc.filename or exc}")
        except NonMonotoneFeasibility as exc:
            _fail(3, str(exc))
        except NumericalError as exc:
            _fail(3, str(exc))
        except ValueError as exc:
            _fail(1, str(exc))

    return wrapper


def _outdir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_meta(out: Path, command: str, params: dict):
    _write_json(out / "run_meta.json", {
        "command": command,
        "parameters": params,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "version": __version__,
    })


def _save_certificate(out: Path, cert: StabilityCertificate):
    _write_json(out / "certificate.json", {
        "delta": cert.delta,
        "epsilon_bar": cert.epsilon,
        "margins": [float(m) for m in cert.margins],
        "V": [[float(v) for v in row] for row in cert.V],
    })


def _load_certificate(path: Path) -> StabilityCertificate:
    doc = json.loads(path.read_text())
    try:
        return StabilityCertificate(V=np.asarray(doc["V"], dtype=float),
                                    margins=np.asarray(doc["margins"], dtype=float),
                                    epsilon=float(doc["epsilon_bar"]),
                                    delta=float(doc["delta"]))
    except KeyError as exc:
        raise ValueError(f"certificate {path} is missing field {exc}") from exc


def _resolve_epsilon(cfg: RunConfig, out: Path, modes, cli_eps, tol: float = 1e-3) -> float:
    """Exploration rate for egreedy simulation: flag, config, saved
    certificate, or a fresh feasibility search, in that order."""
    if cli_eps is not None:
        return float(cli_eps)
    if cfg.epsilon is not None:
        return cfg.epsilon
    cert_path = out / "certificate.json"
    if cert_path.exists():
        cert = _load_certificate(cert_path)
        if abs(cert.delta - cfg.delta) <= 1e-12:
            return cert.epsilon
    result = find_epsilon_bar(cfg.delta, modes, tol=tol)
    if isinstance(result, NoFeasibleEpsilon):
        click.echo(f"no feasible exploration rate at delta={cfg.delta}", err=True)
        sys.exit(2)
    eps_bar, _ = result
    click.echo(f"using computed certified epsilon = {eps_bar:.6g}")
    return eps_bar


def _resolve_policy(name: str, cfg: RunConfig, out: Path, modes, cli_eps):
    name = name.strip()
    if name == "egreedy":
        eps = _resolve_epsilon(cfg, out, modes, cli_eps)
        return EpsilonGreedy(eps, Always(0)), f"egreedy({eps:.6g})"
    if name == "round-robin":
        return RoundRobin((1, -1)), "round-robin"
    if name == "round-robin3":
        return RoundRobin((1, 0, -1)), "round-robin3"
    if name == "random":
        return UniformRandom(), "random"
    if name.startswith("always:"):
        value = name.split(":", 1)[1]
        table = {"+1": 1, "1": 1, "0": 0, "-1": -1}
        if value not in table:
            raise ValueError(f"unknown policy {name!r}; valid policies: {', '.join(POLICY_NAMES)}")
        return Always(table[value]), name
    if name.startswith(("dqn:", "dqn-greedy:")):
        kind, _, path_part = name.partition(":")
        wpath = Path(path_part)
        if not wpath.exists():
            raise FileNotFoundError(2, "no such weights file", str(wpath))
        net = load_weights(json.loads(wpath.read_text()))
        n, m = cfg.plant.n, cfg.plant.m
        if net.sizes[0] not in (n, 2 * n + m):
            raise ValueError(f"weights expect input dimension {net.sizes[0]}; "
                             f"the plant offers {n} (or {2 * n + m} augmented)")
        augmented = net.sizes[0] == 2 * n + m and net.sizes[0] != n
        greedy = QNetworkGreedy(net, augmented=augmented)
        label = f"{kind}:{wpath.name}"
        eps = net.meta.get("epsilon")
        if kind == "dqn-greedy" or eps is None:
            # the bare argmax policy: no exploration floor, no certificate
            return greedy, label
        # as deployed: keep the exploration rate the network was trained
        # (and certified) with -- stability rests on that floor, not on the
        # learned Q-values
        return EpsilonGreedy(float(eps), greedy), label
    raise ValueError(f"unknown policy {name!r}; valid policies: {', '.join(POLICY_NAMES)}")


def _parse_grid(spec: str):
    spec = spec.strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid must be 'start:stop:count' or comma list, got {spec!r}")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise ValueError("grid count must be >= 1")
        return list(np.linspace(start, stop, count))
    return [float(tok) for tok in spec.split(",") if tok.strip()]


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(version=__version__, prog_name="muxncs")
def cli():
    """Stability-certified scheduling for networked control.

    Set MUXNCS_THREADS to parallelize sweep points.
    """


@cli.command("analyze")
@click.option("-c", "--config", "config_path", required=True, help="Run configuration JSON.")
@click.option("--delta", type=float, default=None, help="Override the configured delta.")
@click.option("--tol", type=float, default=1e-3, show_default=True, help="Bisection tolerance.")
@click.option("-o", "--out", default=".", show_default=True, help="Output directory.")
@_exit_codes
def cmd_analyze(config_path, delta, tol, out):
    """Find the smallest certified exploration rate and save its certificate."""
    cfg = load_config(config_path)
    d = cfg.delta if delta is None else float(delta)
    if not 0.0 < d <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {d}")
    modes = build_mode_set(cfg.plant)
    outdir = _outdir(out)
    _write_meta(outdir, "analyze", {"config": cfg.path, "delta": d, "tol": tol})
    result = find_epsilon_bar(d, modes, tol=tol)
    if isinstance(result, NoFeasibleEpsilon):
        probe = lmi_feasible(d, 1.0, modes, diagnose=True)
        extra = ""
        if isinstance(probe, Infeasible) and probe.best_margin is not None:
            extra = f" (best margin at epsilon=1: {probe.best_margin:.4g})"
        click.echo(f"no exploration rate in [0, 1] is certifiable at delta={d}{extra}", err=True)
        sys.exit(2)
    eps_bar, cert = result
    _save_certificate(outdir, cert)
    click.echo(f"certified epsilon_bar = {eps_bar:.6g} at delta = {d} "
               f"(margins {', '.join(f'{m:.3g}' for m in cert.margins)})")
    click.echo(f"wrote {outdir / 'certificate.json'}")


@cli.command("sweep")
@click.option("-c", "--config", "config_path", required=True, help="Run configuration JSON.")
@click.option("--grid", default="0.1:1.0:10", show_default=True,
              help="Delta grid: 'start:stop:count' or comma-separated values.")
@click.option("--tol", type=float, default=1e-3, show_default=True, help="Bisection tolerance.")
@click.option("-o", "--out", default=".", show_default=True, help="Output directory.")
@_exit_codes
def cmd_sweep(config_path, grid, tol, out):
    """Tabulate the certified exploration rate across delivery probabilities."""
    cfg = load_config(config_path)
    deltas = _parse_grid(grid)
    if not deltas:
        raise ValueError("empty delta grid")
    for d in deltas:
        if not 0.0 < d <= 1.0:
            raise ValueError(f"delta grid values must lie in (0, 1], got {d}")
    modes = build_mode_set(cfg.plant)
    outdir = _outdir(out)
    _write_meta(outdir, "sweep", {"config": cfg.path, "grid": deltas, "tol": tol})
    rows = sweep_delta(deltas, modes, tol=tol)
    (outdir / "sweep.csv").write_text(sweep_to_csv(rows))
    from . import plots
    plots.plot_sweep(rows, outdir / "sweep.png")
    for row in rows:
        eps = "-" if row.epsilon_bar is None else f"{row.epsilon_bar:.6g}"
        click.echo(f"delta={row.delta:.4g}  epsilon_bar={eps}  [{row.status}]")
    click.echo(f"wrote {outdir / 'sweep.csv'}")
    if not any(r.status == "certified" for r in rows):
        sys.exit(2)


@cli.command("simulate")
@click.option("-c", "--config", "config_path", required=True, help="Run configuration JSON.")
@click.option("--policy", default="egreedy", show_default=True,
              help="One of: " + ", ".join(POLICY_NAMES))
@click.option("--runs", type=int, default=1000, show_default=True,
              help="Monte-Carlo runs for the decay estimate.")
@click.option("--epsilon", type=float, default=None,
              help="Exploration rate for the egreedy policy.")
@click.option("--x0", "x0_spec", default=None,
              help="Initial state, comma-separated (default: config x0 or all ones).")
@click.option("-o", "--out", default=".", show_default=True, help="Output directory.")
@_exit_codes
def cmd_simulate(config_path, policy, runs, epsilon, x0_spec, out):
    """Roll out the closed loop; write a trace and the mean-square decay curve."""
    cfg = load_config(config_path)
    if runs < 1:
        raise ValueError("--runs must be >= 1")
    modes = build_mode_set(cfg.plant)
    outdir = _outdir(out)
    pol, pol_name = _resolve_policy(policy, cfg, outdir, modes, epsilon)
    if x0_spec is not None:
        x0 = np.array([float(tok) for tok in x0_spec.split(",")])
    elif cfg.x0 is not None:
        x0 = cfg.x0
    else:
        x0 = np.ones(cfg.plant.n)
    network = NetworkConfig(delta=cfg.delta, seed=cfg.seed, horizon=cfg.horizon)
    _write_meta(outdir, "simulate", {"config": cfg.path, "policy": pol_name,
                                     "runs": runs, "x0": [float(v) for v in x0]})

    trace = simulate(cfg.plant, modes, pol, network, cfg.cost, x0, run=0)
    (outdir / "trace.csv").write_text(trace_to_csv(trace))
    est = monte_carlo_decay(cfg.plant, modes, pol, network, runs, x0=x0)
    (outdir / "decay.csv").write_text(decay_to_csv(est.mean_zeta_sq))
    from . import plots
    plots.plot_decay(est.mean_zeta_sq, est, outdir / "decay.png")

    if est.all_diverged:
        click.echo(f"policy {pol_name}: all {runs} runs diverged")
    else:
        click.echo(f"policy {pol_name}: zeta_const={est.zeta_const:.6g} "
                   f"xi={est.xi:.6g} r_squared={est.r_squared:.4f} "
                   f"(diverged {est.diverged_fraction:.1%})")
    if trace.diverged:
        click.echo("trace diverged (truncated at state norm 1e12)")
    click.echo(f"wrote {outdir / 'trace.csv'}, {outdir / 'decay.csv'}")


@cli.command("train")
@click.option("-c", "--config", "config_path", required=True, help="Run configuration JSON.")
@click.option("--episodes", type=int, default=800, show_default=True)
@click.option("--epsilon", type=float, default=None,
              help="Exploration rate (requires --uncertified unless a certificate covers it).")
@click.option("--uncertified", is_flag=True,
              help="Explicitly allow training without a stability certificate.")
@click.option("--certificate", "cert_path", default=None,
              help="Certificate JSON (default: <out>/certificate.json if present).")
@click.option("--adam", is_flag=True, help="Use adaptive-moment optimization instead of SGD.")
@click.option("--augmented", is_flag=True,
              help="Feed the network the full (x, xhat, uhat) stack instead of x.")
@click.option("-o", "--out", default=".", show_default=True, help="Output directory.")
@_exit_codes
def cmd_train(config_path, episodes, epsilon, uncertified, cert_path, adam, augmented, out):
    """Train the Q-network scheduler with certified exploration."""
    cfg = load_config(config_path)
    if episodes < 0:
        raise ValueError("--episodes must be >= 0")
    modes = build_mode_set(cfg.plant)
    outdir = _outdir(out)

    cert = None
    cpath = Path(cert_path) if cert_path else outdir / "certificate.json"
    if cert_path and not cpath.exists():
        raise FileNotFoundError(2, "no such certificate file", str(cpath))
    if cpath.exists():
        cert = _load_certificate(cpath)
    if cert is None and not (epsilon is not None and uncertified):
        _fail(1, "training is gated on stability: provide a certificate "
                 "(run `muxncs analyze` first, or --certificate PATH) or pass "
                 "both --epsilon and --uncertified to override")
    eps = float(epsilon) if epsilon is not None else cert.epsilon

    network = NetworkConfig(delta=cfg.delta, seed=cfg.seed, horizon=cfg.horizon)
    tc = TrainConfig(epsilon=eps, certificate=cert, episodes=episodes,
                     beta=cfg.cost.beta, optimizer="adam" if adam else "sgd",
                     init_box=cfg.init_box, augmented=augmented)
    _write_meta(outdir, "train", {"config": cfg.path, "episodes": episodes,
                                  "epsilon": eps, "certified": cert is not None,
                                  "optimizer": tc.optimizer,
                                  "input": "zeta" if augmented else "x"})

    def progress(e, total):
        if (e + 1) % 50 == 0 or e == 0:
            click.echo(f"episode {e + 1}/{episodes}: total reward {total:.2f}")

    result = train(cfg.plant, modes, network, cfg.cost, tc,
                   allow_uncertified=uncertified, progress=progress)
    doc = save_weights(result.net)
    (outdir / "weights.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
    (outdir / "reward_curve.csv").write_text(curve_to_csv(result.curve))
    from . import plots
    plots.plot_reward_curve(result.curve, outdir / "reward_curve.png")
    click.echo(f"wrote {outdir / 'weights.json'}, {outdir / 'reward_curve.csv'}")
    if result.failed:
        click.echo(f"training failed: {result.reason}", err=True)
        sys.exit(4)


@cli.command("compare")
@click.option("-c", "--config", "config_path", required=True, help="Run configuration JSON.")
@click.option("--policies", required=True,
              help="Comma-separated policy list, e.g. 'dqn:weights.json,round-robin,random'.")
@click.option("--episodes", type=int, default=100, show_default=True)
@click.option("--epsilon", type=float, default=None,
              help="Exploration rate for any egreedy entry.")
@click.option("-o", "--out", default=".", show_default=True, help="Output directory.")
@_exit_codes
def cmd_compare(config_path, policies, episodes, epsilon, out):
    """Evaluate several policies under identical seeds and initial states."""
    cfg = load_config(config_path)
    names = [tok.strip() for tok in policies.split(",") if tok.strip()]
    if len(names) < 2:
        raise ValueError("--policies must list at least two policies")
    if episodes < 1:
        raise ValueError("--episodes must be >= 1")
    modes = build_mode_set(cfg.plant)
    outdir = _outdir(out)
    network = NetworkConfig(delta=cfg.delta, seed=cfg.seed, horizon=cfg.horizon)
    _write_meta(outdir, "compare", {"config": cfg.path, "policies": names,
                                    "episodes": episodes})

    rows = []
    for name in names:
        pol, pol_name = _resolve_policy(name, cfg, outdir, modes, epsilon)
        mean, stderr, _ = average_reward_stats(cfg.plant, modes, pol, network,
                                               cfg.cost, episodes,
                                               init_box=cfg.init_box)
        rows.append((pol_name, mean, stderr))
        click.echo(f"{pol_name}: avg_reward={mean:.4f} (stderr {stderr:.4f})")

    lines = ["policy,avg_reward,stderr,episodes"]
    for pol_name, mean, stderr in rows:
        lines.append(f"{pol_name},{str(float(mean))},{str(float(stderr))},{episodes}")
    (outdir / "compare.csv").write_text("\n".join(lines) + "\n")
    from . import plots
    plots.plot_compare([r[0] for r in rows], [r[1] for r in rows],
                       [r[2] for r in rows], outdir / "compare.png")
    click.echo(f"wrote {outdir / 'compare.csv'}")


def main():
    cli(prog_name="muxncs")


if __name__ == "__main__":
    main()
