"""Command-line front end: ``unified-mfq {run,sweep,oracle,diagnose,toy}``.

Configuration is a YAML file with the sections below; every key is
optional unless marked, and unknown keys are rejected::

    problem:            # required
      source: benchmark # benchmark | fixture | coordination | toy | file
      path: null        # problem JSON when source = file
      benchmark: {}     # BenchmarkParams overrides (grid_step, h, drift_mode, ...)
    mode: deterministic # deterministic | sampled
    rates:              # required for run, sweep and toy
      rho_mu: 0.001
      rho_q: 1.0
    iteration: {max_iters: 10000, record_every: 100, tol_T: 1e-10, tol_P: 1e-10,
                stop_on_tolerance: false}
    episodes: {episodes: 1000, steps_per_episode: 200, epsilon: 0.1,
               env_mu: current, record_every: 100}
    seed: 0
    output: out
    diagnostics: {enabled: false, W: null, fixed_points: []}
    sweep: {ratios: [], hold: rho_q, value: null}
    toy: {q0: 0.0, mu0: -0.2, max_iters: 1000000, tol: 1e-12}

Trajectory CSVs begin with one ``#`` comment line carrying a timestamp;
everything after it is deterministic for a given config and seed.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 partial sweep failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from unified_mfq import __version__
from unified_mfq.core import LearningRates, ProblemSpec, sup_norm, uniform
from unified_mfq.diagnostics import (
    EXACT,
    AssumptionConstants,
    LyapunovMonitor,
    check_envelope,
    estimate_constants,
    estimate_lipschitz,
    greedy_flip_pairs,
    probe_distributions,
    report,
    suggest_weight,
    theorem_constants,
    uniqueness_check,
)
from unified_mfq.engine import IterationConfig, RunRecord, ToyState, operators, run, toy_run
from unified_mfq.environments import (
    BenchmarkParams,
    MixtureFixture,
    build_benchmark_spec,
    coordination_problem,
    load_problem,
)
from unified_mfq.errors import AssumptionViolation, ConfigError, ConvergenceError, NumericalFailure
from unified_mfq.learner import EpisodeConfig, init_learner, load_checkpoint, run_episode, save_checkpoint, save_learner
from unified_mfq.oracles import mfc_solve, mfg_solve, residuals

logger = logging.getLogger("unified_mfq")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
SOURCES = ("benchmark", "fixture", "coordination", "toy", "file")
DRIFT_FLAGS = {"paper": "paper_mean_x_plus_a", "euler": "euler_mean_x_plus_ah"}

DEFAULTS = {
    "problem": {"source": None, "path": None, "benchmark": {}},
    "mode": "deterministic",
    "rates": {"rho_mu": None, "rho_q": None},
    "iteration": {"max_iters": 10_000, "record_every": 100, "tol_T": 1e-10, "tol_P": 1e-10,
                  "stop_on_tolerance": False},
    "episodes": {"episodes": 1000, "steps_per_episode": 200, "epsilon": 0.1, "env_mu": "current",
                 "record_every": 100},
    "seed": 0,
    "output": "out",
    "diagnostics": {"enabled": False, "W": None, "fixed_points": []},
    "sweep": {"ratios": [], "hold": "rho_q", "value": None},
    "toy": {"q0": 0.0, "mu0": -0.2, "max_iters": 1_000_000, "tol": 1e-12},
}
FREE_FORM = {("problem", "benchmark")}


# ---------------------------------------------------------------------------
# configuration


def _merge(defaults: dict, doc: dict, where: tuple = ()) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in doc.items():
        path = where + (key,)
        if key not in defaults:
            raise ConfigError(f"unknown configuration key '{'.'.join(map(str, path))}'")
        if isinstance(defaults[key], dict) and path not in FREE_FORM:
            if not isinstance(value, dict):
                raise ConfigError(f"'{'.'.join(path)}' must be a mapping")
            out[key] = _merge(defaults[key], value, path)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(f"{loc}: YAML parse error: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge(DEFAULTS, doc)
    return cfg


def _require(cfg: dict, *path):
    node = cfg
    for key in path:
        node = node.get(key) if isinstance(node, dict) else None
    if node is None:
        raise ConfigError(f"missing required configuration field '{'.'.join(path)}'")
    return node


def _rates(cfg: dict) -> LearningRates:
    try:
        return LearningRates(float(_require(cfg, "rates", "rho_mu")), float(_require(cfg, "rates", "rho_q")))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"rates: {exc}") from None


def build_problem(cfg: dict) -> ProblemSpec:
    source = _require(cfg, "problem", "source")
    if source not in SOURCES:
        raise ConfigError(f"problem.source must be one of {SOURCES}, got {source!r}")
    if source == "toy":
        raise ConfigError("the toy problem is scalar; use the 'toy' command or mode deterministic via 'run'")
    if source == "benchmark":
        names = {f.name for f in fields(BenchmarkParams)}
        overrides = dict(cfg["problem"]["benchmark"] or {})
        for key in overrides:
            if key not in names:
                raise ConfigError(f"unknown configuration key 'problem.benchmark.{key}'")
        try:
            return build_benchmark_spec(BenchmarkParams(**overrides))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"problem.benchmark: {exc}") from None
    if source == "fixture":
        return MixtureFixture().build()
    if source == "coordination":
        return coordination_problem()
    return load_problem(_require(cfg, "problem", "path"))


def apply_flags(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["output"] = args.out
    if getattr(args, "env_mu", None):
        cfg["episodes"]["env_mu"] = args.env_mu
    if getattr(args, "drift", None):
        cfg["problem"]["benchmark"] = {**(cfg["problem"]["benchmark"] or {}), "drift_mode": DRIFT_FLAGS[args.drift]}
    return cfg


# ---------------------------------------------------------------------------
# artifacts


def _fmt(v) -> str:
    v = float(v)
    return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))


def write_csv(path: Path, command: str, header, rows) -> None:
    buf = io.StringIO()
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    buf.write(f"# unified-mfq {__version__} {command} generated {stamp}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([r if isinstance(r, str) else _fmt(r) for r in row])
    path.write_text(buf.getvalue())


def read_csv_body(path) -> list[list[str]]:
    """Rows of a CSV written by this tool, without the timestamped comment line."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.reader(lines))


def trajectory_header(n_states: int) -> list[str]:
    return ["k", "lyapunov", "q_gap", "mu_gap", "res_T_sup", "res_P_l1"] + [f"mu_{i}" for i in range(n_states)]


def trajectory_rows(rec: RunRecord):
    for i, k in enumerate(rec.k):
        yield [str(k), rec.lyapunov[i], rec.q_gap[i], rec.mu_gap[i], rec.res_T[i], rec.res_P[i], *rec.mu[i]]


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# run orchestration


def _reference_points(spec: ProblemSpec, cfg: dict):
    pts = [load_checkpoint(p)["q"] for p in cfg["diagnostics"]["fixed_points"] or []]
    if not pts:
        pts = [mfg_solve(spec)[0], mfc_solve(spec)[0]]
    return pts


def _weight(spec: ProblemSpec, cfg: dict, ac: AssumptionConstants | None = None, notes=None) -> float:
    """Configured Lyapunov weight, else the suggested one, else 1 when no certificate exists."""
    W = cfg["diagnostics"]["W"]
    if W is not None:
        return float(W)
    try:
        if ac is None:
            ac = _constants(spec, cfg)[0]
        return suggest_weight(ac, _rates(cfg), spec.gamma, spec.h)
    except AssumptionViolation as exc:
        if notes is not None:
            notes.append(f"{exc}; using W = 1")
        return 1.0


def _monitor(spec: ProblemSpec, cfg: dict):
    if not cfg["diagnostics"]["enabled"]:
        return None
    return LyapunovMonitor(spec, _reference_points(spec, cfg), _weight(spec, cfg))


def execute(cfg: dict, spec: ProblemSpec | None = None) -> RunRecord:
    """One deterministic or sampled run; returns the record (sampled: per recorded episode)."""
    spec = spec or build_problem(cfg)
    rates = _rates(cfg)
    monitor = _monitor(spec, cfg)
    if cfg["mode"] == "deterministic":
        it = cfg["iteration"]
        try:
            icfg = IterationConfig(rates, int(it["max_iters"]), float(it["tol_T"]), float(it["tol_P"]),
                                   int(it["record_every"]), bool(it["stop_on_tolerance"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"iteration: {exc}") from None
        return run(spec, icfg, monitor=monitor)
    if cfg["mode"] != "sampled":
        raise ConfigError(f"mode must be 'deterministic' or 'sampled', got {cfg['mode']!r}")
    ep = cfg["episodes"]
    try:
        ecfg = EpisodeConfig(int(ep["episodes"]), int(ep["steps_per_episode"]), rates, float(ep["epsilon"]),
                             int(cfg["seed"]), ep["env_mu"], int(ep["record_every"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"episodes: {exc}") from None
    state = init_learner(spec, ecfg)
    rec = RunRecord()
    for _ in range(ecfg.episodes):
        run_episode(state, spec, ecfg)
        if not np.all(np.isfinite(state.q)):
            raise NumericalFailure(f"non-finite Q-table after episode {state.episode}", iteration=state.episode)
        if state.episode % ecfg.record_every == 0 or state.episode == ecfg.episodes:
            mu_T = state.mu[-1]
            drift, bell = operators(state.q, mu_T, spec)
            diag = monitor(state.episode, state.q, mu_T) if monitor else None
            rec.append(state.episode, state.q, mu_T, np.abs(bell).max(), 0.5 * np.abs(drift).sum(), diag)
    rec.final_q, rec.final_mu = state.q, state.mu[-1]
    rec.learner = state
    return rec


def _write_run(out: Path, spec: ProblemSpec, cfg: dict, rec: RunRecord, command: str) -> None:
    write_csv(out / "trajectory.csv", command, trajectory_header(spec.states.size), trajectory_rows(rec))
    learner = getattr(rec, "learner", None)
    if learner is not None:
        save_learner(out / "checkpoint.json", spec, learner)
    else:
        save_checkpoint(out / "checkpoint.json", spec, rec.final_q, rec.final_mu, rec.k[-1])
    if cfg["diagnostics"]["enabled"]:
        text, summary = _diagnose(spec, cfg, rec)
        (out / "report.txt").write_text(text)
        (out / "report.json").write_text(summary)


def cmd_run(cfg: dict, args) -> int:
    if cfg["problem"]["source"] == "toy":
        return cmd_toy(cfg, args)
    spec = build_problem(cfg)
    rec = execute(cfg, spec)
    out = _out_dir(cfg)
    _write_run(out, spec, cfg, rec, "run")
    print(f"run finished: {len(rec)} records, final T residual {rec.res_T[-1]:.3e}, "
          f"P residual {rec.res_P[-1]:.3e} -> {out}")
    return EXIT_OK


def cmd_toy(cfg: dict, args) -> int:
    rates = _rates(cfg)
    t = cfg["toy"]
    traj = toy_run(ToyState(float(t["q0"]), float(t["mu0"])), rates, int(t["max_iters"]), float(t["tol"]))
    out = _out_dir(cfg)
    write_csv(out / "trajectory.csv", "toy", ["k", "q", "mu"],
              ([str(k), s.q, s.mu] for k, s in enumerate(traj)))
    print(f"toy run: {len(traj) - 1} steps, final (Q, mu) = ({traj[-1].q:.6f}, {traj[-1].mu:.6f}) -> {out}")
    return EXIT_OK


def _sweep_rates(cfg: dict, ratio: float) -> LearningRates:
    hold = cfg["sweep"]["hold"]
    value = cfg["sweep"]["value"]
    if ratio <= 0:
        raise ConfigError("sweep ratios must be positive")
    if hold == "rho_q":
        rho_q = float(value) if value is not None else float(_require(cfg, "rates", "rho_q"))
        return LearningRates(rho_q / ratio, rho_q)
    if hold == "product":
        prod = float(value) if value is not None else _rates(cfg).rho_mu * _rates(cfg).rho_q
        return LearningRates(math.sqrt(prod / ratio), math.sqrt(prod * ratio))
    raise ConfigError(f"sweep.hold must be 'rho_q' or 'product', got {hold!r}")


def _sweep_one(job):
    cfg, idx = job
    try:
        spec = build_problem(cfg)
        rec = execute(cfg, spec)
        out = _out_dir(cfg)
        _write_run(out, spec, cfg, rec, "sweep")
        return idx, rec.final_q, None
    except (NumericalFailure, ConvergenceError, AssumptionViolation, ConfigError, ValueError) as exc:
        return idx, None, f"{type(exc).__name__}: {exc}"


def cmd_sweep(cfg: dict, args) -> int:
    ratios = [float(r) for r in (cfg["sweep"]["ratios"] or [])]
    if not ratios:
        raise ConfigError("missing required configuration field 'sweep.ratios'")
    spec = build_problem(cfg)
    base_out = _out_dir(cfg)
    jobs = []
    for i, ratio in enumerate(ratios):
        sub = copy.deepcopy(cfg)
        r = _sweep_rates(cfg, ratio)
        sub["rates"] = {"rho_mu": r.rho_mu, "rho_q": r.rho_q}
        sub["output"] = str(base_out / f"ratio_{i:02d}")
        jobs.append((sub, i))
    workers = max(1, int(getattr(args, "workers", 1) or 1))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = sorted(pool.map(_sweep_one, jobs), key=lambda r: r[0])
    else:
        results = [_sweep_one(j) for j in jobs]
    q_mfg, _ = mfg_solve(spec)
    q_mfc, _ = mfc_solve(spec)
    v_mfg, v_mfc = q_mfg.min(axis=1), q_mfc.min(axis=1)
    lo, hi = np.minimum(v_mfg, v_mfc), np.maximum(v_mfg, v_mfc)
    n = spec.states.size
    header = ["ratio", "rho_mu", "rho_q", "status", "distance_mfg", "distance_mfc", "ordering_violations"] + \
        [f"value_{i}" for i in range(n)]
    rows, failures = [], 0
    for (sub, i), (_, q, err) in zip(jobs, results):
        r = sub["rates"]
        if q is None:
            failures += 1
            logger.error("ratio %s failed: %s", ratios[i], err)
            rows.append([ratios[i], r["rho_mu"], r["rho_q"], f"failed: {err}", math.nan, math.nan, math.nan]
                        + [math.nan] * n)
            continue
        v = q.min(axis=1)
        viol = int(np.sum((v < lo - 1e-9) | (v > hi + 1e-9)))
        rows.append([ratios[i], r["rho_mu"], r["rho_q"], "ok", sup_norm(q - q_mfg), sup_norm(q - q_mfc), viol, *v])
    write_csv(base_out / "summary.csv", "sweep", header, rows)
    print(f"sweep: {len(ratios) - failures}/{len(ratios)} ratios succeeded -> {base_out / 'summary.csv'}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_oracle(cfg: dict, args) -> int:
    spec = build_problem(cfg)
    out = _out_dir(cfg)
    summary = {}
    for name, solver in (("mfg", mfg_solve), ("mfc", mfc_solve)):
        try:
            q, mu = solver(spec)
        except ConvergenceError as exc:
            hist = ", ".join(f"{h:.3e}" for h in exc.history[-10:])
            print(f"{name} oracle failed: {exc}; last residuals: [{hist}]", file=sys.stderr)
            return EXIT_NUMERIC
        save_checkpoint(out / f"{name}.json", spec, q, mu)
        res_t, res_p = residuals(q, mu, spec)
        summary[name] = {"res_T_sup": res_t, "res_P_tv": res_p}
        print(f"{name}: T residual {res_t:.3e}, P residual {res_p:.3e}")
    (out / "oracle.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def _constants(spec: ProblemSpec, cfg: dict):
    notes = []
    if spec.name == "mixture-fixture":
        fx = MixtureFixture()
        exact = {k: EXACT for k in ("beta", "L_p", "L_Q", "L_f", "f_sup")}
        ac = AssumptionConstants(fx.doeblin_beta(), fx.lipschitz_p(), fx.lipschitz_q(), fx.lipschitz_f(),
                                 fx.f_sup(), exact)
        notes.append("L_Q is exact for Q-pairs anchored at the fixture's greedy margin")
        return ac, None, notes
    rng = np.random.default_rng(int(cfg["seed"]))
    mus = probe_distributions(spec.states.size, 10, int(cfg["seed"]))
    refs = _reference_points(spec, cfg)
    qs = list(refs) + [np.zeros(spec.shape)]
    scale = max(sup_norm(q) for q in qs) or 1.0
    qs += [refs[0] + rng.normal(scale=1e-3 * scale, size=spec.shape) for _ in range(4)]
    for qa, qb, _ in greedy_flip_pairs(refs[0])[:2]:
        qs += [qa, qb]
    try:
        ac, lip = estimate_constants(spec, qs, mus)
    except AssumptionViolation as exc:
        lip = estimate_lipschitz(spec, qs, mus)
        exc.lipschitz = lip
        raise
    return ac, lip, notes


def _diagnose(spec: ProblemSpec, cfg: dict, rec: RunRecord | None = None):
    try:
        ac, lip, notes = _constants(spec, cfg)
    except AssumptionViolation as exc:
        text = f"assumption constants unavailable: {exc}\n"
        doc = {"error": str(exc), "verdict": "assumption regime violated"}
        lip = getattr(exc, "lipschitz", None)
        if lip is not None:
            text += f"sampled L_p >= {lip.L_p:.6e}, L_Q >= {lip.L_Q:.6e}\n"
            if lip.greedy_discontinuity:
                text += f"WARNING: {lip.message}\n"
            doc["lipschitz"] = {"L_p": lip.L_p, "L_Q": lip.L_Q, "greedy_discontinuity": lip.greedy_discontinuity}
        text += "verdict: assumption regime violated\n"
        return text, json.dumps(doc, indent=1, sort_keys=True) + "\n"
    tc = uq = None
    try:
        uq = uniqueness_check(ac, spec.gamma, spec.h)
        r = cfg["rates"]
        if r["rho_mu"] is not None and r["rho_q"] is not None:
            W = _weight(spec, cfg, ac, notes)
            tc = theorem_constants(ac, _rates(cfg), spec.gamma, spec.h, W)
    except AssumptionViolation as exc:
        notes.append(str(exc))
        notes.append("verdict: assumption regime violated")
    if rec is not None and tc is not None and not np.isnan(rec.lyapunov).any():
        env = check_envelope(rec, tc)
        notes.append(f"trajectory envelope check: {len(env.violations)} violations over {len(env.k)} records")
    return report(ac, tc, uq, lip, notes)


def cmd_diagnose(cfg: dict, args) -> int:
    spec = build_problem(cfg)
    out = _out_dir(cfg)
    text, summary = _diagnose(spec, cfg)
    (out / "report.txt").write_text(text)
    (out / "report.json").write_text(summary)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "oracle": cmd_oracle, "diagnose": cmd_diagnose, "toy": cmd_toy}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unified-mfq", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--workers", type=int, default=1, help="parallel runs for sweep")
        p.add_argument("--env-mu", choices=("current", "previous"), help="distribution used by the sampler")
        p.add_argument("--drift", choices=tuple(DRIFT_FLAGS), help="benchmark transition mean convention")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_flags(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, ConvergenceError, AssumptionViolation) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
