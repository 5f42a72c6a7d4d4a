"""Config-driven experiments and the command-line entry point."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import catalyst as cat
from . import dsgd
from .network import (MixingSchedule, build_graph, iid_schedule, metropolis_weights,
                      periodic_schedule, spectral_consensus_rate, static_schedule,
                      verify_consensus_rate)
from .problems import NoiseModel, Problem, make_logistic_problem, make_quadratic_problem

SCHEMA_VERSION = 1
DEFAULT_MAX_ROUNDS = 10**7


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class NoiseSpec:
    kind: str = "none"
    sigma: float = 0.0
    batch_size: int = 1


@dataclass
class ProblemSpec:
    kind: str = "quadratic"
    n: int = 4
    d: int = 5
    condition_number: float = 10.0
    heterogeneity: float = 0.0
    mu: float = 1.0
    l2: float = 0.1
    samples: int = 32
    noise: NoiseSpec = field(default_factory=NoiseSpec)


@dataclass
class NetworkSpec:
    topology: str = "ring"
    schedule: str = "static"
    tau: int = 1
    prob: float = 0.5
    keep_prob: float = 0.8
    p: float | None = None
    trials: int = 1000
    slack: float = 0.05


@dataclass
class SolverSpec:
    method: str = "dsgd"
    kappa: float | None = None
    eps: float = 1e-6
    T: int | None = None
    eps_grid: list = field(default_factory=list)
    record_every: int = 1
    max_rounds: int = DEFAULT_MAX_ROUNDS


@dataclass
class SeedSpec:
    master: int = 0
    replicates: int = 1


@dataclass
class SweepSpec:
    condition_number: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    sigma: list = field(default_factory=list)


@dataclass
class OutputSpec:
    dir: str = "results"


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    seeds: SeedSpec = field(default_factory=SeedSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def validate(self) -> ExperimentConfig:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {self.schema_version}")
        pr, nw, so = self.problem, self.network, self.solver
        if pr.kind not in ("quadratic", "logistic"):
            raise ConfigError("problem.kind", f"unknown kind {pr.kind!r}")
        if pr.kind == "quadratic" and not pr.mu > 0:
            raise ConfigError("problem.mu", f"mu must be positive (got {pr.mu}); mu = 0 is unsupported")
        if pr.kind == "logistic" and not pr.l2 > 0:
            raise ConfigError("problem.l2", "l2 must be positive; it is the mu of a logistic problem")
        if pr.n < 2:
            raise ConfigError("problem.n", "need at least 2 nodes")
        if pr.d < 1:
            raise ConfigError("problem.d", "dimension must be positive")
        if pr.condition_number < 1:
            raise ConfigError("problem.condition_number", "must be >= 1")
        if pr.heterogeneity < 0:
            raise ConfigError("problem.heterogeneity", "must be non-negative")
        if pr.noise.kind not in ("none", "gaussian", "minibatch"):
            raise ConfigError("problem.noise.kind", f"unknown noise kind {pr.noise.kind!r}")
        if pr.noise.sigma < 0:
            raise ConfigError("problem.noise.sigma", "must be non-negative")
        if nw.topology not in ("ring", "complete", "star", "erdos_renyi"):
            raise ConfigError("network.topology", f"unknown topology {nw.topology!r}")
        if nw.schedule not in ("static", "periodic", "iid"):
            raise ConfigError("network.schedule", f"unknown schedule {nw.schedule!r}")
        if nw.tau < 1:
            raise ConfigError("network.tau", "must be a positive integer")
        if nw.p is not None and not 0 < nw.p <= 1:
            raise ConfigError("network.p", "must lie in (0, 1]")
        if so.method not in ("dsgd", "catalyst"):
            raise ConfigError("solver.method", f"unknown method {so.method!r}")
        if so.kappa is not None and so.kappa < 0:
            raise ConfigError("solver.kappa", "must be non-negative")
        if not so.eps > 0:
            raise ConfigError("solver.eps", "must be positive")
        if any(not e > 0 for e in so.eps_grid):
            raise ConfigError("solver.eps_grid", "all accuracies must be positive")
        if so.T is not None and so.T < 1:
            raise ConfigError("solver.T", "must be at least 1")
        if so.record_every < 1:
            raise ConfigError("solver.record_every", "must be at least 1")
        if so.max_rounds < 1:
            raise ConfigError("solver.max_rounds", "must be at least 1")
        if self.seeds.replicates < 1:
            raise ConfigError("seeds.replicates", "must be at least 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def targets(self) -> list[float]:
        return sorted({float(self.solver.eps), *map(float, self.solver.eps_grid)}, reverse=True)


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{path}.{key}" if path else str(key)
        if key not in fields:
            raise ConfigError(name, "unknown field")
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING \
            else fields[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, name)
        else:
            kwargs[key] = _coerce(value, default, name)
    return cls(**kwargs)


def _coerce(value, default, name):
    if value is None:
        if default is not None:
            raise ConfigError(name, "a value is required")
        return value
    if default is None:
        # optional numeric overrides (kappa, T, p)
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(name, f"expected a number, got {value!r}") from None
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return [float(v) for v in value]
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(name, f"expected a string, got {value!r}")
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path):
    atomic_write(path, cfg.dumps())


def atomic_write(path: str | Path, text: str):
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_problem(cfg: ExperimentConfig, seed: int) -> Problem:
    pr = cfg.problem
    noise = NoiseModel(pr.noise.kind, pr.noise.sigma, pr.noise.batch_size)
    if pr.kind == "quadratic":
        return make_quadratic_problem(pr.n, pr.d, pr.condition_number, pr.heterogeneity, noise,
                                      seed=seed, mu=pr.mu, samples=pr.samples)
    return make_logistic_problem(pr.n, pr.d, pr.samples, pr.l2, pr.heterogeneity, noise, seed)


@dataclass(frozen=True)
class ConsensusEstimate:
    tau: int
    p: float
    method: str
    passed: bool
    max_ratio: float | None = None


def build_schedule(cfg: ExperimentConfig, seed: int) -> tuple[MixingSchedule, ConsensusEstimate]:
    nw = cfg.network
    g = build_graph(nw.topology, cfg.problem.n, seed=seed, prob=nw.prob)
    if not g.is_connected:
        raise ConfigError("network.topology", "graph is disconnected")
    W = metropolis_weights(g)
    if nw.schedule == "static":
        s = static_schedule(W)
    elif nw.schedule == "periodic":
        s = periodic_schedule(W, nw.tau)
    else:
        s = iid_schedule(g, nw.keep_prob, p=1.0, tau=nw.tau)
    if nw.p is not None:
        s = dataclasses.replace(s, p=nw.p)
        rep = verify_consensus_rate(s, nw.trials, seed, nw.slack)
        return s, ConsensusEstimate(s.tau, s.p, "declared", rep.passed, rep.max_ratio)
    if nw.schedule == "iid":
        rep = verify_consensus_rate(s, nw.trials, seed, nw.slack, p=1.0)
        p_hat = 1.0 - rep.max_ratio * (1.0 + nw.slack)
        if not p_hat > 0:
            raise ConfigError("network.keep_prob", "edge sampling too sparse to mix")
        s = dataclasses.replace(s, p=p_hat)
        rep = verify_consensus_rate(s, nw.trials, seed, nw.slack)
        return s, ConsensusEstimate(s.tau, p_hat, "monte_carlo", rep.passed, rep.max_ratio)
    return s, ConsensusEstimate(s.tau, spectral_consensus_rate(W), "spectral", True)


def _ground_truth(p: Problem):
    X0 = np.zeros((p.n, p.d))
    xbar = X0.mean(axis=0)
    return X0, float(np.sum((xbar - p.x_star) ** 2)), p.gap(xbar)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _write_json(path, payload):
    atomic_write(path, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _provenance(cfg, seed) -> dict:
    return {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(),
            "config_hash": cfg.digest(), "seed": seed,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z")}


def run_dsgd_arm(cfg, p, s, est, seed, *, until_target: bool):
    """Plain DSGD with the theory step size; returns ``(record, plan)``."""
    X0, r0, _ = _ground_truth(p)
    so = cfg.solver
    T = so.T or dsgd.horizon_for_accuracy(p, est.tau, est.p, r0, so.eps)
    plan = dsgd.stepsize_theorem1(p, est.tau, est.p, r0, T)
    budget = so.max_rounds if until_target else min(T, so.max_rounds)
    rec = dsgd.dsgd_run(p, s, budget, plan, X0, seed, targets=cfg.targets,
                        stop_at_target=until_target, record_every=so.record_every)
    return rec, plan


def run_catalyst_arm(cfg, p, s, est, seed, *, until_target: bool, kappa=None):
    X0, r0, gap0 = _ground_truth(p)
    so = cfg.solver
    kappa = so.kappa if kappa is None else kappa
    horizon = None
    if kappa == 0:
        horizon = so.T or dsgd.horizon_for_accuracy(p, est.tau, est.p, r0, so.eps)
    return cat.catalyst_dsgd_run(p, s, so.eps, seed, kappa=kappa, X0=X0, r0=r0,
                                 initial_gap=gap0, tau=est.tau, pc=est.p,
                                 max_rounds=so.max_rounds, until_target=until_target,
                                 stop_at_target=until_target, record_every=so.record_every,
                                 targets=cfg.targets, dsgd_horizon=horizon)


def run_replicate(cfg: ExperimentConfig, seed: int, out: Path | None = None) -> dict:
    """One solver run; writes ``record.csv`` (+ ``outer.csv``) and ``run.json`` under ``out``."""
    p = build_problem(cfg, seed)
    s, est = build_schedule(cfg, seed)
    if cfg.solver.method == "dsgd":
        rec, plan = run_dsgd_arm(cfg, p, s, est, seed, until_target=False)
        planned = cfg.solver.T or plan.T
        extra = {"eta": plan.eta, "regime": plan.regime, "T": plan.T, "constants": plan.constants}
        outer_csv = None
    else:
        res = run_catalyst_arm(cfg, p, s, est, seed, until_target=False)
        rec = res.record
        planned = sum(o.T_k for o in res.outer) if res.outer else 0
        extra = {"K": res.K, "outer_steps": len(res.outer), **res.meta}
        outer_csv = res.outer_csv_text()
    truncated = rec.rounds < planned and rec.rounds >= cfg.solver.max_rounds
    summary = dict(rec.summary(), method=cfg.solver.method, truncated=truncated,
                   consensus={"tau": est.tau, "p": est.p, "method": est.method}, **extra)
    if out is not None:
        out = Path(out)
        atomic_write(out / "record.csv", rec.csv_text())
        if outer_csv is not None:
            atomic_write(out / "outer.csv", outer_csv)
        _write_json(out / "run.json", dict(_provenance(cfg, seed), summary=summary))
    return summary


def _arm_counts(rec, targets):
    return {repr(e): rec.reached.get(e) for e in targets}


def compare_replicate(cfg: ExperimentConfig, seed: int, out: Path | None = None) -> dict:
    """Both arms on one seed, each run until the smallest target or the round cap."""
    p = build_problem(cfg, seed)
    s, est = build_schedule(cfg, seed)
    targets = cfg.targets
    d_rec, plan = run_dsgd_arm(cfg, p, s, est, seed, until_target=True)
    c_res = run_catalyst_arm(cfg, p, s, est, seed, until_target=True)
    _, r0, gap0 = _ground_truth(p)
    bounds = {}
    for e in targets:
        dt = dsgd.dsgd_bound_terms(p, est.tau, est.p, r0, e)
        ct = cat.catalyst_total_terms(p.constants, est.tau, est.p, e)
        bounds[repr(e)] = {
            "dsgd": sum(dt), "catalyst": sum(ct), "dsgd_terms": list(dt), "catalyst_terms": list(ct),
            "noise_dominated": dt[0] > dt[1] + dt[2] and ct[1] > ct[0] + ct[2],
        }
    row = {
        "seed": seed, "tau": est.tau, "p": est.p, "r0": r0, "initial_gap": gap0,
        "dsgd": {"rounds": _arm_counts(d_rec, targets), "eta": plan.eta, "T": plan.T,
                 "regime": plan.regime, "total_rounds": d_rec.rounds},
        "catalyst": {"rounds": _arm_counts(c_res.record, targets), "K": c_res.K,
                     "q": c_res.params.q, "kappa": c_res.params.kappa,
                     "outer_to_target": {repr(e): c_res.outer_to_target(e) for e in targets},
                     "outer_bound": {repr(e): cat.outer_iterations(c_res.params.q, gap0, e)
                                     for e in targets},
                     "outer_steps": len(c_res.outer), "total_rounds": c_res.rounds},
        "bounds": bounds,
    }
    if out is not None:
        out = Path(out)
        atomic_write(out / "dsgd" / "record.csv", d_rec.csv_text())
        atomic_write(out / "catalyst" / "record.csv", c_res.record.csv_text())
        atomic_write(out / "catalyst" / "outer.csv", c_res.outer_csv_text())
        _write_json(out / "replicate.json", dict(_provenance(cfg, seed), result=row))
    return row


def _stats(values) -> dict:
    """Median and IQR with unreached runs counted as infinite."""
    arr = np.array([np.inf if v is None else v for v in values], dtype=float)
    if not len(arr):
        return {"median": math.nan, "q1": math.nan, "q3": math.nan, "reached": 0, "n": 0}
    with np.errstate(invalid="ignore"):
        # interpolating between two unreached runs gives inf - inf
        q1, med, q3 = np.nan_to_num(np.percentile(arr, [25, 50, 75]), nan=np.inf)
    return {"median": float(med), "q1": float(q1), "q3": float(q3),
            "reached": int(np.sum(np.isfinite(arr))), "n": len(arr)}


def comparison_report(cfg: ExperimentConfig, rows: list[dict]) -> dict:
    """Aggregate per-seed rows; every statistic is recomputable from ``rows``."""
    table = {}
    for e in cfg.targets:
        key = repr(e)
        d = _stats([r["dsgd"]["rounds"][key] for r in rows])
        c = _stats([r["catalyst"]["rounds"][key] for r in rows])
        bd = float(np.median([r["bounds"][key]["dsgd"] for r in rows]))
        bc = float(np.median([r["bounds"][key]["catalyst"] for r in rows]))
        ratio = c["median"] / d["median"] if math.isfinite(d["median"]) and d["median"] > 0 else math.nan
        table[key] = {
            "dsgd": d, "catalyst": c, "ratio_catalyst_over_dsgd": ratio,
            "bound_dsgd": bd, "bound_catalyst": bc, "bound_ratio": bc / bd,
            "noise_dominated": all(r["bounds"][key]["noise_dominated"] for r in rows),
        }
    return {"schema_version": SCHEMA_VERSION, "config_hash": cfg.digest(), "config": cfg.to_dict(),
            "seeds": [r["seed"] for r in rows], "table": table, "replicates": rows}


def _map(fn, jobs, workers):
    if workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, *zip(*jobs)))


def replicate_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seeds.master + r for r in range(cfg.seeds.replicates)]


def compare(cfg: ExperimentConfig, out: Path | None = None, workers: int = 1) -> dict:
    jobs = [(cfg, sd, None if out is None else Path(out) / f"seed_{sd}") for sd in replicate_seeds(cfg)]
    rows = _map(compare_replicate, jobs, workers)
    report = comparison_report(cfg, rows)
    if out is not None:
        _write_json(Path(out) / "report.json", dict(report, created=time.strftime("%Y-%m-%dT%H:%M:%S%z")))
    return report


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def sweep(cfg: ExperimentConfig, out: Path | None = None, workers: int = 1) -> dict:
    """Compare both arms over the grid of condition numbers, accuracies and noise levels."""
    sw = cfg.sweep
    conds = sw.condition_number or [cfg.problem.condition_number]
    epss = sw.eps or [cfg.solver.eps]
    sigmas = sw.sigma or [cfg.problem.noise.sigma]
    points = []
    for cond in conds:
        for e in epss:
            for sg in sigmas:
                c = dataclasses.replace(
                    cfg, problem=dataclasses.replace(
                        cfg.problem, condition_number=float(cond),
                        noise=dataclasses.replace(cfg.problem.noise, sigma=float(sg))),
                    solver=dataclasses.replace(cfg.solver, eps=float(e), eps_grid=[]))
                tag = f"cond_{cond:g}_eps_{e:g}_sigma_{sg:g}"
                rep = compare(c.validate(), None if out is None else Path(out) / tag, workers)
                row = rep["table"][repr(float(e))]
                points.append({"condition_number": float(cond), "eps": float(e), "sigma": float(sg),
                               "dsgd_median": row["dsgd"]["median"],
                               "catalyst_median": row["catalyst"]["median"],
                               "ratio": row["ratio_catalyst_over_dsgd"]})
    slopes = {}
    if len(conds) > 1 and len(epss) == 1 and len(sigmas) == 1:
        for arm in ("dsgd", "catalyst"):
            ys = [pt[f"{arm}_median"] for pt in points]
            if all(math.isfinite(y) and y > 0 for y in ys):
                slopes[arm] = loglog_slope(conds, ys)
    result = {"schema_version": SCHEMA_VERSION, "config_hash": cfg.digest(), "points": points,
              "condition_slopes": slopes}
    if out is not None:
        _write_json(Path(out) / "sweep.json", result)
    return result


def estimate_p(cfg: ExperimentConfig, seed: int) -> ConsensusEstimate:
    nw = cfg.network
    s, est = build_schedule(cfg, seed)
    if est.method == "spectral" and nw.schedule == "periodic":
        # the block rate of periodic gossip is checked, not assumed
        rep = verify_consensus_rate(s, nw.trials, seed, nw.slack)
        est = ConsensusEstimate(est.tau, est.p, "spectral+monte_carlo", rep.passed, rep.max_ratio)
    return est


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    seeds = cfg.seeds
    if args.seed is not None:
        seeds = dataclasses.replace(seeds, master=args.seed)
    if args.replicates is not None:
        seeds = dataclasses.replace(seeds, replicates=args.replicates)
    solver = cfg.solver
    if args.max_rounds is not None:
        solver = dataclasses.replace(solver, max_rounds=args.max_rounds)
    output = cfg.output if args.out is None else OutputSpec(str(args.out))
    return dataclasses.replace(cfg, seeds=seeds, solver=solver, output=output).validate()


def _fmt(v) -> str:
    return "unreached" if v is None or not math.isfinite(v) else f"{v:g}"


def cmd_run(cfg, args) -> int:
    out = Path(cfg.output.dir)
    code = 0
    jobs = [(cfg, sd, out / f"seed_{sd}") for sd in replicate_seeds(cfg)]
    for (_, sd, _), summ in zip(jobs, _map(run_replicate, jobs, args.workers)):
        print(f"seed {sd}: final gap={summ['final_gap']:.6g}, total rounds={summ['rounds']}")
        if summ["truncated"]:
            print(f"seed {sd}: stopped by the max-rounds cap; partial results written",
                  file=sys.stderr)
            code = 3
    return code


def cmd_compare(cfg, args) -> int:
    rep = compare(cfg, Path(cfg.output.dir), args.workers)
    for key, row in rep["table"].items():
        flag = " (noise-dominated: no acceleration promised)" if row["noise_dominated"] else ""
        print(f"eps={key}: dsgd median={_fmt(row['dsgd']['median'])}, catalyst median="
              f"{_fmt(row['catalyst']['median'])}, ratio={_fmt(row['ratio_catalyst_over_dsgd'])}{flag}")
    return 0


def cmd_sweep(cfg, args) -> int:
    res = sweep(cfg, Path(cfg.output.dir), args.workers)
    for pt in res["points"]:
        print(f"cond={pt['condition_number']:g} eps={pt['eps']:g} sigma={pt['sigma']:g}: "
              f"dsgd={_fmt(pt['dsgd_median'])} catalyst={_fmt(pt['catalyst_median'])}")
    for arm, slope in res["condition_slopes"].items():
        print(f"{arm} slope vs condition number: {slope:.3f}")
    return 0


def cmd_estimate_p(cfg, args) -> int:
    est = estimate_p(cfg, cfg.seeds.master)
    verdict = "pass" if est.passed else "fail"
    print(f"tau={est.tau} p={est.p:.12g} method={est.method} verdict={verdict}")
    _write_json(Path(cfg.output.dir) / "consensus.json",
                dict(_provenance(cfg, cfg.seeds.master), estimate=asdict(est)))
    return 0 if est.passed else 1


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep, "estimate-p": cmd_estimate_p}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="catalyst-dsgd", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", type=Path, help="output directory")
        sp.add_argument("--replicates", type=int)
        sp.add_argument("--max-rounds", type=int, dest="max_rounds")
        sp.add_argument("--workers", type=int, default=1)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigError as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 2
    except (OSError, yaml.YAMLError) as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
