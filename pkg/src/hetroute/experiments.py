"""Experiment specs and runners behind the command-line interface.

A spec is a plain dict (usually loaded from JSON). Every runner writes CSV
artifacts plus ``manifest.json`` into its output directory and returns the
manifest. Two named specs ship with the package: ``table1`` (exact response
times for the four reference configurations) and ``fig2`` (threshold reports
for the same configurations).
"""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .achq import HyperParams, initial_actor, train
from .exact import (
    exact_average_cost,
    expected_response_time,
    extract_thresholds,
    linear_fit_value,
    relative_value_iteration,
    write_threshold_report,
    write_value_table,
)
from .mdp import StateSpace, SystemConfig
from .policy import FASPolicy, HardThresholdPolicy, PowerOfD, SoftThresholdParams
from .simulate import compare, simulate, write_comparison
from .twoserver import (
    discounted_threshold,
    h_sequence,
    verify_point,
    write_verifier_report,
)

log = logging.getLogger(__name__)

KINDS = ("rvi", "train", "train-discounted", "simulate", "compare", "verify2", "sweep")
SWEEP_AXES = ("num_servers", "load", "heterogeneity", "pod_d")

DEFAULT_TRAIN_HORIZON = 10_000_000
DEFAULT_EVAL_HORIZON = 10_000_000
DEFAULT_SEEDS = list(range(10))

REFERENCE_CONFIGS = {
    "a": SystemConfig.from_load(0.4, [100, 25, 5, 1], 100),
    "b": SystemConfig.from_load(0.5, [100, 25, 5, 1], 100),
    "c": SystemConfig.from_load(0.4, [100, 100, 1, 1], 100),
    "d": SystemConfig.from_load(0.4, [100, 25, 5, 5, 1, 1], 100),
}

# published response times, units of 1e-2 seconds
TABLE1 = {
    "a": {"RVI": 5.48, "FAS": 7.72, "RSRT": 10.04},
    "b": {"RVI": 8.11, "FAS": 9.72, "RSRT": 17.15},
    "c": {"RVI": 2.36, "FAS": 4.64, "RSRT": 2.37},
    "d": {"RVI": 5.46, "FAS": 9.56, "RSRT": 10.45},
}
TABLE1_R2 = {"a": 0.941, "b": 0.943, "c": 0.942, "d": 0.942}


class SpecError(ValueError):
    """The experiment spec is malformed or refers to something unknown."""


def linspace_rates(k: int, fastest: float = 100.0, slowest: float = 1.0) -> list[float]:
    return [float(x) for x in np.linspace(fastest, slowest, k)]


def worker_count() -> int:
    env = os.environ.get("HETROUTE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise SpecError(f"HETROUTE_THREADS must be an integer, got {env!r}") from exc
    return max(1, min(8, os.cpu_count() or 1))


def _config(spec: dict) -> SystemConfig:
    system = spec.get("system")
    if not isinstance(system, dict):
        raise SpecError("spec needs a 'system' object")
    try:
        return SystemConfig.from_dict(system)
    except (ValueError, TypeError) as exc:
        raise SpecError(f"invalid system: {exc}") from exc


def _seeds(spec: dict) -> list[int]:
    seeds = spec.get("seeds", DEFAULT_SEEDS)
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds:
        raise SpecError("seeds must be non-empty")
    return [int(s) for s in seeds]


def _hyper(spec: dict, seed: int | None = None) -> HyperParams:
    try:
        hp = HyperParams.from_dict({"horizon": DEFAULT_TRAIN_HORIZON, **spec.get("hyperparams", {})})
    except (ValueError, TypeError) as exc:
        raise SpecError(f"invalid hyperparams: {exc}") from exc
    if seed is not None:
        hp = replace(hp, seed=seed)
    return hp


def resolve_policy(name: str, config: SystemConfig, spec: dict, learned: SoftThresholdParams | None = None):
    """Build a policy from a name: FAS, RSRT, RVI, ACHQ, or any of them suffixed ``-PoD<d>``."""
    base, _, pod = name.partition("-PoD")
    if base == "FAS":
        pol = FASPolicy()
    elif base == "RSRT":
        pol = HardThresholdPolicy.rsrt(config)
    elif base == "RVI":
        pol = relative_value_iteration(config).policy
    elif base == "ACHQ":
        if learned is None:
            actor = spec.get("actor")
            if actor is None:
                raise SpecError("policy ACHQ needs an 'actor' entry or a training run")
            learned = SoftThresholdParams.from_dict(actor)
        pol = learned
    else:
        raise SpecError(f"unknown policy {name!r}")
    if pod:
        try:
            d = int(pod)
        except ValueError as exc:
            raise SpecError(f"bad PoD suffix in {name!r}") from exc
        if not 1 <= d <= config.k:
            raise SpecError(f"PoD d={d} outside [1, {config.k}]")
        return name, PowerOfD(pol, d, name=name)
    return name, pol


def validate(kind: str, spec: dict) -> None:
    if kind not in KINDS:
        raise SpecError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    if kind == "sweep":
        axis = spec.get("axis")
        if axis not in SWEEP_AXES:
            raise SpecError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
        if not spec.get("values"):
            raise SpecError("sweep needs a non-empty 'values' list")
        return
    if "named" in spec:
        return
    _config(spec)
    if kind in ("simulate", "compare", "train", "train-discounted", "sweep"):
        _seeds(spec)
    if kind in ("compare", "simulate"):
        pols = spec.get("policies", ["FAS"])
        if not pols:
            raise SpecError("'policies' must be non-empty")
        for p in pols:
            if not isinstance(p, str):
                raise SpecError(f"policy names must be strings, got {p!r}")
            if p.partition("-PoD")[0] not in ("FAS", "RSRT", "RVI", "ACHQ"):
                raise SpecError(f"unknown policy {p!r}")
    if kind in ("train", "train-discounted"):
        _hyper(spec)
    if kind == "verify2" and _config(spec).k != 2:
        raise SpecError("verify2 needs a two-server system")


def write_manifest(out: Path, kind: str, spec: dict, resolved: dict, artifacts: list[str]) -> dict:
    manifest = {
        "kind": kind,
        "toolkit_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "spec": spec,
        "resolved": resolved,
        "artifacts": artifacts,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_jsonable))
    return manifest


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


# -- runners -----------------------------------------------------------------

def run_rvi_config(config: SystemConfig, out: Path, tag: str = "") -> dict:
    """RVI plus exact evaluation of RVI, FAS and RSRT for one configuration."""
    space = StateSpace(config)
    res = relative_value_iteration(space)
    prefix = f"{tag}_" if tag else ""
    write_value_table(out / f"{prefix}value_table.csv", res.values, res.policy, space)
    report = extract_thresholds(res.policy, space)
    write_threshold_report(out / f"{prefix}thresholds.csv", report)
    rows = {}
    for name, pol in (("RVI", res.policy), ("FAS", FASPolicy()), ("RSRT", HardThresholdPolicy.rsrt(config))):
        avg = exact_average_cost(pol, space)
        rows[name] = (avg, expected_response_time(avg, config))
    fit = linear_fit_value(res.values, space)
    return {"iterations": res.iterations, "gain": res.average_cost, "rows": rows,
            "r_squared": fit.r_squared, "threshold_type": report.is_threshold_type,
            "thresholds": report.as_dict()}


def run_rvi(spec: dict, out: Path) -> dict:
    import csv

    named = spec.get("named")
    configs = ({k: REFERENCE_CONFIGS[k] for k in REFERENCE_CONFIGS} if named in ("table1", "fig2")
               else {"": _config(spec)})
    artifacts, resolved = [], {"configs": {k: c.to_dict() for k, c in configs.items()}}
    summary_rows = []
    results = {}
    for tag, cfg in configs.items():
        r = run_rvi_config(cfg, out, tag)
        results[tag] = r
        prefix = f"{tag}_" if tag else ""
        artifacts += [f"{prefix}value_table.csv", f"{prefix}thresholds.csv"]
        for name, (avg, tr) in r["rows"].items():
            published = TABLE1.get(tag, {}).get(name)
            rel = None if published is None else 100.0 * (tr * 100 - published) / published
            summary_rows.append([tag or "custom", name, repr(avg), repr(tr), "" if published is None else published,
                                 "" if rel is None else repr(rel)])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "policy", "avg_jobs", "response_time", "published_x1e2", "rel_err_pct"])
        w.writerows(summary_rows)
    with open(out / "structure.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "is_threshold_type", "r_squared", "published_r_squared", "rvi_iterations"])
        for tag, r in results.items():
            w.writerow([tag or "custom", r["threshold_type"], repr(r["r_squared"]), TABLE1_R2.get(tag, ""),
                        r["iterations"]])
    artifacts += ["summary.csv", "structure.csv"]
    resolved["rvi_tolerance"] = 1e-9
    return {"resolved": resolved, "artifacts": artifacts, "results": results}


def run_train(spec: dict, out: Path, discounted: bool = False) -> dict:
    config = _config(spec)
    seeds = _seeds(spec)
    hp = _hyper(spec, seeds[0])
    if discounted and hp.gamma is None:
        hp = replace(hp, gamma=float(spec.get("gamma", 0.99)))
    actor0 = initial_actor(config, hp.sigma, hp.init, hp.seed)
    actor, record = train(config, actor0, hp)
    record.to_csv(out / "train_record.csv")
    (out / "actor.json").write_text(json.dumps(actor.to_dict(), indent=2))
    resolved = {"hyperparams": hp.to_dict(), "initial_thresholds": list(actor0.thresholds),
                "radius": record.final_critic.projection_radius}
    artifacts = ["train_record.csv", "actor.json"]
    if spec.get("evaluate", True) and config.num_states <= 200_000:
        space = StateSpace(config)
        pols = [("ACHQ", actor), ("FAS", FASPolicy()), ("RSRT", HardThresholdPolicy.rsrt(config))]
        if hp.pod_d:
            pols = [(f"{n}-PoD{hp.pod_d}", PowerOfD(p, hp.pod_d)) for n, p in pols]
        import csv

        with open(out / "evaluation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["policy_name", "avg_jobs", "response_time"])
            for n, p in pols:
                avg = exact_average_cost(p, space)
                w.writerow([n, repr(avg), repr(expected_response_time(avg, config))])
        artifacts.append("evaluation.csv")
    return {"resolved": resolved, "artifacts": artifacts, "actor": actor, "record": record}


def run_simulate(spec: dict, out: Path) -> dict:
    import csv

    config = _config(spec)
    seeds = _seeds(spec)
    horizon = int(spec.get("horizon", DEFAULT_EVAL_HORIZON))
    burn_in = spec.get("burn_in")
    names = spec.get("policies", ["FAS"])
    pols = [resolve_policy(n, config, spec) for n in names]
    space = StateSpace(config)
    jobs = [(n, p, s) for n, p in pols for s in seeds]
    with ThreadPoolExecutor(worker_count()) as pool:
        stats = list(pool.map(lambda j: simulate(j[1], config, horizon, burn_in, j[2], space), jobs))
    with open(out / "simulation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy_name", "seed", "epochs", "avg_jobs", "response_time", "ci_halfwidth"])
        for (n, _, s), r in zip(jobs, stats):
            w.writerow([n, s, r.epochs, repr(r.avg_jobs), repr(r.response_time), repr(r.ci_halfwidth)])
    resolved = {"horizon": horizon, "burn_in": horizon // 10 if burn_in is None else burn_in, "seeds": seeds,
                "batches": 30}
    return {"resolved": resolved, "artifacts": ["simulation.csv"], "stats": stats}


def comparison_rows(config: SystemConfig, names: list[str], spec: dict, horizon: int, seeds: list[int],
                    learned: SoftThresholdParams | None = None):
    pols = [resolve_policy(n, config, spec, learned) for n in names]
    return compare(pols, config, horizon, seeds, reference=spec.get("reference", names[0]),
                   burn_in=spec.get("burn_in"))


def run_compare(spec: dict, out: Path) -> dict:
    config = _config(spec)
    seeds = _seeds(spec)
    horizon = int(spec.get("horizon", DEFAULT_EVAL_HORIZON))
    names = spec.get("policies", ["FAS", "RSRT", "RVI"])
    rows = comparison_rows(config, names, spec, horizon, seeds)
    write_comparison(out / "comparison.csv", rows)
    resolved = {"horizon": horizon, "seeds": seeds, "reference": spec.get("reference", names[0]),
                "burn_in": spec.get("burn_in", horizon // 10)}
    return {"resolved": resolved, "artifacts": ["comparison.csv"], "rows": rows}


def run_verify2(spec: dict, out: Path) -> dict:
    import csv

    config = _config(spec)
    rates = list(config.service_rates)
    gammas = spec.get("gammas", [0.9, 0.99, 0.999])
    sigmas = spec.get("sigmas", [5, 10, 50])
    loads = spec.get("loads", [config.load])
    offsets = spec.get("offsets", [-2, -1, 0, 1, 2])
    lm = config.buffer_capacity
    points = []
    for rho in loads:
        cfg = SystemConfig.from_load(rho, rates, lm)
        for g in gammas:
            ls = discounted_threshold(cfg, g)
            for sig in sigmas:
                for off in offsets:
                    points.append((rho, g, sig, ls + off))
    with ThreadPoolExecutor(worker_count()) as pool:
        rows = list(pool.map(lambda p: verify_point(rates, p[0], p[1], p[2], p[3], lm), points))
    write_verifier_report(out / "verifier_report.csv", rows)
    g0, s0 = gammas[0], max(sigmas)
    actor = SoftThresholdParams((discounted_threshold(config, g0),), s0)
    h = h_sequence(actor, config, g0)
    with open(out / "h_sequence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["l", "h"])
        for i, v in enumerate(h):
            w.writerow([i, repr(float(v))])
    resolved = {"gammas": gammas, "sigmas": sigmas, "loads": loads, "offsets": offsets,
                "grid": [0.0, 30.0, 0.5], "h_sequence_gamma": g0, "h_sequence_sigma": s0}
    return {"resolved": resolved, "artifacts": ["verifier_report.csv", "h_sequence.csv"], "rows": rows}


def sweep_point_config(axis: str, value, base: dict) -> tuple[SystemConfig, int | None]:
    k = int(base.get("num_servers", 8))
    load = float(base.get("load", 0.4))
    het = float(base.get("heterogeneity", 100.0))
    lm = int(base.get("buffer_capacity", 100))
    d = None
    if axis == "num_servers":
        k = int(value)
    elif axis == "load":
        load = float(value)
    elif axis == "heterogeneity":
        het = float(value)
    elif axis == "pod_d":
        d = int(value)
    return SystemConfig.from_load(load, linspace_rates(k, het, 1.0), lm), d


def run_sweep_point(axis: str, value, spec: dict) -> tuple[list, dict]:
    config, d = sweep_point_config(axis, value, spec.get("base", {}))
    seeds = _seeds(spec)
    hp = _hyper(spec, seeds[0])
    if d:
        hp = replace(hp, pod_d=d)
    actor, _ = train(config, initial_actor(config, hp.sigma, hp.init, hp.seed), hp)
    names = ["ACHQ", "FAS", "RSRT"]
    if d:
        names = [f"{n}-PoD{d}" for n in names]
    point_spec = {**spec, "reference": names[1]}
    horizon = int(spec.get("horizon", DEFAULT_EVAL_HORIZON))
    rows = comparison_rows(config, names, point_spec, horizon, seeds, learned=actor)
    return rows, {"system": config.to_dict(), "pod_d": d, "actor": actor.to_dict()}


def run_sweep(spec: dict, out: Path) -> dict:
    import csv

    axis = spec["axis"]
    values = spec["values"]
    results = {}

    def one(v):
        try:
            return v, run_sweep_point(axis, v, spec), None
        except Exception as exc:  # a failed point is logged and the sweep continues
            log.error("sweep point %s=%s failed: %s", axis, v, exc)
            return v, None, str(exc)

    with ThreadPoolExecutor(worker_count()) as pool:
        outcomes = list(pool.map(one, values))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "policy_name", "seed_count", "response_time_mean", "response_time_se",
                    "improvement_vs_reference_pct"])
        for v, res, err in outcomes:
            if res is None:
                continue
            rows, info = res
            results[str(v)] = info
            for r in rows:
                w.writerow([axis, v, r.policy_name, r.seed_count, repr(r.response_time_mean),
                            repr(r.response_time_se), repr(r.improvement_vs_reference_pct)])
    failures = {str(v): err for v, res, err in outcomes if err}
    resolved = {"points": results, "failures": failures, "horizon": int(spec.get("horizon", DEFAULT_EVAL_HORIZON)),
                "hyperparams": _hyper(spec).to_dict(), "seeds": _seeds(spec), "base": spec.get("base", {})}
    return {"resolved": resolved, "artifacts": ["sweep.csv"], "failures": failures}


RUNNERS = {
    "rvi": run_rvi,
    "train": run_train,
    "train-discounted": lambda spec, out: run_train(spec, out, discounted=True),
    "simulate": run_simulate,
    "compare": run_compare,
    "verify2": run_verify2,
    "sweep": run_sweep,
}


def run(kind: str, spec: dict, out) -> dict:
    """Validate, execute and record one experiment; returns the manifest."""
    validate(kind, spec)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result = RUNNERS[kind](spec, out)
    return write_manifest(out, kind, spec, result["resolved"], result["artifacts"])
