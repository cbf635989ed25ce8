"""Command-line front end: ``ais-lab <bounds|train|compare|toy-demo> [--config f.json] [--out dir] [--seed n]``.

Exit codes: 0 success, 1 bound or claim violated, 2 bad configuration.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from . import svg
from .ais import KERNELS, identity_generator, quantizer_ais
from .ais_dp import BoundConfig, bound_report, campaign_instance, counterexample, reports_to_csv, run_campaign
from .exceptions import BoundViolation, InputError, ScheduleError, SizeError
from .mdp import toy_mdp
from .toy import format_report, toy_report
from .train import AGENTS, TrainConfig, evaluate, make_env, metrics_to_csv, train_loop

COMMANDS = ("bounds", "train", "compare", "toy-demo")
IPM_NAMES = {"tv": "tv", "w": "wasserstein", "wasserstein": "wasserstein", "mmd": "mmd"}
TRAIN_IPMS = {"mmd": {"ipm_variant": "mmd"}, "kl": {"ipm_variant": "kl"}}
TRAIN_IPMS.update({f"mmd-{k}": {"ipm_variant": "mmd", "kernel": k} for k in KERNELS})


class ConfigError(Exception):
    pass


def _train_schema() -> dict:
    types = {int: "integer", float: "number", bool: "boolean", str: "string"}
    props = {}
    for f in fields(TrainConfig):
        t = types.get(f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(str(f.type)))
        if t == "number":
            props[f.name] = {"type": "number"}
        elif t is not None:
            props[f.name] = {"type": t}
        else:
            props[f.name] = {"type": ["array", "null"], "items": {"type": "integer"}}
    return {"type": "object", "properties": props, "additionalProperties": False}


TRAIN_SCHEMA = _train_schema()
_COMMON = {
    "command": {"enum": list(COMMANDS)},
    "seed": {"type": "integer", "minimum": 0},
    "out": {"type": "string"},
}
_RUN = {
    "env": {"enum": ["toy", "bandit", "pointmass"]},
    "env_options": {"type": "object"},
    "seeds": {"type": "integer", "minimum": 1},
    "iterations": {"type": "integer", "minimum": 0},
    "train": TRAIN_SCHEMA,
    "eval_episodes": {"type": "integer", "minimum": 0},
    "eval_horizon": {"type": "integer", "minimum": 1},
}
SCHEMAS = {
    "bounds": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **_COMMON,
            "preset": {"enum": ["toy", "identity"]},
            "random": {"type": "integer", "minimum": 1},
            "ipms": {"type": "array", "items": {"enum": sorted(IPM_NAMES)}, "minItems": 1},
            "partition": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            "K": {"type": "number", "exclusiveMinimum": 0},
            "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "n_instances": {"type": "integer", "minimum": 1},
            "max_states": {"type": "integer", "minimum": 2},
            "max_actions": {"type": "integer", "minimum": 1},
        },
    },
    "train": {
        "type": "object",
        "additionalProperties": False,
        "properties": {**_COMMON, **_RUN, "agent": {"enum": list(AGENTS)}},
    },
    "compare": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **_COMMON,
            **_RUN,
            "agent": {"enum": list(AGENTS)},
            "variants": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["label"],
                    "properties": {"label": {"type": "string", "minLength": 1}, "train": TRAIN_SCHEMA},
                },
            },
            "kernels": {"type": "array", "items": {"enum": list(KERNELS)}},
            "ipms": {"type": "array", "items": {"enum": sorted(TRAIN_IPMS)}},
        },
    },
    "toy-demo": {
        "type": "object",
        "additionalProperties": False,
        "properties": {**_COMMON, "K": {"type": "number", "exclusiveMinimum": 0}, "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}, "depth": {"type": "integer", "minimum": 1}},
    },
}


def load_config(command: str, path: Optional[str]) -> dict:
    doc = {}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
    validate_config(command, doc)
    return doc


def validate_config(command: str, doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMAS[command])
    except jsonschema.ValidationError as err:
        where = "/".join(map(str, err.absolute_path)) or "<root>"
        raise ConfigError(f"invalid config at {where}: {err.message}") from err
    if doc.get("command", command) != command:
        raise ConfigError(f"config is for command {doc['command']!r}, not {command!r}")


def n_threads() -> int:
    raw = os.environ.get("AISLAB_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as err:
        raise ConfigError(f"AISLAB_THREADS must be an integer, got {raw!r}") from err
    if n < 1:
        raise ConfigError("AISLAB_THREADS must be >= 1")
    return n


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _g(x: float) -> str:
    return "nan" if not np.isfinite(x) else format(float(x), ".17g")


# ---------------------------------------------------------------------------
# bounds


def cmd_bounds(cfg: dict, out: Path, seed: int) -> int:
    ipms = [IPM_NAMES[n] for n in cfg.get("ipms", ["tv", "w", "mmd"])]
    if "random" in cfg:
        res = run_campaign(cfg["random"], seed, ipms, max_states=cfg.get("max_states", 8), max_actions=cfg.get("max_actions", 4))
        rows, reports, cex = res.rows, res.reports, res.counterexamples
    else:
        preset = cfg.get("preset", "toy")
        bc = BoundConfig(raise_on_violation=False)
        rows, reports, cex = [], [], []
        if preset == "toy":
            mdp = toy_mdp(cfg.get("K", 100.0), cfg.get("gamma", 0.95))
            part = cfg.get("partition", [0, 0, 1, 1])
            if len(part) != mdp.n_states:
                raise ConfigError(f"partition needs {mdp.n_states} entries")
            instances = [(seed, mdp, quantizer_ais(mdp, part))]
        else:
            instances = []
            for s in range(seed, seed + cfg.get("n_instances", 50)):
                mdp, _ = campaign_instance(s, cfg.get("max_states", 8), cfg.get("max_actions", 4))
                instances.append((s, mdp, identity_generator(mdp)))
        for s, mdp, gen in instances:
            for name in ipms:
                rep = bound_report(mdp, gen, name, bc)
                reports.append(rep)
                rows.append(rep.csv_row(s, mdp.n_states, mdp.n_actions))
                if rep.violated:
                    cex.append(counterexample(mdp, gen, rep))
    _write(out / "bounds.csv", reports_to_csv(rows))
    for i, text in enumerate(cex):
        _write(out / f"counterexample_{i:03d}.json", text + "\n")
    n_bad = sum(r.violated for r in reports)
    print(f"bounds: {len(rows)} rows, {n_bad} violations -> {out / 'bounds.csv'}")
    return 1 if n_bad else 0


# ---------------------------------------------------------------------------
# train / compare


def _train_config(cfg: dict, overrides: Optional[dict] = None) -> TrainConfig:
    kw = dict(cfg.get("train", {}))
    kw.update(overrides or {})
    if "agent" in cfg and "agent" not in (overrides or {}):
        kw["agent"] = cfg["agent"]
    if "iterations" in cfg:
        kw["iterations"] = cfg["iterations"]
    if "partition" in kw and kw["partition"] is not None:
        kw["partition"] = tuple(kw["partition"])
    kw.pop("seeds", None)
    return TrainConfig(**kw)


def _seeds(cfg: dict, seed: int) -> List[int]:
    return list(range(seed, seed + cfg.get("seeds", 1)))


def _run_seeds(cfg: dict, config: TrainConfig, seeds: List[int]):
    env_name = cfg.get("env", "toy")
    opts = dict(cfg.get("env_options", {}))
    n_eval, horizon = cfg.get("eval_episodes", 0), cfg.get("eval_horizon", 100)

    def job(s):
        env = make_env(env_name, **opts)
        res = train_loop(env, config, s)
        score = evaluate(res.agent, env, n_eval, horizon, config.gamma, s) if n_eval > 0 else float("nan")
        return res.metrics, score

    with ThreadPoolExecutor(max_workers=min(n_threads(), len(seeds))) as pool:
        return list(pool.map(job, seeds))


def aggregate(per_seed: List[List[Dict[str, float]]], key: str = "mean_return"):
    """Per-iteration median and interquartile range across seeds."""
    n = min((len(m) for m in per_seed), default=0)
    if n == 0:
        return np.zeros(0, dtype=int), np.zeros(0), np.zeros(0), np.zeros(0)
    vals = np.array([[m[i][key] for i in range(n)] for m in per_seed])
    q25, med, q75 = np.percentile(vals, [25, 50, 75], axis=0)
    return np.array([per_seed[0][i]["iteration"] for i in range(n)]), med, q25, q75


def _run_variant(cfg: dict, config: TrainConfig, seeds: List[int], out: Path):
    results = _run_seeds(cfg, config, seeds)
    for s, (metrics, _) in zip(seeds, results):
        _write(out / f"metrics_seed{s}.csv", metrics_to_csv(metrics))
    if cfg.get("eval_episodes", 0) > 0:
        _write(out / "eval.csv", _csv(("seed", "return"), [(s, _g(score)) for s, (_, score) in zip(seeds, results)]))
    return [m for m, _ in results], [score for _, score in results]


def cmd_train(cfg: dict, out: Path, seed: int) -> int:
    config = _train_config(cfg)
    seeds = _seeds(cfg, seed)
    per_seed, scores = _run_variant(cfg, config, seeds, out)
    it, med, q25, q75 = aggregate(per_seed)
    rows = [(int(i), _g(a), _g(b), _g(c), len(seeds)) for i, a, b, c in zip(it, med, q25, q75)]
    _write(out / "aggregate.csv", _csv(("iteration", "median", "q25", "q75", "n_seeds"), rows))
    _write(out / "learning_curve.svg", svg.band_chart(it, med, q25, q75, config.agent, f"{config.agent} on {cfg.get('env', 'toy')} ({len(seeds)} seeds)"))
    msg = f"train: {config.agent}, {len(seeds)} seeds, {config.iterations} iterations -> {out}"
    if cfg.get("eval_episodes", 0) > 0:
        q = np.percentile(scores, [25, 50, 75])
        msg += f"; evaluation median {q[1]:.4g} IQR [{q[0]:.4g}, {q[2]:.4g}]"
    print(msg)
    return 0


def _variants(cfg: dict) -> List[dict]:
    vs = list(cfg.get("variants", []))
    vs += [{"label": f"mmd-{k}", "train": {"ipm_variant": "mmd", "kernel": k}} for k in cfg.get("kernels", [])]
    vs += [{"label": name, "train": dict(TRAIN_IPMS[name])} for name in cfg.get("ipms", [])]
    labels = [v["label"] for v in vs]
    if len(vs) < 2:
        raise ConfigError("compare needs at least two variants")
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate variant labels: {labels}")
    for lab in labels:
        if not all(c.isalnum() or c in "-_." for c in lab):
            raise ConfigError(f"variant label {lab!r} must be alphanumeric, '-', '_' or '.'")
    return vs


def cmd_compare(cfg: dict, out: Path, seed: int) -> int:
    vs = _variants(cfg)
    configs = [_train_config(cfg, v.get("train")) for v in vs]
    seeds = _seeds(cfg, seed)
    curves, header, cols = [], ["iteration"], []
    it = None
    for v, config in zip(vs, configs):
        per_seed, _ = _run_variant(cfg, config, seeds, out / v["label"])
        it_v, med, q25, q75 = aggregate(per_seed)
        it = it_v if it is None or len(it_v) < len(it) else it
        curves.append({"label": v["label"], "y": med, "lo": q25, "hi": q75})
        header += [f"{v['label']}_median", f"{v['label']}_q25", f"{v['label']}_q75"]
        cols.append((med, q25, q75))
    n = len(it)
    rows = [[int(it[i])] + [_g(c[k][i]) for c in cols for k in range(3)] for i in range(n)]
    _write(out / "compare.csv", _csv(header, rows))
    for c in curves:
        for k in ("y", "lo", "hi"):
            c[k] = c[k][:n]
    _write(out / "compare.svg", svg.overlay(it, curves, f"{len(vs)} variants on {cfg.get('env', 'toy')} ({len(seeds)} seeds)"))
    print(f"compare: {', '.join(v['label'] for v in vs)} -> {out / 'compare.csv'}")
    return 0


# ---------------------------------------------------------------------------
# toy demo


def cmd_toy_demo(cfg: dict, out: Optional[Path], seed: int) -> int:
    rep = toy_report(cfg.get("K", 100.0), cfg.get("gamma", 0.95), cfg.get("depth", 12))
    text = format_report(rep)
    print(text)
    if out is not None:
        _write(out / "toy_demo.txt", text + "\n")
    ok = rep.pi_star == [0, 0, 1, 2] and rep.fsm_matches and rep.state3_unreachable and not rep.counterexamples()
    print("all claims hold" if ok else "some claims fail")
    return 0 if ok else 1


HANDLERS = {"bounds": cmd_bounds, "train": cmd_train, "compare": cmd_compare, "toy-demo": cmd_toy_demo}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ais-lab", description="Approximate information state experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", help="output directory (default: out)")
        sp.add_argument("--seed", type=int, help="base seed")
        if name == "bounds":
            sp.add_argument("--preset", choices=["toy", "identity"])
            sp.add_argument("--random", type=int, metavar="N", help="random campaign of N instances")
            sp.add_argument("--ipms", help="comma-separated subset of tv,w,mmd")
        if name in ("train", "compare"):
            sp.add_argument("--env", choices=["toy", "bandit", "pointmass"])
            sp.add_argument("--agent", choices=list(AGENTS))
            sp.add_argument("--seeds", type=int, help="number of seeds")
            sp.add_argument("--iterations", type=int)
        if name == "compare":
            sp.add_argument("--kernels", help="comma-separated mmd kernels")
            sp.add_argument("--ipms", help="comma-separated training losses, e.g. mmd-energy,kl")
    return p


def _merge_flags(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = dict(cfg)
    for key in ("preset", "random", "env", "agent", "seeds", "iterations"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key in ("ipms", "kernels"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = [x.strip() for x in val.split(",") if x.strip()]
    if args.command == "bounds" and args.random is not None:
        cfg.pop("preset", None)
    if args.command == "bounds" and args.preset is not None:
        cfg.pop("random", None)
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config)
        cfg = _merge_flags(cfg, args)
        validate_config(args.command, cfg)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        out = args.out or cfg.get("out")
        if args.command == "toy-demo":
            return cmd_toy_demo(cfg, Path(out) if out else None, seed)
        return HANDLERS[args.command](cfg, Path(out or "out"), seed)
    except (ConfigError, InputError, SizeError, ScheduleError) as err:
        print(f"ais-lab: error: {err}", file=sys.stderr)
        return 2
    except BoundViolation as err:
        print(f"ais-lab: bound violated: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
