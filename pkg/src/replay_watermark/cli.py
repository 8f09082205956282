"""Command-line entry point: ``replay-watermark <command> [options]``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .learning import LearnerState
from .lti import SimState
from .scenario import (WORKERS_ENV, ConfigError, RedesignRecord, ScenarioConfig, _write_csv, build_system,
                       cost_weights, emit, exact_design, learner_config, rerun_from_manifest, run_learning,
                       run_scenario)

REDUCED_DEFAULTS = {
    "mode": "reduced_order",
    "n_model": 5,
    "system": {"n": 100, "m": 5, "p": 5, "seed": 0, "rho_max": 0.9},
    "monte_carlo": 100,
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, assignments) -> dict:
    """Apply ``key=value`` overrides; dotted keys reach into nested dicts and
    values are parsed as JSON when possible."""
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = _parse_value(value)
    return doc


def load_config(args, base: dict | None = None) -> ScenarioConfig:
    doc = dict(base or {})
    if args.config:
        doc.update(json.loads(Path(args.config).read_text()))
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out_dir is not None:
        doc["out_dir"] = args.out_dir
    if getattr(args, "plots", False):
        doc["plots"] = True
    apply_overrides(doc, args.set)
    return ScenarioConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_design(args) -> int:
    cfg = load_config(args)
    sys_ = build_system(cfg.system)
    d = exact_design(sys_, cost_weights(cfg, sys_), cfg.learner["delta"])
    ratio = cfg.threshold.get("ratio", 0.9)
    out = {
        "U": d.U.tolist(),
        "Wcal": d.Wcal.tolist(),
        "Ucal": d.Ucal.tolist(),
        "J0": d.J0,
        "deltaJ": d.deltaJ,
        "J": d.J,
        "zeta": d.J / ratio,
        "eigenvalues": {"re": d.modal.lambdas.real.tolist(), "im": d.modal.lambdas.imag.tolist()},
    }
    text = json.dumps(out, indent=2)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "design.json").write_text(text)
    print(text)
    return 0


def _run_and_emit(cfg: ScenarioConfig) -> int:
    art = run_scenario(cfg)
    emit(art, cfg.out_dir, plots=cfg.plots)
    n_pre = art.config["attack"]["replay_start"] if cfg.attack else cfg.horizon
    summary = {"mode": art.mode, "zeta": art.zeta, "replicas": int(art.g.shape[0])}
    if art.g.shape[0]:
        summary["alarm_rate_before_replay"] = float(art.alarms[:, :n_pre].mean())
        if cfg.attack:
            summary["alarm_rate_during_replay"] = float(art.alarms[:, n_pre:].mean())
    print(json.dumps(summary))
    print(f"wrote results to {cfg.out_dir}")
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args, {"monte_carlo": 1})
    return _run_and_emit(cfg)


def cmd_montecarlo(args) -> int:
    cfg = load_config(args, {"monte_carlo": 500})
    return _run_and_emit(cfg)


def cmd_reduced(args) -> int:
    cfg = load_config(args, REDUCED_DEFAULTS)
    return _run_and_emit(cfg)


def cmd_rerun(args) -> int:
    paths = rerun_from_manifest(args.manifest, out_dir=args.out_dir)
    print(f"wrote {len(paths)} files")
    return 0


def _plant_to_dict(st: SimState) -> dict:
    return {"x": st.x.tolist(), "k": st.k,
            "process": st.process_rng.bit_generator.state,
            "measurement": st.measurement_rng.bit_generator.state}


def _plant_from_dict(d: dict) -> SimState:
    st = SimState(x=np.array(d["x"]), k=d["k"])
    st.process_rng.bit_generator.state = d["process"]
    st.measurement_rng.bit_generator.state = d["measurement"]
    return st


def cmd_learn(args) -> int:
    """Long learning run, checkpointed every ``--checkpoint-every`` steps."""
    cfg = load_config(args, {"mode": "online_learning"})
    sys_ = build_system(cfg.system)
    lcfg = learner_config(cfg, sys_)
    truth = exact_design(sys_, lcfg.X, lcfg.delta)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.json"

    learner, plant, records = None, None, []
    if args.resume:
        doc = json.loads(Path(args.resume).read_text())
        learner = LearnerState.from_dict(doc["learner"])
        plant = _plant_from_dict(doc["plant"])
        records = [RedesignRecord(**r) for r in doc["records"]]
    total = args.steps if args.steps is not None else cfg.warmup
    every = args.checkpoint_every or total
    while True:
        done = learner.k if learner is not None else 0
        if done >= total:
            break
        chunk = min(every, total - done)
        learner, plant, new = run_learning(sys_, lcfg, chunk, learner_seed=[cfg.seed, 1],
                                           plant_seed=[cfg.seed, 2], truth=truth,
                                           learner=learner, state=plant)
        records += new
        ckpt_path.write_text(json.dumps({
            "config": cfg.to_dict(),
            "learner": learner.to_dict(),
            "plant": _plant_to_dict(plant),
            "records": [asdict(r) for r in records],
        }))

    _write_csv(out / "u_error.csv", ("k", "frobenius_error"), [(r.k, repr(r.u_error)) for r in records])
    _write_csv(out / "redesigns.csv", ("k", "u_error", "h0_error", "cap_margin", "floor_margin", "failed"),
               [(r.k, repr(r.u_error), repr(r.h0_error), repr(r.cap_margin), repr(r.floor_margin), int(r.failed))
                for r in records])
    last = records[-1] if records else None
    print(json.dumps({"k": learner.k if learner else 0,
                      "u_error": last.u_error if last else None,
                      "h0_error": last.h0_error if last else None,
                      "redesigns": learner.n_redesigns if learner else 0,
                      "failures": learner.n_failures if learner else 0}))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON scenario config")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted for nested keys, JSON values); repeatable")
    p.add_argument("--plots", action="store_true", help="also write PNG plots (needs matplotlib)")
    p.add_argument("--workers", type=int, help=f"worker processes (sets {WORKERS_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replay-watermark",
                                     description="Watermark design and replay-attack detection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="exact-parameter optimal watermark and detector")
    _common(p)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", help="single replay-attack run")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("learn", help="long online-learning run with checkpoints")
    _common(p)
    p.add_argument("--steps", type=int, help="total learning steps (default: config warmup)")
    p.add_argument("--checkpoint-every", type=int, help="steps between checkpoints")
    p.add_argument("--resume", help="checkpoint.json to resume from")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("montecarlo", help="detection-rate study over many replicas")
    _common(p)
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("reduced", help="reduced-order study on a high-dimensional plant")
    _common(p)
    p.set_defaults(func=cmd_reduced)

    p = sub.add_parser("rerun", help="regenerate outputs from a manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", None):
        os.environ[WORKERS_ENV] = str(args.workers)
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
