"""Replay-attack experiments: plant + watermark + detector + attacker.

A study fixes one plant and runs ``monte_carlo`` replicas that differ only in
their noise and watermark seeds. Learning modes first run a single shared
warm-up (the learner sees ``warmup`` attack-free samples); each replica then
starts from a copy of the warmed-up learner and plant.
"""
from __future__ import annotations

import copy
import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detector import DetectorModel, ResponseState, calibrate_threshold, np_statistic, update_response
from .learning import LearnerConfig, LearnerState
from .lti import LinearSystem, SimState, random_stable_system, simulate_step
from .watermark import CostWeights, ExactDesign, exact_design

MODES = ("known_params", "online_learning", "reduced_order")
WORKERS_ENV = "REPLAY_WATERMARK_WORKERS"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Attacker
# ---------------------------------------------------------------------------

class ReplayAttacker:
    """Records ``y_k`` for ``k1 <= k <= k1 + T`` and plays it back as
    ``y'_k = y_{k - (k2 - k1)}`` for ``k2 <= k <= k2 + T``."""

    def __init__(self, record_start: int, record_len: int, replay_start: int):
        if record_len < 0 or record_start < 0:
            raise ConfigError("record_start and record_len must be >= 0")
        if replay_start < record_start:
            raise ConfigError("replay_start must not precede record_start")
        self.record_start = record_start
        self.record_len = record_len
        self.replay_start = replay_start
        self.buffer: list[np.ndarray | None] = [None] * (record_len + 1)

    @property
    def shift(self) -> int:
        return self.replay_start - self.record_start

    def replaying(self, k: int) -> bool:
        return self.replay_start <= k <= self.replay_start + self.record_len

    def __call__(self, k: int, y: np.ndarray) -> np.ndarray:
        if self.record_start <= k <= self.record_start + self.record_len:
            self.buffer[k - self.record_start] = np.array(y, copy=True)
        if self.replaying(k):
            return self.buffer[k - self.replay_start]
        return y


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _default_system():
    return {"n": 2, "m": 2, "p": 2, "seed": 16, "rho_max": 0.9}


def _default_attack():
    return {"record_start": 1, "record_len": 99, "replay_start": 101}


def _default_learner():
    return {"delta": 10.0, "beta": 1.0 / 3.0, "redesign_interval": 100, "X": None}


def _default_threshold():
    return {"mode": "lqg_ratio", "ratio": 0.9}


@dataclass
class ScenarioConfig:
    system: dict = field(default_factory=_default_system)
    horizon: int = 201
    attack: dict | None = field(default_factory=_default_attack)
    mode: str = "known_params"
    n_model: int | None = None
    learner: dict = field(default_factory=_default_learner)
    threshold: dict = field(default_factory=_default_threshold)
    monte_carlo: int = 1
    warmup: int = 100_000
    burn_in: int = 200
    learn_during_eval: bool = False
    seed: int = 0
    out_dir: str = "runs/scenario"
    plots: bool = False
    save_replica_traces: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.horizon < 0 or self.monte_carlo < 0 or self.warmup < 0 or self.burn_in < 0:
            raise ConfigError("horizon, monte_carlo, warmup and burn_in must be >= 0")
        if self.attack is not None:
            unknown = set(self.attack) - {"record_start", "record_len", "replay_start"}
            if unknown:
                raise ConfigError(f"unknown attack keys: {sorted(unknown)}")
            a = {**_default_attack(), **self.attack}
            if self.horizon <= a["replay_start"] + a["record_len"]:
                raise ConfigError("horizon must exceed replay_start + record_len")
            ReplayAttacker(**a)
            self.attack = a
        unknown = set(self.learner) - {"delta", "beta", "redesign_interval", "X"}
        if unknown:
            raise ConfigError(f"unknown learner keys: {sorted(unknown)}")
        self.learner = {**_default_learner(), **self.learner}
        unknown = set(self.threshold) - {"mode", "ratio", "alpha", "calibration_steps"}
        if unknown:
            raise ConfigError(f"unknown threshold keys: {sorted(unknown)}")
        if self.threshold.get("mode") not in ("lqg_ratio", "empirical_quantile"):
            raise ConfigError("threshold.mode must be lqg_ratio or empirical_quantile")
        if self.mode == "reduced_order" and not self.n_model:
            raise ConfigError("reduced_order mode needs n_model")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_system(spec: dict) -> LinearSystem:
    if "path" in spec:
        from .lti import load_system
        return load_system(spec["path"])
    if "A" in spec:
        return LinearSystem.from_dict(spec)
    unknown = set(spec) - {"n", "m", "p", "seed", "rho_max"}
    if unknown:
        raise ConfigError(f"unknown system keys: {sorted(unknown)}")
    return random_stable_system(spec["n"], spec["m"], spec["p"], spec["seed"], spec.get("rho_max", 0.9))


def cost_weights(cfg: ScenarioConfig, sys: LinearSystem) -> CostWeights:
    X = cfg.learner.get("X")
    if X is None:
        return CostWeights.identity(sys.m, sys.p)
    return CostWeights.from_full(X, sys.m)


def learner_config(cfg: ScenarioConfig, sys: LinearSystem) -> LearnerConfig:
    n_model = cfg.n_model if cfg.n_model else sys.n
    return LearnerConfig(m=sys.m, p=sys.p, n_model=n_model, delta=cfg.learner["delta"],
                         beta=cfg.learner["beta"], redesign_interval=cfg.learner["redesign_interval"],
                         X=cost_weights(cfg, sys))


def seeds_for(master: int) -> dict:
    """Entropy tuples of every random stream in a study."""
    return {
        "warmup_learner": [master, 1],
        "warmup_plant": [master, 2],
        "replica_watermark": [master, 3, "r"],
        "replica_plant": [master, 4, "r"],
        "calibration": [master, 5],
    }


def _replica_seed(master: int, stream: int, r: int) -> list[int]:
    return [master, stream, r]


# ---------------------------------------------------------------------------
# Warm-up for learning modes
# ---------------------------------------------------------------------------

@dataclass
class RedesignRecord:
    k: int
    u_error: float
    h0_error: float
    cap_margin: float          # max eig of (cap - U_star); >= 0 when within the bound
    floor_margin: float        # min eig of U_k minus delta/(k+1)^beta
    failed: bool


def run_learning(sys: LinearSystem, lcfg: LearnerConfig, steps: int, learner_seed, plant_seed,
                 truth: ExactDesign | None = None, learner: LearnerState | None = None,
                 state: SimState | None = None, keep_log: bool = False):
    """Drive a learner on the plant for ``steps`` attack-free ticks.

    Returns ``(learner, plant_state, records)`` with one record per redesign.
    """
    if learner is None:
        learner = LearnerState(lcfg, seed=learner_seed, keep_log=keep_log)
    if state is None:
        state = SimState.initial(sys, plant_seed)
    cap = lcfg.X.watermark_cap(lcfg.delta)
    H0 = sys.C @ sys.B
    records: list[RedesignRecord] = []
    for _ in range(steps):
        phi = learner.generate_watermark()
        state, y = simulate_step(sys, state, phi)
        failures = learner.n_failures
        if learner.update(y):
            k = learner.k
            floor = lcfg.delta / (k + 1) ** lcfg.beta
            records.append(RedesignRecord(
                k=k,
                u_error=float(np.linalg.norm(learner.U_current - truth.U)) if truth is not None else float("nan"),
                h0_error=float(np.linalg.norm(learner.H_hat[0] - H0)),
                cap_margin=float(np.linalg.eigvalsh(cap - learner.U_star).min()),
                floor_margin=float(np.linalg.eigvalsh(learner.U_current).min() - floor),
                failed=learner.n_failures > failures,
            ))
    return learner, state, records


# ---------------------------------------------------------------------------
# Replicas
# ---------------------------------------------------------------------------

@dataclass
class _ReplicaJob:
    mode: str
    sys: LinearSystem
    truth: ExactDesign
    zeta: float
    horizon: int
    burn_in: int
    attack: dict | None
    watermark_seed: list
    plant_seed: list
    learner: LearnerState | None
    plant_x: np.ndarray | None
    learn_during_eval: bool


def _exact_detector(truth: ExactDesign, zeta: float) -> DetectorModel:
    return DetectorModel(truth.Wcal, truth.Ucal, zeta)


def _run_replica(job: _ReplicaJob):
    sys, truth = job.sys, job.truth
    modal = truth.modal
    exact_det = _exact_detector(truth, job.zeta)
    exact_resp = ResponseState.for_modal(modal)
    attacker = ReplayAttacker(**job.attack) if job.attack else None
    if job.plant_x is None:
        state = SimState.initial(sys, job.plant_seed)
    else:
        state = SimState(x=job.plant_x, rng_seed=job.plant_seed)

    g = np.empty(job.horizon)
    g_exact = np.empty(job.horizon) if job.mode != "known_params" else None

    if job.mode == "known_params":
        rng = np.random.default_rng(job.watermark_seed)
        Usqrt = _psd_sqrt(truth.U)
        for t in range(-job.burn_in, job.horizon):
            phi = Usqrt @ rng.standard_normal(sys.p)
            state, y = simulate_step(sys, state, phi)
            if t >= 0:
                y_in = attacker(t, y) if attacker else y
                g[t] = np_statistic(y_in, exact_resp.gamma, exact_det)
            update_response(exact_resp, modal, phi)
        return g, None

    learner = copy.deepcopy(job.learner)
    learner.rng = np.random.default_rng(job.watermark_seed)
    for t in range(-job.burn_in, job.horizon):
        phi = learner.generate_watermark()
        state, y = simulate_step(sys, state, phi)
        if t >= 0:
            y_in = attacker(t, y) if attacker else y
            g[t] = learner.online_np_statistic(y_in)
            g_exact[t] = np_statistic(y_in, exact_resp.gamma, exact_det)
        else:
            y_in = y
        if job.learn_during_eval:
            learner.update(y_in)
        else:
            learner.skip()
        update_response(exact_resp, modal, phi)
    return g, g_exact


def _psd_sqrt(M):
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


def max_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _map(fn, jobs):
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# Study
# ---------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    mode: str
    zeta: float
    g: np.ndarray                        # (replicas, horizon)
    alarms: np.ndarray                   # (replicas, horizon) bool
    detection_rate: np.ndarray           # (horizon,)
    g_exact: np.ndarray | None = None    # learning modes: exact-parameter detector on the same data
    redesigns: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def u_error(self) -> list[tuple[int, float]]:
        return [(r.k, r.u_error) for r in self.redesigns]

    @classmethod
    def empty(cls, mode: str = "known_params") -> "RunArtifacts":
        return cls(mode=mode, zeta=float("nan"), g=np.zeros((0, 0)), alarms=np.zeros((0, 0), bool),
                   detection_rate=np.zeros(0))


def detection_rate(replicas, zeta: float) -> np.ndarray:
    """Fraction of replicas with ``g_k >= zeta`` at each step."""
    G = np.asarray(replicas, dtype=float)
    if G.ndim != 2 or G.shape[0] == 0:
        raise ValueError("empty replica set")
    return (G >= zeta).mean(axis=0)


def run_scenario(cfg: ScenarioConfig) -> RunArtifacts:
    sys = build_system(cfg.system)
    X = cost_weights(cfg, sys)
    delta = cfg.learner["delta"]
    truth = exact_design(sys, X, delta)
    lcfg = learner_config(cfg, sys)
    seed = cfg.seed

    learner = None
    plant_x = None
    records: list[RedesignRecord] = []
    if cfg.mode != "known_params":
        learner, state, records = run_learning(
            sys, lcfg, cfg.warmup, learner_seed=[seed, 1], plant_seed=[seed, 2], truth=truth)
        plant_x = state.x.copy()

    zeta = _threshold(cfg, sys, truth, learner, plant_x)

    jobs = [
        _ReplicaJob(mode=cfg.mode, sys=sys, truth=truth, zeta=zeta, horizon=cfg.horizon,
                    burn_in=cfg.burn_in, attack=cfg.attack,
                    watermark_seed=_replica_seed(seed, 3, r), plant_seed=_replica_seed(seed, 4, r),
                    learner=learner, plant_x=plant_x, learn_during_eval=cfg.learn_during_eval)
        for r in range(cfg.monte_carlo)
    ]
    results = _map(_run_replica, jobs)
    G = np.array([r[0] for r in results]).reshape(len(results), cfg.horizon)
    G_exact = None
    if cfg.mode != "known_params":
        G_exact = np.array([r[1] for r in results]).reshape(len(results), cfg.horizon)
    alarms = G >= zeta
    rate = alarms.mean(axis=0) if len(results) else np.zeros(cfg.horizon)

    summary = {
        "n": sys.n, "m": sys.m, "p": sys.p,
        "J0": truth.J0, "deltaJ": truth.deltaJ, "J": truth.J, "zeta": zeta,
        "U_exact": truth.U.tolist(),
        "seeds": seeds_for(seed),
    }
    if learner is not None:
        summary.update({
            "warmup_redesigns": learner.n_redesigns,
            "warmup_failures": learner.n_failures,
            "U_learned": learner.U_current.tolist(),
        })
    return RunArtifacts(mode=cfg.mode, zeta=zeta, g=G, alarms=alarms, detection_rate=rate,
                        g_exact=G_exact, redesigns=records, summary=summary, config=cfg.to_dict())


def _threshold(cfg, sys, truth, learner, plant_x) -> float:
    th = cfg.threshold
    if th["mode"] == "lqg_ratio":
        return calibrate_threshold("lqg_ratio", J=truth.J, ratio=th.get("ratio", 0.9))
    steps = int(th.get("calibration_steps", 10_000))
    job = _ReplicaJob(mode=cfg.mode, sys=sys, truth=truth, zeta=np.inf, horizon=steps,
                      burn_in=cfg.burn_in, attack=None, watermark_seed=[cfg.seed, 5, 0],
                      plant_seed=[cfg.seed, 5, 1], learner=learner, plant_x=plant_x,
                      learn_during_eval=False)
    g, _ = _run_replica(job)
    return calibrate_threshold("empirical_quantile", trace=g, alpha=th.get("alpha", 0.05))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _trace_rows(g: np.ndarray, zeta: float, mode: str):
    return [(k, repr(float(v)), int(v >= zeta), mode) for k, v in enumerate(g)]


def emit(art: RunArtifacts, out_dir, plots: bool = False) -> list[Path]:
    """Write CSV traces and ``manifest.json``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    g0 = art.g[0] if art.g.shape[0] else np.zeros(0)

    p = out / "g_trace.csv"
    _write_csv(p, ("k", "g", "alarm", "mode"), _trace_rows(g0, art.zeta, art.mode))
    written.append(p)

    if art.g_exact is not None and art.g_exact.shape[0]:
        p = out / "g_exact_trace.csv"
        _write_csv(p, ("k", "g", "alarm", "mode"), _trace_rows(art.g_exact[0], art.zeta, "exact_reference"))
        written.append(p)

    p = out / "u_error.csv"
    _write_csv(p, ("k", "frobenius_error"), [(k, repr(float(e))) for k, e in art.u_error])
    written.append(p)

    p = out / "detection_rate.csv"
    _write_csv(p, ("k", "rate"), [(k, repr(float(r))) for k, r in enumerate(art.detection_rate)])
    written.append(p)

    if art.g_exact is not None and art.g_exact.shape[0]:
        p = out / "detection_rate_exact.csv"
        rate = (art.g_exact >= art.zeta).mean(axis=0)
        _write_csv(p, ("k", "rate"), [(k, repr(float(r))) for k, r in enumerate(rate)])
        written.append(p)

    if art.config.get("save_replica_traces"):
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for r, g in enumerate(art.g):
            p = tdir / f"replica_{r:04d}.csv"
            _write_csv(p, ("k", "g", "alarm", "mode"), _trace_rows(g, art.zeta, art.mode))
            written.append(p)

    manifest = {"config": art.config, "summary": art.summary,
                "files": sorted(str(q.relative_to(out)) for q in written)}
    p = out / "manifest.json"
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    written.append(p)

    if plots:
        written += _plot(art, out)
    return written


def _plot(art: RunArtifacts, out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    if art.g.shape[0]:
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.plot(art.g[0], lw=0.8, label=f"g ({art.mode})")
        if art.g_exact is not None:
            ax.plot(art.g_exact[0], lw=0.8, label="g (exact parameters)")
        ax.axhline(art.zeta, color="k", ls="--", lw=0.8, label="threshold")
        ax.set_xlabel("k")
        ax.legend(loc="upper left", fontsize=8)
        fig.tight_layout()
        paths.append(out / "g_trace.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(7, 3))
        ax.plot(art.detection_rate, lw=0.8)
        ax.set_xlabel("k")
        ax.set_ylabel("detection rate")
        fig.tight_layout()
        paths.append(out / "detection_rate.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)
    if art.redesigns:
        ks, errs = zip(*art.u_error)
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.loglog(ks, errs, lw=0.8)
        ax.set_xlabel("k")
        ax.set_ylabel("||U_k - U||_F")
        fig.tight_layout()
        paths.append(out / "u_error.png")
        fig.savefig(paths[-1], dpi=120)
        plt.close(fig)
    return paths


def rerun_from_manifest(path, out_dir=None) -> list[Path]:
    manifest = json.loads(Path(path).read_text())
    cfg = ScenarioConfig.from_dict(manifest["config"])
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    art = run_scenario(cfg)
    return emit(art, cfg.out_dir, plots=cfg.plots)
