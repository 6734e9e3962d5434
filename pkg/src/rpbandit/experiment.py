"""Experiment driver: seeded repetitions, CTR/regret curves, diagnostics, reports.

Reports are deterministic functions of the config. Wall-clock measurements are
kept on the in-memory report and written to a separate ``*.timing.json``
sidecar so that the report files themselves are byte-identical across runs.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .core import AlgoParams, EndOfData, InvalidParameterError, log_term, make_rng
from .environments import (
    CONTEXT_GENERATORS,
    RegretLedger,
    ReplayEnv,
    SyntheticEnv,
    make_synthetic_env,
    record_regret,
)
from .policies import (
    BCMABRP,
    CBRAP,
    EpsilonGreedy,
    LinearTS,
    LinUCB,
    Policy,
    RandomPolicy,
    compute_nu,
)
from .projection import ProjectionMatrix, distortion_bound, inner_product_distortion_trial

POLICIES = ("bcmab-rp", "linear-ts", "linucb", "cbrap", "egreedy", "random")
REPORT_SCHEMA = 1
CSV_COLUMNS = ("kind", "repetition", "t", "cumulative_reward", "ctr", "cumulative_regret")
FULL_LOG_LIMIT = 20_000


@dataclass(frozen=True)
class ExperimentConfig:
    policy: str = "bcmab-rp"
    env: str = "synthetic"
    T: int = 1000
    repetitions: int = 1
    base_seed: int = 0
    # synthetic environment
    n: int = 120
    arms: int = 50
    context_gen: str = "ball"
    rank: int = 8
    jitter: float = 0.1
    # replay environment
    artifact: Optional[str] = None
    # policy hyperparameters
    d: int = 24
    lam: float = 1.0
    delta: float = 0.1
    epsilon: float = 0.1
    R: float = 0.5
    L_z: Optional[float] = None
    L_psi: float = 1.0
    alpha: float = 1.0
    egreedy_eps: float = 0.1
    normalize_columns: bool = False
    diagnostics: bool = False
    checkpoints: Optional[tuple] = None
    log_every: Optional[int] = None

    def validate(self, n: Optional[int] = None) -> None:
        if self.policy not in POLICIES:
            raise InvalidParameterError(f"unknown policy {self.policy!r}")
        if self.env not in ("synthetic", "replay"):
            raise InvalidParameterError(f"unknown environment {self.env!r}")
        if self.T < 1 or self.repetitions < 1:
            raise InvalidParameterError("T and repetitions must be positive")
        if not 0 <= self.base_seed < 2**63:
            raise InvalidParameterError("seed must be a non-negative 63-bit integer")
        if self.env == "replay" and not self.artifact:
            raise InvalidParameterError("replay runs need --artifact")
        if self.env == "synthetic":
            if self.arms < 1 or self.n < 1:
                raise InvalidParameterError("need n >= 1 and arms >= 1")
            if self.context_gen not in CONTEXT_GENERATORS:
                raise InvalidParameterError(f"unknown context generator {self.context_gen!r}")
        n = self.n if n is None else n
        if self.policy in ("bcmab-rp", "cbrap") and not 1 <= self.d <= n:
            raise InvalidParameterError(f"projected policies need 1 <= d <= n, got d={self.d}, n={n}")
        if self.diagnostics and (self.env != "synthetic" or self.policy != "bcmab-rp"):
            raise InvalidParameterError("diagnostics need the bcmab-rp policy on a synthetic environment")
        if self.alpha < 0 or not 0 <= self.egreedy_eps <= 1:
            raise InvalidParameterError("alpha must be >= 0 and egreedy-eps in [0, 1]")
        if self.checkpoints is not None:
            cps = list(self.checkpoints)
            if cps != sorted(cps) or (cps and (cps[0] < 1 or cps[-1] > self.T)):
                raise InvalidParameterError("checkpoints must be sorted and within [1, T]")
        self.params(n if self.policy == "linear-ts" else None)

    def params(self, d: Optional[int] = None) -> AlgoParams:
        return AlgoParams(d=d or self.d, lam=self.lam, delta=self.delta, epsilon=self.epsilon,
                          R=self.R, L_z=self.L_z, L_psi=self.L_psi)

    def resolved_checkpoints(self) -> List[int]:
        if self.checkpoints is not None:
            return [int(c) for c in self.checkpoints]
        return default_checkpoints(self.T)

    def thinning(self) -> int:
        if self.log_every is not None:
            return max(1, int(self.log_every))
        return 1 if self.T <= FULL_LOG_LIMIT else 10


def default_checkpoints(T: int, count: int = 100) -> List[int]:
    """Up to ``count`` logarithmically spaced rounds in ``[1, T]``, always ending at ``T``."""
    pts = np.unique(np.round(np.logspace(0, math.log10(T), count)).astype(int))
    pts = pts[(pts >= 1) & (pts <= T)]
    if pts.size == 0 or pts[-1] != T:
        pts = np.append(pts, T)
    return [int(p) for p in pts]


def make_policy(cfg: ExperimentConfig, n: int, num_arms: int, seed: int,
                projection: Optional[ProjectionMatrix] = None) -> Policy:
    posterior = make_rng(seed, "posterior")
    if cfg.policy == "bcmab-rp":
        return BCMABRP(n, cfg.params(), posterior, projection=projection,
                       projection_rng=make_rng(seed, "projection"),
                       normalize_columns=cfg.normalize_columns)
    if cfg.policy == "linear-ts":
        return LinearTS(n, cfg.params(n), posterior)
    if cfg.policy == "linucb":
        return LinUCB(n, cfg.lam, cfg.alpha)
    if cfg.policy == "cbrap":
        return CBRAP(n, cfg.d, make_rng(seed, "projection"), lam=cfg.lam, alpha=cfg.alpha,
                     projection=projection, normalize_columns=cfg.normalize_columns)
    if cfg.policy == "egreedy":
        return EpsilonGreedy(num_arms, cfg.egreedy_eps, make_rng(seed, "policy"))
    return RandomPolicy(make_rng(seed, "policy"))


def make_env(cfg: ExperimentConfig, seed: int, artifact=None):
    if cfg.env == "synthetic":
        return make_synthetic_env(cfg.n, cfg.arms, seed, cfg.context_gen, cfg.rank, cfg.jitter)
    if artifact is None:
        from .ingestion import load_artifact
        artifact = load_artifact(cfg.artifact)
    return ReplayEnv(artifact, cfg.T, seed)


# --------------------------------------------------------------------------
# diagnostics


def alpha_width(t: int, p: AlgoParams, L_z: float) -> float:
    """Confidence width of the ridge estimate: like ``compute_nu`` with ``sqrt(d log)``."""
    return (p.R * math.sqrt(p.d * log_term(t, L_z, p.lam, p.delta))
            + math.sqrt(p.lam) * p.L_psi + p.epsilon * math.sqrt(t))


def beta_width(t: int, p: AlgoParams, L_z: float, num_arms: int) -> float:
    """Sampling width ``min(sqrt(4 d ln t), sqrt(4 ln(t A))) * nu_t``."""
    factor = min(math.sqrt(4.0 * p.d * math.log(t)), math.sqrt(4.0 * math.log(t * num_arms)))
    return factor * compute_nu(t, p, L_z=L_z)


@dataclass
class RoundSnapshot:
    """Posterior seen by the policy at round ``t`` (before its update)."""

    t: int
    X: np.ndarray
    psi_hat: np.ndarray
    Z_inv: np.ndarray
    psi_tilde: Optional[np.ndarray]
    chosen: int
    L_z: float


@dataclass
class DiagnosticCounters:
    t: List[int] = field(default_factory=list)
    s_chosen: List[float] = field(default_factory=list)
    alpha: List[float] = field(default_factory=list)
    beta: List[float] = field(default_factory=list)
    gamma: List[float] = field(default_factory=list)
    L_z: List[float] = field(default_factory=list)
    saturated: List[int] = field(default_factory=list)
    e_hat: List[bool] = field(default_factory=list)
    e_tilde: List[bool] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.t)

    @property
    def e_hat_rounds(self) -> int:
        return int(sum(self.e_hat))

    @property
    def e_hat_frequency(self) -> float:
        return self.e_hat_rounds / self.rounds if self.rounds else float("nan")

    @property
    def e_tilde_frequency(self) -> float:
        return sum(self.e_tilde) / self.rounds if self.rounds else float("nan")

    def summary(self) -> Dict[str, float]:
        return {
            "rounds": self.rounds,
            "e_hat_rounds": self.e_hat_rounds,
            "e_hat_frequency": self.e_hat_frequency,
            "e_tilde_frequency": self.e_tilde_frequency,
            "mean_saturated": float(np.mean(self.saturated)) if self.saturated else float("nan"),
        }

    def observe(self, snap: RoundSnapshot, env: SyntheticEnv, P: ProjectionMatrix, params: AlgoParams) -> None:
        t = snap.t
        Zs = P.apply(snap.X)
        s = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Zs, snap.Z_inv, Zs), 0.0))
        a = alpha_width(t, params, snap.L_z)
        b = beta_width(t, params, snap.L_z, Zs.shape[0])
        g = a + b
        psi_star = P.entries @ env.theta_star
        true_proj = Zs @ psi_star
        est = Zs @ snap.psi_hat
        best = int(np.argmax(snap.X @ env.theta_star))
        gap = true_proj[best] - true_proj
        self.t.append(t)
        self.s_chosen.append(float(s[snap.chosen]))
        self.alpha.append(a)
        self.beta.append(b)
        self.gamma.append(g)
        self.L_z.append(snap.L_z)
        self.saturated.append(int(np.count_nonzero(gap > g * s)))
        self.e_hat.append(bool(np.all(np.abs(est - true_proj) <= a * s)))
        if snap.psi_tilde is not None:
            self.e_tilde.append(bool(np.all(np.abs(Zs @ snap.psi_tilde - est) <= b * s)))

    def to_dict(self) -> dict:
        return {**{k: list(getattr(self, k)) for k in
                   ("t", "s_chosen", "alpha", "beta", "gamma", "L_z", "saturated", "e_hat", "e_tilde")},
                "summary": self.summary()}

    @classmethod
    def from_dict(cls, data: dict) -> "DiagnosticCounters":
        return cls(**{k: list(v) for k, v in data.items() if k != "summary"})


def diagnostics_pass(trace: Iterable[RoundSnapshot], env, P: ProjectionMatrix,
                     params: AlgoParams) -> DiagnosticCounters:
    """Evaluate the concentration events over a stream of round snapshots."""
    if not isinstance(env, SyntheticEnv):
        raise InvalidParameterError("diagnostics need a synthetic environment with a known theta_star")
    counters = DiagnosticCounters()
    for snap in trace:
        counters.observe(snap, env, P, params)
    return counters


# --------------------------------------------------------------------------
# running


@dataclass
class RepetitionResult:
    repetition: int
    seed: int
    t: List[int]
    arm: List[int]
    reward: List[float]
    regret: Optional[List[float]]
    rounds: int
    cumulative_reward: float
    cumulative_regret: Optional[float]
    curve: List[tuple]
    partial: bool = False
    diagnostics: Optional[DiagnosticCounters] = None
    step_ns: Optional[List[int]] = None

    def to_dict(self) -> dict:
        d = {
            "repetition": self.repetition,
            "seed": self.seed,
            "rounds": self.rounds,
            "partial": self.partial,
            "cumulative_reward": self.cumulative_reward,
            "cumulative_regret": self.cumulative_regret,
            "outcomes": {"t": self.t, "arm": self.arm, "reward": self.reward, "regret": self.regret},
            "curve": [list(row) for row in self.curve],
        }
        if self.diagnostics is not None:
            d["diagnostics"] = self.diagnostics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RepetitionResult":
        o = d["outcomes"]
        diag = DiagnosticCounters.from_dict(d["diagnostics"]) if "diagnostics" in d else None
        return cls(d["repetition"], d["seed"], o["t"], o["arm"], o["reward"], o["regret"], d["rounds"],
                   d["cumulative_reward"], d["cumulative_regret"], [tuple(r) for r in d["curve"]],
                   d["partial"], diag)

    @property
    def total_ns(self) -> int:
        return int(sum(self.step_ns)) if self.step_ns else 0


def compute_ctr_curve(rewards: Sequence[float], checkpoints: Sequence[int]) -> List[tuple]:
    """``(t, sum(rewards[:t]) / t)`` at each checkpoint."""
    cps = list(checkpoints)
    if cps != sorted(cps) or (cps and (cps[0] < 1 or cps[-1] > len(rewards))):
        raise InvalidParameterError("checkpoints must be sorted and within [1, T]")
    csum = np.cumsum(np.asarray(rewards, dtype=np.float64))
    return [(int(t), float(csum[t - 1] / t)) for t in cps]


def _curve(rewards, regrets, checkpoints, rounds) -> List[tuple]:
    cps = [c for c in checkpoints if c <= rounds]
    csum = np.cumsum(rewards)
    creg = np.cumsum(regrets) if regrets is not None else None
    rows = []
    for t, ctr in compute_ctr_curve(rewards, cps):
        rows.append((t, float(csum[t - 1]), ctr, float(creg[t - 1]) if creg is not None else None))
    return rows


def run_repetition(cfg: ExperimentConfig, rep: int, artifact=None,
                   projection: Optional[ProjectionMatrix] = None) -> RepetitionResult:
    seed = cfg.base_seed + rep
    env = make_env(cfg, seed, artifact)
    n = env.n
    policy = make_policy(cfg, n, env.num_arms, seed, projection)
    synthetic = isinstance(env, SyntheticEnv)
    ledger = RegretLedger() if synthetic else None
    diag = DiagnosticCounters() if cfg.diagnostics else None
    params = cfg.params()
    rewards, arms, step_ns, regrets = [], [], [], []
    partial = False
    clock = time.perf_counter_ns
    for t in range(1, cfg.T + 1):
        try:
            X = env.contexts(t)
        except EndOfData:
            partial = True
            break
        if diag is not None:
            psi_hat, Z_inv = policy.state.psi_hat.copy(), policy.state.Z_inv.copy()
        t0 = clock()
        dec = policy.select(X)
        t1 = clock()
        r = env.reward(X[dec.arm]) if synthetic else env.feedback(t, dec.arm)
        t2 = clock()
        policy.update(dec.arm, X, r)
        t3 = clock()
        step_ns.append((t1 - t0) + (t3 - t2))
        rewards.append(r)
        arms.append(dec.arm)
        if ledger is not None:
            regrets.append(record_regret(ledger, env, X, dec.arm))
        if diag is not None:
            diag.observe(RoundSnapshot(t, X, psi_hat, Z_inv, dec.sampled_parameter, dec.arm, policy.L_z),
                         env, policy.P, params)
    rounds = len(rewards)
    reg_arr = regrets if synthetic else None
    curve = _curve(rewards, reg_arr, cfg.resolved_checkpoints(), rounds)
    keep = range(0, rounds, cfg.thinning())
    return RepetitionResult(
        repetition=rep,
        seed=seed,
        t=[i + 1 for i in keep],
        arm=[arms[i] for i in keep],
        reward=[rewards[i] for i in keep],
        regret=[regrets[i] for i in keep] if synthetic else None,
        rounds=rounds,
        cumulative_reward=float(np.sum(rewards)),
        cumulative_regret=float(np.sum(regrets)) if synthetic else None,
        curve=curve,
        partial=partial,
        diagnostics=diag,
        step_ns=step_ns,
    )


@dataclass
class ExperimentReport:
    config: dict
    repetitions: List[RepetitionResult]
    provenance: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return any(r.partial for r in self.repetitions)

    @property
    def checkpoints(self) -> List[int]:
        common = None
        for r in self.repetitions:
            ts = [row[0] for row in r.curve]
            common = ts if common is None else [t for t in common if t in set(ts)]
        return common or []

    def aggregates(self) -> dict:
        reps = self.repetitions
        cps = self.checkpoints
        curve = []
        for i, t in enumerate(cps):
            rows = [r.curve[i] for r in reps]
            curve.append((t, _mean([row[1] for row in rows]), _mean([row[2] for row in rows]),
                          _mean([row[3] for row in rows]) if rows[0][3] is not None else None))
        regrets = [r.cumulative_regret for r in reps]
        out = {
            "average_cumulative_reward": _mean([r.cumulative_reward for r in reps]),
            "average_ctr": _mean([r.cumulative_reward / r.rounds if r.rounds else 0.0 for r in reps]),
            "average_cumulative_regret": _mean(regrets) if regrets[0] is not None else None,
            "curve": [list(row) for row in curve],
        }
        if reps[0].diagnostics is not None:
            out["diagnostics_e_hat_frequency"] = (sum(r.diagnostics.e_hat_rounds for r in reps)
                                                  / sum(r.diagnostics.rounds for r in reps))
        return out

    def timing(self) -> dict:
        reps = [r for r in self.repetitions if r.step_ns]
        totals = [r.total_ns for r in reps]
        return {
            "average_total_ns": _mean(totals) if totals else None,
            "average_step_ns": _mean([r.total_ns / len(r.step_ns) for r in reps]) if reps else None,
            "per_repetition_total_ns": totals,
        }

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "config": self.config,
            "provenance": self.provenance,
            "partial": self.partial,
            "aggregates": self.aggregates(),
            "repetitions": [r.to_dict() for r in self.repetitions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise InvalidParameterError(f"unsupported report schema {d.get('schema')}")
        return cls(d["config"], [RepetitionResult.from_dict(r) for r in d["repetitions"]], d["provenance"])


def _mean(values) -> float:
    # math.fsum keeps the aggregate an exact-as-possible mean of the parts
    return math.fsum(values) / len(values)


def _worker(args):
    cfg, rep = args
    return run_repetition(cfg, rep)


def max_workers(reps: int) -> int:
    cap = os.environ.get("RPBANDIT_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, reps))


def run_experiment(cfg: ExperimentConfig, artifact=None,
                   projection: Optional[ProjectionMatrix] = None) -> ExperimentReport:
    """Run ``cfg.repetitions`` seeded repetitions (seed = base_seed + index)."""
    if cfg.env == "replay" and artifact is None:
        if not cfg.artifact:
            raise InvalidParameterError("replay runs need --artifact")
        from .ingestion import load_artifact
        artifact = load_artifact(cfg.artifact)
    cfg.validate(artifact.n if artifact is not None else None)
    provenance = {"seeds": [cfg.base_seed + i for i in range(cfg.repetitions)]}
    if artifact is not None:
        provenance["artifact"] = {"dataset": artifact.kind, "n": artifact.n, "users": int(artifact.user_factors.shape[0]),
                                  "items": int(artifact.item_factors.shape[0]), "k_user": artifact.k_user,
                                  "k_item": artifact.k_item, "seed": artifact.seed, "scale": artifact.scale}
    workers = max_workers(cfg.repetitions)
    if workers > 1 and artifact is None and projection is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, [(cfg, i) for i in range(cfg.repetitions)]))
    else:
        results = [run_repetition(cfg, i, artifact, projection) for i in range(cfg.repetitions)]
    return ExperimentReport(config_dict(cfg), results, provenance)


def config_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    if d["checkpoints"] is not None:
        d["checkpoints"] = list(d["checkpoints"])
    return d


# --------------------------------------------------------------------------
# reports


def report_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)

    def fmt(v):
        return "" if v is None else repr(v)

    for r in report.repetitions:
        for t, cum, ctr, reg in r.curve:
            w.writerow(["checkpoint", r.repetition, t, fmt(cum), fmt(ctr), fmt(reg)])
    agg = report.aggregates()
    for t, cum, ctr, reg in agg["curve"]:
        w.writerow(["mean", "all", t, fmt(cum), fmt(ctr), fmt(reg)])
    T_done = min(r.rounds for r in report.repetitions)
    w.writerow(["final" if not report.partial else "final-partial", "all", T_done,
                fmt(agg["average_cumulative_reward"]), fmt(agg["average_ctr"]),
                fmt(agg["average_cumulative_regret"])])
    return buf.getvalue()


def report_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"


def emit_report(report: ExperimentReport, path, fmt: str = "json", timing: bool = True) -> List[Path]:
    """Write the report and, unless ``timing=False``, a ``<path>.timing.json`` sidecar."""
    if fmt not in ("json", "csv"):
        raise InvalidParameterError(f"unknown report format {fmt!r}")
    path = Path(path)
    text = report_json(report) if fmt == "json" else report_csv(report)
    path.write_text(text, encoding="utf-8")
    written = [path]
    if timing:
        side = path.with_name(path.name + ".timing.json")
        side.write_text(json.dumps(report.timing(), indent=1) + "\n", encoding="utf-8")
        written.append(side)
    return written


# --------------------------------------------------------------------------
# probes


def runtime_scaling_probe(d: int, n_list: Sequence[int], steps: int = 2000, seed: int = 0,
                          arms: int = 50, warmup: int = 200, runs: int = 3,
                          pool_size: int = 16) -> List[tuple]:
    """Median (over ``runs``) mean per-step nanoseconds of BCMAB-RP select+update per ``n``.

    Contexts come from a pre-generated pool so that context generation is not timed.
    """
    if steps < 1 or runs < 1:
        raise InvalidParameterError("steps and runs must be positive")
    out = []
    clock = time.perf_counter_ns
    for n in n_list:
        if d > n:
            raise InvalidParameterError(f"d={d} exceeds n={n}")
        env = make_synthetic_env(n, arms, seed)
        blocks = [env.contexts(t) for t in range(1, pool_size + 1)]
        coins = make_rng(seed, "noise").gen.random(warmup + steps)
        means = []
        for run in range(runs):
            params = AlgoParams(d=d)
            policy = BCMABRP(n, params, make_rng(seed + run, "posterior"),
                             projection_rng=make_rng(seed, "projection"))
            total = 0
            for i in range(warmup + steps):
                X = blocks[i % pool_size]
                t0 = clock()
                dec = policy.select(X)
                policy.update(dec.arm, X, float(coins[i] < 0.5))
                dt = clock() - t0
                if i >= warmup:
                    total += dt
            means.append(total / steps)
        out.append((int(n), float(np.median(means))))
    return out


def distortion_sweep(n: int, d_list: Sequence[int], epsilon: float, trials: int, seed: int) -> List[dict]:
    """Violation fraction of the inner-product bound for ``theta = x = e_1`` at each ``d``."""
    e1 = np.zeros(n)
    e1[0] = 1.0
    rows = []
    for d in d_list:
        frac = inner_product_distortion_trial(e1, e1, d, epsilon, trials, make_rng(seed, "projection").child(d))
        rows.append({"d": int(d), "violation_fraction": frac, "bound": distortion_bound(d, epsilon)})
    return rows
