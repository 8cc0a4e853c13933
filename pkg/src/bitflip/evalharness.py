"""Attack metrics, an exhaustive oracle for small instances, and campaigns."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .attacks import AttackReport, SearchPolicy, attack_success_rate, run_ssa, run_tsa
from .bitrep import hamming_distance
from .lpbox import AdmmConfig, LossCallbacks, NumericError, TraceRecord, admm_solve
from .netcore import Dataset, Network, accuracy

log = logging.getLogger(__name__)

ORACLE_MAX_V = 24
ORACLE_MAX_CANDIDATES = 2_000_000


class OracleSizeError(ValueError):
    """The enumeration would exceed the configured guard."""


@dataclass(frozen=True)
class AttackMetrics:
    asr: float
    pa_acc: float
    n_flip: int
    acc: float


def evaluate_attack(
    net: Network,
    net_flipped: Network,
    validation: Dataset,
    attacked_X: np.ndarray,
    target: int,
) -> AttackMetrics:
    """ASR on ``attacked_X``, clean accuracy before/after, and bits changed.

    ``attacked_X`` is the single attacked input for SSA, or the triggered
    held-out inputs for TSA.
    """
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    return AttackMetrics(
        asr=attack_success_rate(net_flipped, attacked_X, target),
        pa_acc=accuracy(net_flipped, validation),
        n_flip=hamming_distance(net.output.bits, net_flipped.output.bits),
        acc=accuracy(net, validation),
    )


def oracle_candidate_count(V: int, k: int) -> int:
    return sum(math.comb(V, j) for j in range(min(k, V) + 1))


def brute_force_oracle(
    b,
    k: int,
    objective: Callable[[np.ndarray], float],
    max_v: int = ORACLE_MAX_V,
    max_candidates: int = ORACLE_MAX_CANDIDATES,
) -> tuple[np.ndarray, float]:
    """Minimise ``objective`` over every binary vector within Hamming distance ``k`` of ``b``.

    Ties go to the lexicographically smallest sorted tuple of flipped
    indices.
    """
    b = np.asarray(b).astype(np.uint8)
    V = b.shape[0]
    n = oracle_candidate_count(V, k)
    if V > max_v or n > max_candidates:
        raise OracleSizeError(f"V={V}, k={k} gives {n} candidates; limit is V<={max_v}, {max_candidates} candidates")
    best_flips: tuple[int, ...] = ()
    best_val = float(objective(b.copy()))
    cand = b.copy()
    for size in range(1, min(k, V) + 1):
        for flips in itertools.combinations(range(V), size):
            idx = list(flips)
            cand[idx] ^= 1
            val = float(objective(cand))
            cand[idx] ^= 1
            if val < best_val or (val == best_val and flips < best_flips):
                best_val, best_flips = val, flips
    out = b.copy()
    out[list(best_flips)] ^= 1
    return out, best_val


# --------------------------------------------------------------- campaigns


@dataclass
class CampaignSpec:
    """A batch of independent attacks against one network.

    ``work`` holds ``(x, source, target)`` triples for SSA or bare target
    classes for TSA.
    """

    attack_type: str
    network: Network
    work: Sequence
    aux: Dataset
    validation: Dataset
    cfg: Optional[AdmmConfig] = None
    policy: Optional[SearchPolicy] = None
    delta: float = 10.0
    mask: Optional[np.ndarray] = None
    mask_spec: Optional[dict] = None
    input_range: tuple[float, float] = (0.0, 1.0)
    jobs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.attack_type not in ("ssa", "tsa"):
            raise ValueError(f"unknown attack type {self.attack_type!r}")
        if len(self.work) == 0:
            raise ValueError("campaign has no work items")
        if len(self.validation) == 0:
            raise ValueError("validation set is empty")
        if self.attack_type == "tsa" and self.mask is None:
            raise ValueError("TSA campaign needs a trigger mask")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")


@dataclass
class CampaignSummary:
    acc: float
    asr: float
    pa_acc_mean: float
    pa_acc_std: float
    n_flip_mean: float
    n_flip_std: float
    attacks: list[AttackReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "attacks"}
        d["attacks"] = [a.to_dict() for a in self.attacks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignSummary":
        d = dict(d)
        attacks = [AttackReport.from_dict(a) for a in d.pop("attacks")]
        return cls(**d, attacks=attacks)


def _run_one(args) -> AttackReport:
    spec, item = args
    try:
        if spec.attack_type == "ssa":
            x, s, t = item
            return run_ssa(
                spec.network,
                x,
                int(s),
                int(t),
                spec.aux,
                spec.policy or SearchPolicy(),
                spec.cfg,
                spec.delta,
                spec.validation,
            )
        return run_tsa(
            spec.network,
            int(item),
            spec.mask,
            spec.aux,
            spec.policy,
            spec.cfg,
            spec.seed,
            spec.validation,
            spec.input_range,
            spec.mask_spec,
        )
    except NumericError as exc:
        log.warning("attack %r failed numerically: %s", item, exc)
        s = int(item[1]) if spec.attack_type == "ssa" else None
        t = int(item[2]) if spec.attack_type == "ssa" else int(item)
        return AttackReport(
            attack_type=spec.attack_type,
            target_class=t,
            source_class=s,
            success=False,
            n_flip=0,
            flipped_bits=[],
            asr=0.0,
            pa_acc=accuracy(spec.network, spec.validation),
            acc=accuracy(spec.network, spec.validation),
            converged=False,
            iterations=len(exc.trace),
            lambda_used=float("nan"),
            k_used=0,
            trace=list(exc.trace),
        )


def summarize(reports: Sequence[AttackReport], acc: float) -> CampaignSummary:
    reports = list(reports)
    pa = np.array([r.pa_acc for r in reports], dtype=np.float64)
    ok = [r.n_flip for r in reports if r.success]
    nf = np.array(ok, dtype=np.float64) if ok else np.array([np.nan])
    return CampaignSummary(
        acc=float(acc),
        asr=float(np.mean([r.asr for r in reports])),
        pa_acc_mean=float(np.mean(pa)),
        pa_acc_std=float(np.std(pa)),
        n_flip_mean=float(np.mean(nf)),
        n_flip_std=float(np.std(nf)),
        attacks=reports,
    )


def run_campaign(spec: CampaignSpec) -> CampaignSummary:
    """Run every attack (in a process pool when ``jobs > 1``) and aggregate.

    Reports stay in work-list order, so the summary does not depend on the
    number of workers.
    """
    items = [(spec, item) for item in spec.work]
    if spec.jobs == 1:
        reports = [_run_one(a) for a in items]
    else:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            reports = list(pool.map(_run_one, items))
    return summarize(reports, accuracy(spec.network, spec.validation))


_CSV_COLUMNS = ["attack_id", "target", "source", "success", "n_flip", "pa_acc", "iterations", "converged"]


def emit_report(summary: CampaignSummary, path, csv_path=None) -> None:
    with open(path, "w") as fh:
        json.dump(summary.to_dict(), fh, indent=2)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_CSV_COLUMNS)
            for i, r in enumerate(summary.attacks):
                src = "" if r.source_class is None else r.source_class
                w.writerow([i, r.target_class, src, int(r.success), r.n_flip, r.pa_acc, r.iterations, int(r.converged)])


def load_report(path) -> CampaignSummary:
    with open(path) as fh:
        return CampaignSummary.from_dict(json.load(fh))


def write_trace_csv(trace: Sequence[TraceRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "res_u1", "res_u2", "weighted_loss"])
        for t in trace:
            w.writerow([t.iter, repr(t.res_u1), repr(t.res_u2), repr(t.weighted_loss)])


# ---------------------------------------------------------- oracle instances


@dataclass
class OracleInstance:
    """A small binary program: start point, exact objective and ADMM callbacks."""

    kind: str
    b: np.ndarray
    objective: Callable[[np.ndarray], float]
    callbacks: LossCallbacks


def _zero(b_hat, q=None) -> float:
    return 0.0


def linear_instance(V: int, seed: int) -> OracleInstance:
    rng = np.random.default_rng(seed)
    b = rng.integers(0, 2, V).astype(np.uint8)
    c = rng.standard_normal(V)
    cb = LossCallbacks(
        lambda bh, q=None: float(c @ bh),
        _zero,
        lambda bh, q=None: c.copy(),
        lambda bh, q=None: np.zeros_like(bh),
    )
    return OracleInstance("linear", b, lambda v: float(c @ v), cb)


def quadratic_instance(V: int, seed: int) -> OracleInstance:
    """Convex quadratic ``0.5 * (v - m)^T A (v - m)`` with a random PSD ``A``."""
    rng = np.random.default_rng(seed)
    b = rng.integers(0, 2, V).astype(np.uint8)
    G = rng.standard_normal((V, V)) / np.sqrt(V)
    A = G @ G.T + 0.1 * np.eye(V)
    m = rng.uniform(-0.5, 1.5, V)

    def f(v):
        e = np.asarray(v, dtype=np.float64) - m
        return float(0.5 * e @ A @ e)

    cb = LossCallbacks(
        lambda bh, q=None: f(bh),
        _zero,
        lambda bh, q=None: A @ (bh - m),
        lambda bh, q=None: np.zeros_like(bh),
    )
    return OracleInstance("quadratic", b, f, cb)


def ssa_subset_instance(prob, V: int, lambda2: float) -> OracleInstance:
    """Free only the ``V`` bits of an SSA problem with the steepest initial objective gradient."""
    base = prob.b.astype(np.float64)
    g0 = prob.grad_l1(base) + lambda2 * prob.grad_l2(base)
    free = np.sort(np.argsort(-np.abs(g0), kind="stable")[:V])

    def full(sub):
        v = base.copy()
        v[free] = sub
        return v

    def f(sub):
        v = full(sub)
        return prob.l1(v) + lambda2 * prob.l2(v)

    cb = LossCallbacks(
        lambda s, q=None: prob.l1(full(s)),
        lambda s, q=None: prob.l2(full(s)),
        lambda s, q=None: prob.grad_l1(full(s))[free],
        lambda s, q=None: prob.grad_l2(full(s))[free],
    )
    return OracleInstance("ssa_subset", prob.b[free].copy(), f, cb)


def compare_with_oracle(inst: OracleInstance, cfg: AdmmConfig) -> dict:
    """Solve ``inst`` both ways; the gap is ADMM minus optimum (never negative)."""
    best_bits, best = brute_force_oracle(inst.b, cfg.k, inst.objective)
    res = admm_solve(inst.b, None, cfg, inst.callbacks)
    val = inst.objective(res.bits)
    feasible = bool(np.all((res.bits == 0) | (res.bits == 1)) and res.n_flip <= cfg.k)
    return {
        "oracle_value": best,
        "admm_value": val,
        "gap": val - best,
        "admm_feasible": feasible,
        "oracle_flips": np.flatnonzero(best_bits != inst.b).tolist(),
        "admm_flips": np.flatnonzero(res.bits != inst.b).tolist(),
        "converged": res.converged,
        "iterations": res.iterations,
    }
