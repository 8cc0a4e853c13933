"""lp-Box ADMM for binary programs with a Hamming-ball constraint.

Solves::

    min_{b_hat, q}  lambda1 * L1(b_hat, q) + lambda2 * L2(b_hat)
    s.t.            b_hat in {0, 1}^V,  d_H(b, b_hat) <= k

by writing the binary set as the intersection of the box [0, 1]^V and the
sphere ||b_hat - 1/2||^2 = V/4, splitting both off into auxiliary copies
``u1`` and ``u2``, turning the Hamming constraint into an equality with a
non-negative slack ``u3``, and running ADMM on the augmented Lagrangian.
The b_hat and q subproblems have no closed form and are advanced with a
few gradient steps each outer iteration.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .bitrep import hamming_distance

Array = np.ndarray


class NumericError(FloatingPointError):
    """An iterate or gradient became non-finite. ``trace`` holds progress so far."""

    def __init__(self, msg: str, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass(frozen=True)
class AdmmConfig:
    lambda1: float = 1.0
    lambda2: float = 100.0
    k: int = 5
    eta: float = 0.01
    zeta: float = 1.0
    zeta_late: float = 0.1
    zeta_switch_iter: int = 1000
    inner_steps: int = 5
    rho_init: tuple[float, float, float] = (1e-4, 1e-4, 1e-5)
    rho_growth: float = 1.01
    rho_max: tuple[float, float, float] = (50.0, 50.0, 5.0)
    max_iter: int = 2000
    min_iter: int = 100
    tol: float = 1e-4
    q_bounds: Optional[tuple[float, float]] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "rho_init", tuple(float(r) for r in self.rho_init))
        object.__setattr__(self, "rho_max", tuple(float(r) for r in self.rho_max))
        if self.q_bounds is not None:
            object.__setattr__(self, "q_bounds", tuple(float(v) for v in self.q_bounds))
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.k < 0 or int(self.k) != self.k:
            raise ValueError("k must be a non-negative integer")
        if min(self.eta, self.zeta, self.zeta_late, self.rho_growth, self.tol) <= 0:
            raise ValueError("step sizes, rho_growth and tol must be positive")
        if len(self.rho_init) != 3 or len(self.rho_max) != 3:
            raise ValueError("rho_init and rho_max must have three entries")
        if min(self.rho_init) <= 0 or min(self.rho_max) <= 0:
            raise ValueError("penalty factors must be positive")
        if self.inner_steps < 1 or self.max_iter < 1:
            raise ValueError("inner_steps and max_iter must be at least 1")
        if not 0 <= self.min_iter <= self.max_iter:
            raise ValueError("min_iter must lie in [0, max_iter]")

    @classmethod
    def ssa_defaults(cls, **overrides) -> "AdmmConfig":
        return replace(cls(), **overrides)

    @classmethod
    def tsa_defaults(cls, **overrides) -> "AdmmConfig":
        base = cls(
            lambda1=100.0,
            lambda2=1.0,
            eta=0.001,
            rho_max=(100.0, 100.0, 10.0),
            max_iter=3000,
        )
        return replace(base, **overrides)

    def zeta_at(self, it: int) -> float:
        return self.zeta if it < self.zeta_switch_iter else self.zeta_late

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rho_init"] = list(self.rho_init)
        d["rho_max"] = list(self.rho_max)
        d["q_bounds"] = None if self.q_bounds is None else list(self.q_bounds)
        return d


@dataclass
class LossCallbacks:
    """Differentiable effectiveness (L1) and stealthiness (L2) terms.

    Every callable takes ``(b_hat, q)``; ``q`` is ``None`` when there is no
    continuous side variable.
    """

    eval_l1: Callable[[Array, Optional[Array]], float]
    eval_l2: Callable[[Array, Optional[Array]], float]
    grad_l1_b: Callable[[Array, Optional[Array]], Array]
    grad_l2_b: Callable[[Array, Optional[Array]], Array]
    grad_l1_q: Optional[Callable[[Array, Optional[Array]], Array]] = None

    def objective(self, b_hat, q, lambda1: float, lambda2: float) -> float:
        return lambda1 * self.eval_l1(b_hat, q) + lambda2 * self.eval_l2(b_hat, q)


@dataclass
class SolverState:
    b_hat: Array
    u1: Array
    u2: Array
    u3: float
    z1: Array
    z2: Array
    z3: float
    rho: tuple[float, float, float]
    q: Optional[Array] = None
    iter: int = 0

    @classmethod
    def initial(cls, b: Array, q0: Optional[Array], cfg: AdmmConfig) -> "SolverState":
        b = np.asarray(b, dtype=np.float64)
        return cls(
            b_hat=b.copy(),
            u1=b.copy(),
            u2=b.copy(),
            u3=0.0,
            z1=np.zeros_like(b),
            z2=np.zeros_like(b),
            z3=0.0,
            rho=tuple(cfg.rho_init),
            q=None if q0 is None else np.array(q0, dtype=np.float64),
        )


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    res_u1: float
    res_u2: float
    weighted_loss: float


@dataclass
class SolveResult:
    bits: Array
    n_flip: int
    converged: bool
    iterations: int
    objective: float
    b_hat: Array
    q: Optional[Array] = None
    trace: list[TraceRecord] = field(default_factory=list)
    rho_history: Array = field(default_factory=lambda: np.zeros((0, 3)))


# ------------------------------------------------------------- projections


def project_box(a) -> Array:
    return np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)


def project_sphere(a) -> Array:
    """Projection onto ``{x : ||x - 1/2||^2 = n/4}``.

    At the exact centre the direction is undefined; we then step along the
    normalised all-ones vector, which lands on the all-ones corner.
    """
    return K.project_sphere(np.ascontiguousarray(a, dtype=np.float64))


def project_nonneg(a: float) -> float:
    return max(0.0, float(a))


# ---------------------------------------------------------------- updates


def update_auxiliaries(state: SolverState, b, cfg: AdmmConfig) -> SolverState:
    """u-step: all three projections read the same (pre-update) b_hat."""
    r1, r2, r3 = state.rho
    u1, u2, u3 = K.aux_update(
        state.b_hat, np.asarray(b, dtype=np.float64), state.z1, state.z2, float(state.z3), r1, r2, r3, float(cfg.k)
    )
    return replace(state, u1=u1, u2=u2, u3=float(u3))


def _loss_grad(state: SolverState, cfg: AdmmConfig, cb: LossCallbacks) -> Array:
    g = np.zeros_like(state.b_hat)
    if cfg.lambda1:
        g += cfg.lambda1 * np.asarray(cb.grad_l1_b(state.b_hat, state.q), dtype=np.float64)
    if cfg.lambda2:
        g += cfg.lambda2 * np.asarray(cb.grad_l2_b(state.b_hat, state.q), dtype=np.float64)
    return g


def grad_augmented_lagrangian_b(state: SolverState, b, cfg: AdmmConfig, cb: LossCallbacks) -> Array:
    lg = _loss_grad(state, cfg, cb)
    if not np.all(np.isfinite(lg)):
        raise NumericError("loss gradient is not finite")
    r1, r2, r3 = state.rho
    return K.lagrangian_grad(
        state.b_hat,
        np.asarray(b, dtype=np.float64),
        state.u1,
        state.u2,
        float(state.u3),
        state.z1,
        state.z2,
        float(state.z3),
        r1,
        r2,
        r3,
        float(cfg.k),
        lg,
    )


def augmented_lagrangian(state: SolverState, b, cfg: AdmmConfig, cb: LossCallbacks) -> float:
    """Value of the augmented Lagrangian (indicator terms omitted)."""
    b = np.asarray(b, dtype=np.float64)
    bh = state.b_hat
    r1, r2, r3 = state.rho
    e1 = bh - state.u1
    e2 = bh - state.u2
    c = float((b - bh) @ (b - bh)) - cfg.k + state.u3
    return (
        cb.objective(bh, state.q, cfg.lambda1, cfg.lambda2)
        + state.z1 @ e1
        + state.z2 @ e2
        + state.z3 * c
        + 0.5 * r1 * (e1 @ e1)
        + 0.5 * r2 * (e2 @ e2)
        + 0.5 * r3 * c * c
    )


def finalize_bits(b_hat, b, k: int) -> Array:
    """Round to the nearest binary point, then trim to at most ``k`` flips.

    Exact ties at 0.5 keep the original bit. When too many bits moved, the
    ``k`` with the largest deviation from ``b`` survive (lowest index wins
    ties).
    """
    b_hat = np.asarray(b_hat, dtype=np.float64)
    b = np.asarray(b).astype(np.uint8)
    out = np.where(b_hat > 0.5, 1, np.where(b_hat < 0.5, 0, b)).astype(np.uint8)
    flipped = np.flatnonzero(out != b)
    if flipped.size > k:
        dev = np.abs(b_hat[flipped] - b[flipped])
        keep = flipped[np.lexsort((flipped, -dev))[:k]]
        out = b.copy()
        out[keep] = 1 - b[keep]
    return out


def admm_solve(
    b,
    q0: Optional[Array],
    cfg: AdmmConfig,
    cb: LossCallbacks,
) -> SolveResult:
    b = np.asarray(b)
    if b.ndim != 1 or not np.all((b == 0) | (b == 1)):
        raise ValueError("b must be a binary vector")
    bf = b.astype(np.float64)
    state = SolverState.initial(bf, q0, cfg)
    use_q = state.q is not None and cb.grad_l1_q is not None
    lo, hi = cfg.q_bounds if cfg.q_bounds is not None else (-np.inf, np.inf)
    kf = float(cfg.k)
    rho_max = cfg.rho_max
    trace: list[TraceRecord] = []
    rhos = []
    converged = False

    for it in range(cfg.max_iter):
        state = update_auxiliaries(state, bf, cfg)
        zeta = cfg.zeta_at(it)
        for _ in range(cfg.inner_steps):
            g = grad_augmented_lagrangian_b(state, bf, cfg, cb)
            if use_q:
                # q moves one step per b_hat step, both from the same point
                gq = cfg.lambda1 * np.asarray(cb.grad_l1_q(state.b_hat, state.q))
                state.q = np.clip(state.q - zeta * gq, lo, hi)
            state.b_hat = state.b_hat - cfg.eta * g
        r1, r2, r3 = state.rho
        z1, z2, z3, res1, res2 = K.dual_update(
            state.b_hat, bf, state.u1, state.u2, state.u3, state.z1, state.z2, float(state.z3), r1, r2, r3, kf
        )
        state.z1, state.z2, state.z3 = z1, z2, float(z3)
        rhos.append(state.rho)
        state.rho = tuple(min(r * cfg.rho_growth, m) for r, m in zip(state.rho, rho_max))
        state.iter = it + 1
        wl = cb.objective(state.b_hat, state.q, cfg.lambda1, cfg.lambda2)
        trace.append(TraceRecord(it, float(res1), float(res2), float(wl)))
        if not (np.all(np.isfinite(state.b_hat)) and math.isfinite(wl)):
            raise NumericError(f"non-finite iterate at iteration {it}", trace)
        if res1 <= cfg.tol and res2 <= cfg.tol and state.iter >= cfg.min_iter:
            converged = True
            break

    bits = finalize_bits(state.b_hat, b, cfg.k)
    return SolveResult(
        bits=bits,
        n_flip=hamming_distance(bits, b),
        converged=converged,
        iterations=state.iter,
        objective=cb.objective(bits.astype(np.float64), state.q, cfg.lambda1, cfg.lambda2),
        b_hat=state.b_hat,
        q=state.q,
        trace=trace,
        rho_history=np.array(rhos).reshape(-1, 3),
    )


def trace_to_json(trace: list[TraceRecord]) -> str:
    return json.dumps([asdict(t) for t in trace])


def trace_from_json(text: str) -> list[TraceRecord]:
    return [TraceRecord(**d) for d in json.loads(text)]
