"""Single-sample (SSA) and triggered-samples (TSA) bit-flip attacks.

Both attacks only touch the quantized output layer. The hidden stack is
fixed, so features of clean samples are computed once per problem and
every loss/gradient evaluation afterwards is a small dense product.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from .bitrep import BitLayout, bits_to_weights, weight_gradient_vector
from .lpbox import AdmmConfig, LossCallbacks, SolveResult, TraceRecord, admm_solve
from .netcore import (
    Dataset,
    Network,
    TriggerSpec,
    accuracy,
    apply_trigger,
    forward_features,
    grad_loss_wrt_input,
    logits,
    predict,
)

log = logging.getLogger(__name__)

DEFAULT_DELTA = 10.0
# ImageNet-scale runs used lambda1 = 2e4 (ResNet) / 3e4 (VGG) for TSA; not used here.


class _LastCall:
    """One-slot memo keyed on array contents."""

    def __init__(self, fn):
        self.fn = fn
        self.key = None
        self.val = None

    def __call__(self, a):
        if self.key is None or self.key.shape != a.shape or not np.array_equal(self.key, a):
            self.val = self.fn(a)
            self.key = np.array(a, copy=True)
        return self.val


def compute_margin_tau(net: Network, x: np.ndarray, s: int) -> float:
    """Largest original-model logit over every class except ``s``."""
    if net.n_classes < 2:
        raise ValueError("margin needs at least two classes")
    z = logits(net, x)
    return float(np.max(np.delete(z, s)))


def flipped_coords(orig_bits: np.ndarray, new_bits: np.ndarray) -> list[dict]:
    rows, cols, bits = np.nonzero(np.asarray(orig_bits) != np.asarray(new_bits))
    return [{"row": int(r), "col": int(c), "bit": int(p)} for r, c, p in zip(rows, cols, bits)]


def attack_success_rate(net: Network, X: np.ndarray, target: int) -> float:
    """Percent of inputs classified as ``target``; 100 for an empty set."""
    X = np.atleast_2d(X)
    if X.shape[0] == 0:
        return 100.0
    return 100.0 * float(np.mean(predict(net, X) == target))


# --------------------------------------------------------------------- SSA


class SsaProblem:
    """Rows ``s`` and ``t`` of the output layer, flattened to V = 2CQ bits."""

    def __init__(self, net: Network, x, source: int, target: int, aux: Dataset, delta: float = DEFAULT_DELTA):
        Kc, C = net.output.shape
        if source == target:
            raise ValueError("source and target class must differ")
        if not (0 <= source < Kc and 0 <= target < Kc):
            raise ValueError("class index out of range")
        if delta <= 0:
            raise ValueError("delta must be positive")
        self.net = net
        self.x = np.asarray(x, dtype=np.float64)
        self.source, self.target = int(source), int(target)
        self.delta = float(delta)
        self.layout = BitLayout((self.source, self.target), C, net.Q)
        self.b = self.layout.flatten(net.output.bits)
        self.gv = weight_gradient_vector(net.Q, net.output.delta)
        self.g = forward_features(net, self.x)
        self.tau = compute_margin_tau(net, self.x, self.source)
        self.base_weights = net.output_weights()
        self.bias = np.asarray(net.out_bias)
        self.rows = np.array([self.source, self.target], dtype=np.int64)
        self.aux_feats = np.ascontiguousarray(forward_features(net, aux.X))
        self.aux_labels = np.ascontiguousarray(aux.y, dtype=np.int64)
        self._ce = _LastCall(self._ce_eval)

    @property
    def size(self) -> int:
        return self.layout.size

    def row_weights(self, b_hat) -> np.ndarray:
        return bits_to_weights(self.layout.unflatten(b_hat), self.net.output.delta)

    def full_weights(self, b_hat) -> np.ndarray:
        W = self.base_weights.copy()
        W[self.rows] = self.row_weights(b_hat)
        return W

    def source_target_logits(self, b_hat) -> tuple[float, float]:
        p = self.row_weights(b_hat) @ self.g + self.bias[self.rows]
        return float(p[0]), float(p[1])

    def _ce_eval(self, b_hat):
        return K.ce_rows_grad(self.aux_feats, self.full_weights(b_hat), self.bias, self.aux_labels, self.rows)

    def l1(self, b_hat, q=None) -> float:
        p_s, p_t = self.source_target_logits(b_hat)
        return max(self.tau - p_t + self.delta, 0.0) + max(p_s - self.tau + self.delta, 0.0)

    def l2(self, b_hat, q=None) -> float:
        return float(self._ce(np.asarray(b_hat, dtype=np.float64))[0])

    def grad_l1(self, b_hat, q=None) -> np.ndarray:
        p_s, p_t = self.source_target_logits(b_hat)
        dp = np.outer(self.g, self.gv)
        out = np.zeros((2,) + dp.shape)
        if p_s - self.tau + self.delta > 0:
            out[0] = dp
        if self.tau - p_t + self.delta > 0:
            out[1] = -dp
        return out.reshape(-1)

    def grad_l2(self, b_hat, q=None) -> np.ndarray:
        _, dW = self._ce(np.asarray(b_hat, dtype=np.float64))
        return (dW[:, :, None] * self.gv).reshape(-1)

    def callbacks(self) -> LossCallbacks:
        return LossCallbacks(self.l1, self.l2, self.grad_l1, self.grad_l2)

    def flipped_network(self, bits) -> Network:
        return self.net.with_output_bits(self.layout.scatter(self.net.output.bits, bits))


def ssa_effectiveness_loss(prob: SsaProblem, b_hat) -> float:
    return prob.l1(b_hat)


def ssa_gradients(prob: SsaProblem, b_hat) -> tuple[np.ndarray, np.ndarray]:
    return prob.grad_l1(b_hat), prob.grad_l2(b_hat)


def stealthiness_loss(net: Network, aux: Dataset, b_hat, layout: BitLayout) -> float:
    """Summed cross entropy on ``aux`` with the covered rows replaced by ``b_hat``."""
    bits = layout.scatter(net.output.bits.astype(np.float64), np.asarray(b_hat, dtype=np.float64))
    W = bits_to_weights(bits, net.output.delta)
    loss, _ = K.ce_rows_grad(
        np.ascontiguousarray(forward_features(net, aux.X)),
        W,
        np.asarray(net.out_bias),
        np.ascontiguousarray(aux.y, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
    )
    return float(loss)


# --------------------------------------------------------------------- TSA


class TsaProblem:
    """All K rows of the output layer (V = KCQ) plus a trigger pattern."""

    def __init__(self, net: Network, target: int, mask, aux: Dataset, lo: float = 0.0, hi: float = 1.0):
        Kc, C = net.output.shape
        if not 0 <= target < Kc:
            raise ValueError("target class out of range")
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (net.input_dim,):
            raise ValueError("mask length must equal the input dimension")
        if not np.any(mask > 0):
            raise ValueError("trigger mask is empty")
        if len(aux) == 0:
            raise ValueError("auxiliary set is empty")
        self.net = net
        self.target = int(target)
        self.mask = mask
        self.lo, self.hi = float(lo), float(hi)
        self.layout = BitLayout(tuple(range(Kc)), C, net.Q)
        self.b = self.layout.flatten(net.output.bits)
        self.gv = weight_gradient_vector(net.Q, net.output.delta)
        self.bias = np.asarray(net.out_bias)
        self.X = np.asarray(aux.X)
        self.labels = np.ascontiguousarray(aux.y, dtype=np.int64)
        self.target_labels = np.full(len(aux), self.target, dtype=np.int64)
        self.all_rows = np.arange(Kc, dtype=np.int64)
        self.clean_feats = np.ascontiguousarray(forward_features(net, self.X))
        self._trig_feats = _LastCall(lambda q: np.ascontiguousarray(forward_features(net, self.triggered(q))))
        self._l1 = _LastCall(self._l1_eval)
        self._l2 = _LastCall(self._l2_eval)

    @property
    def size(self) -> int:
        return self.layout.size

    def _raw(self, q) -> np.ndarray:
        return (1.0 - self.mask) * self.X + self.mask * np.asarray(q, dtype=np.float64)

    def triggered(self, q) -> np.ndarray:
        return np.clip(self._raw(q), self.lo, self.hi)

    def weights(self, b_hat) -> np.ndarray:
        return bits_to_weights(self.layout.unflatten(b_hat), self.net.output.delta)

    def _l1_eval(self, bq):
        b_hat, q = bq[: self.size], bq[self.size :]
        return K.ce_rows_grad(self._trig_feats(q), self.weights(b_hat), self.bias, self.target_labels, self.all_rows)

    def _l2_eval(self, b_hat):
        return K.ce_rows_grad(self.clean_feats, self.weights(b_hat), self.bias, self.labels, self.all_rows)

    def l1(self, b_hat, q) -> float:
        return float(self._l1(np.concatenate([b_hat, q]))[0])

    def l2(self, b_hat, q=None) -> float:
        return float(self._l2(np.asarray(b_hat, dtype=np.float64))[0])

    def grad_l1_b(self, b_hat, q) -> np.ndarray:
        _, dW = self._l1(np.concatenate([b_hat, q]))
        return (dW[:, :, None] * self.gv).reshape(-1)

    def grad_l2_b(self, b_hat, q=None) -> np.ndarray:
        _, dW = self._l2(np.asarray(b_hat, dtype=np.float64))
        return (dW[:, :, None] * self.gv).reshape(-1)

    def grad_l1_q(self, b_hat, q) -> np.ndarray:
        raw = self._raw(q)
        passthrough = (raw >= self.lo) & (raw <= self.hi)
        gx = grad_loss_wrt_input(self.net, np.clip(raw, self.lo, self.hi), self.target_labels, self.weights(b_hat))
        return np.sum(gx * passthrough, axis=0) * self.mask

    def callbacks(self) -> LossCallbacks:
        return LossCallbacks(self.l1, self.l2, self.grad_l1_b, self.grad_l2_b, self.grad_l1_q)

    def flipped_network(self, bits) -> Network:
        return self.net.with_output_bits(self.layout.unflatten(np.asarray(bits)).astype(np.uint8))


def tsa_effectiveness_loss(prob: TsaProblem, b_hat, q) -> float:
    return prob.l1(b_hat, q)


def tsa_gradients(prob: TsaProblem, b_hat, q) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return prob.grad_l1_b(b_hat, q), prob.grad_l2_b(b_hat, q), prob.grad_l1_q(b_hat, q)


# ------------------------------------------------------------------ search


@dataclass(frozen=True)
class SearchPolicy:
    """Outer search over the bit budget ``k`` and the tunable trade-off weight.

    For SSA the tuned weight is lambda2 (halved after each failure); for TSA
    it is lambda1 and only ``k`` is searched. ``success_asr`` is the
    percentage an attempt has to reach to count as a success.
    """

    k_init: int = 5
    k_searches: int = 4
    lambda_init: float = 100.0
    lambda_searches: int = 8
    success_asr: float = 100.0

    def __post_init__(self):
        if self.k_searches < 1 or self.lambda_searches < 1:
            raise ValueError("search counts must be at least 1")
        if self.k_init < 0:
            raise ValueError("k_init must be non-negative")

    @classmethod
    def tsa_defaults(cls, **kw) -> "SearchPolicy":
        return replace(cls(k_init=5, k_searches=4, lambda_init=100.0, lambda_searches=1, success_asr=98.0), **kw)

    def k_schedule(self) -> list[int]:
        return [self.k_init * (2**i) for i in range(self.k_searches)]

    def lambda_schedule(self) -> list[float]:
        return [self.lambda_init / (2**i) for i in range(self.lambda_searches)]


@dataclass
class AttackReport:
    attack_type: str
    target_class: int
    success: bool
    n_flip: int
    flipped_bits: list[dict]
    asr: float
    pa_acc: Optional[float]
    converged: bool
    iterations: int
    lambda_used: float
    k_used: int
    source_class: Optional[int] = None
    acc: Optional[float] = None
    solves: int = 0
    aux_asr: Optional[float] = None
    trigger: Optional[dict] = None
    trace: list[TraceRecord] = field(default_factory=list, repr=False, compare=False)

    def to_dict(self, include_trace: bool = False) -> dict:
        d = {
            "attack_type": self.attack_type,
            "target_class": self.target_class,
            "source_class": self.source_class,
            "success": self.success,
            "n_flip": self.n_flip,
            "flipped_bits": [dict(fb) for fb in self.flipped_bits],
            "asr": self.asr,
            "pa_acc": self.pa_acc,
            "acc": self.acc,
            "converged": self.converged,
            "iterations": self.iterations,
            "lambda_used": self.lambda_used,
            "k_used": self.k_used,
            "solves": self.solves,
            "aux_asr": self.aux_asr,
            "trigger": self.trigger,
        }
        if include_trace:
            d["trace"] = [t.__dict__.copy() for t in self.trace]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        d = dict(d)
        trace = [TraceRecord(**t) for t in d.pop("trace", [])]
        return cls(**d, trace=trace)


def _clean_acc(net: Network, validation: Optional[Dataset]) -> Optional[float]:
    return None if validation is None or len(validation) == 0 else accuracy(net, validation)


def run_ssa(
    net: Network,
    x,
    s: int,
    t: int,
    aux: Dataset,
    policy: SearchPolicy = SearchPolicy(),
    cfg: Optional[AdmmConfig] = None,
    delta: float = DEFAULT_DELTA,
    validation: Optional[Dataset] = None,
    delta_escalation: Optional[float] = None,
) -> AttackReport:
    """Misclassify the single input ``x`` (true class ``s``) as ``t``.

    lambda1 stays at 1. For each ``k`` in ``policy.k_schedule()`` lambda2
    is tried from ``policy.lambda_init`` down, halving after each failure.
    Success means the binarised, flipped model predicts ``t`` on ``x``.
    If ``delta_escalation`` is given and the whole search fails, it is
    repeated once with that slack.
    """
    cfg = cfg or AdmmConfig.ssa_defaults()
    x = np.asarray(x, dtype=np.float64)
    acc = _clean_acc(net, validation)
    deltas = [delta] + ([delta_escalation] if delta_escalation is not None else [])
    solves = 0
    last = None
    for dlt in deltas:
        prob = SsaProblem(net, x, s, t, aux, dlt)
        for k in policy.k_schedule():
            for lam2 in policy.lambda_schedule():
                c = replace(cfg, lambda1=1.0, lambda2=lam2, k=k)
                res = admm_solve(prob.b, None, c, prob.callbacks())
                solves += 1
                flipped = prob.flipped_network(res.bits)
                ok = int(predict(flipped, x)) == t
                last = (prob, res, flipped, lam2, k)
                log.debug("ssa s=%d t=%d k=%d lam2=%g flips=%d ok=%s", s, t, k, lam2, res.n_flip, ok)
                if ok:
                    return _ssa_report(net, prob, res, flipped, lam2, k, True, solves, acc, validation)
    prob, res, flipped, lam2, k = last
    return _ssa_report(net, prob, res, flipped, lam2, k, False, solves, acc, validation)


def _ssa_report(net, prob, res: SolveResult, flipped, lam2, k, ok, solves, acc, validation) -> AttackReport:
    return AttackReport(
        attack_type="ssa",
        target_class=prob.target,
        source_class=prob.source,
        success=ok,
        n_flip=res.n_flip,
        flipped_bits=flipped_coords(net.output.bits, flipped.output.bits),
        asr=attack_success_rate(flipped, prob.x, prob.target),
        pa_acc=_clean_acc(flipped, validation),
        acc=acc,
        converged=res.converged,
        iterations=res.iterations,
        lambda_used=float(lam2),
        k_used=int(k),
        solves=solves,
        trace=res.trace,
    )


def run_tsa(
    net: Network,
    t: int,
    mask,
    aux: Dataset,
    policy: Optional[SearchPolicy] = None,
    cfg: Optional[AdmmConfig] = None,
    seed: int = 0,
    validation: Optional[Dataset] = None,
    input_range: tuple[float, float] = (0.0, 1.0),
    mask_spec: Optional[dict] = None,
) -> AttackReport:
    """Learn a trigger pattern and bit flips sending triggered inputs to ``t``.

    lambda2 stays at 1 and lambda1 is ``policy.lambda_init``. ``k`` doubles
    until the auxiliary-set ASR reaches ``policy.success_asr``. The pattern
    starts uniform over ``input_range`` from ``seed`` for every attempt.
    """
    policy = policy or SearchPolicy.tsa_defaults()
    cfg = cfg or AdmmConfig.tsa_defaults()
    lo, hi = input_range
    cfg = replace(cfg, q_bounds=(lo, hi))
    prob = TsaProblem(net, t, mask, aux, lo, hi)
    acc = _clean_acc(net, validation)
    lam1 = policy.lambda_init
    solves = 0
    for k in policy.k_schedule():
        q0 = np.random.default_rng(seed).uniform(lo, hi, size=net.input_dim)
        c = replace(cfg, lambda1=lam1, lambda2=1.0, k=k)
        res = admm_solve(prob.b, q0, c, prob.callbacks())
        solves += 1
        flipped = prob.flipped_network(res.bits)
        trig = TriggerSpec(prob.mask, res.q)
        aux_asr = attack_success_rate(flipped, apply_trigger(aux.X, trig, lo, hi), t)
        ok = aux_asr >= policy.success_asr
        log.debug("tsa t=%d k=%d flips=%d aux_asr=%.2f", t, k, res.n_flip, aux_asr)
        if ok:
            break
    if validation is not None and len(validation):
        held = validation.X[validation.y != t]
        held = validation.X if held.shape[0] == 0 else held
        asr = attack_success_rate(flipped, apply_trigger(held, trig, lo, hi), t)
    else:
        asr = aux_asr
    spec = dict(mask_spec) if mask_spec else {"indices": np.flatnonzero(prob.mask).tolist()}
    return AttackReport(
        attack_type="tsa",
        target_class=int(t),
        success=bool(ok),
        n_flip=res.n_flip,
        flipped_bits=flipped_coords(net.output.bits, flipped.output.bits),
        asr=asr,
        pa_acc=_clean_acc(flipped, validation),
        acc=acc,
        converged=res.converged,
        iterations=res.iterations,
        lambda_used=float(lam1),
        k_used=int(k),
        solves=solves,
        aux_asr=aux_asr,
        trigger={"mask_spec": spec, "pattern": [float(v) for v in res.q]},
        trace=res.trace,
    )
