import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bitflip.attacks import (
    AttackReport,
    SearchPolicy,
    SsaProblem,
    TsaProblem,
    attack_success_rate,
    compute_margin_tau,
    run_ssa,
    run_tsa,
    ssa_effectiveness_loss,
    ssa_gradients,
    stealthiness_loss,
    tsa_effectiveness_loss,
    tsa_gradients,
)
from bitflip.bitrep import BitLayout, QuantLayer, quantize_layer
from bitflip.lpbox import AdmmConfig
from bitflip.netcore import Dataset, DenseLayer, Network, logits, predict
from conftest import random_dataset, random_network
from oracles import central_difference, cross_entropy, rel_error


def _bias_only_net(bias, C=2, Q=4):
    """Zero output weights, so the logits are exactly ``bias``."""
    K = len(bias)
    return Network((), QuantLayer(np.zeros((K, C), dtype=np.int64), Q, 1.0), np.asarray(bias, float))


# ------------------------------------------------------------------ margin


@pytest.mark.parametrize("bias, s, tau", [([5, 3, 2], 0, 3.0), ([7, 0], 1, 7.0), ([1.5] * 4, 2, 1.5)])
def test_margin_tau_examples(bias, s, tau):
    assert compute_margin_tau(_bias_only_net(bias), np.zeros(2), s) == tau


# ------------------------------------------------------------- SSA losses


def _ssa_instance(p_s, p_t, tau_other, delta):
    """Rows (s=0, t=1) decode to zero; logits come from the bias."""
    net = _bias_only_net([p_s, p_t, tau_other])
    aux = Dataset(np.zeros((1, 2)), [2], 3, "aux")
    prob = SsaProblem(net, np.zeros(2), 0, 1, aux, delta)
    return prob


def test_ssa_l1_example():
    # tau = max(3, 3) over classes != s
    prob = _ssa_instance(5.0, 3.0, 3.0, 1.0)
    assert prob.tau == 3.0
    assert ssa_effectiveness_loss(prob, prob.b.astype(float)) == pytest.approx(4.0)


def test_ssa_l1_zero_at_both_boundaries():
    prob = _ssa_instance(2.0, 4.0, 0.0, 1.0)
    prob.tau = 3.0  # p_t = tau + delta, p_s = tau - delta
    assert prob.l1(prob.b.astype(float)) == 0.0


def test_ssa_l1_inactive_hinges_have_zero_gradient():
    prob = _ssa_instance(-100.0, 100.0, 0.0, 10.0)
    prob.tau = 0.0
    b = prob.b.astype(float)
    assert prob.l1(b) == 0.0
    np.testing.assert_array_equal(prob.grad_l1(b), 0.0)


def test_stealthiness_examples():
    layout = BitLayout((0, 1), 2, 4)
    # perfectly confident correct predictions
    net = _bias_only_net([1e4, 0.0, 0.0])
    aux = Dataset(np.zeros((3, 2)), [0, 0, 0], 3)
    b = layout.flatten(net.output.bits).astype(float)
    assert stealthiness_loss(net, aux, b, layout) == pytest.approx(0.0, abs=1e-12)
    net = _bias_only_net([0.0, 0.0, 0.0])
    aux = Dataset(np.zeros((5, 2)), [0, 1, 2, 0, 1], 3)
    assert stealthiness_loss(net, aux, b, layout) == pytest.approx(5 * np.log(3))
    net = _bias_only_net([0.0, 0.0], C=2)
    aux = Dataset(np.zeros((1, 2)), [1], 2)
    assert stealthiness_loss(net, aux, b, layout) == pytest.approx(np.log(2))


def _random_ssa(rng, n_aux=12):
    net = random_network(rng, d=3, widths=(5, 4), K=4, Q=5)
    aux = random_dataset(rng, n_aux, 3, 4)
    s, t = rng.choice(4, 2, replace=False)
    return SsaProblem(net, rng.standard_normal(3), int(s), int(t), aux, float(rng.uniform(0.1, 3)))


def test_ssa_l2_matches_loop_oracle(rng):
    prob = _random_ssa(rng)
    b_hat = rng.uniform(0, 1, prob.size)
    W = prob.full_weights(b_hat)
    feats = prob.aux_feats
    ref = sum(cross_entropy(list(W @ feats[i] + prob.bias), int(prob.aux_labels[i])) for i in range(len(feats)))
    assert prob.l2(b_hat) == pytest.approx(ref, rel=1e-12)
    assert stealthiness_loss(prob.net, Dataset(np.zeros((0, 3)), [], 4), b_hat, prob.layout) == 0.0


def test_ssa_gradients_match_finite_differences():
    rng = np.random.default_rng(21)
    checked = 0
    while checked < 8:
        prob = _random_ssa(rng)
        b_hat = rng.uniform(0, 1, prob.size)
        p_s, p_t = prob.source_target_logits(b_hat)
        hinges = (p_s - prob.tau + prob.delta, prob.tau - p_t + prob.delta)
        if min(abs(h) for h in hinges) < 1e-2:
            continue  # too close to a kink for central differences
        g1, g2 = ssa_gradients(prob, b_hat)
        assert rel_error(g1, central_difference(prob.l1, b_hat, 1e-6)) <= 1e-5
        assert rel_error(g2, central_difference(prob.l2, b_hat, 1e-5)) <= 1e-5
        checked += 1


def test_ssa_l2_gradient_vanishes_for_confident_other_class():
    # one aux sample, true class 2 predicted with probability 1
    net = _bias_only_net([0.0, 0.0, 1e4])
    prob = SsaProblem(net, np.zeros(2), 0, 1, Dataset(np.zeros((1, 2)) + 1, [2], 3), 1.0)
    np.testing.assert_allclose(prob.grad_l2(prob.b.astype(float)), 0.0, atol=1e-12)


def test_ssa_problem_validation(rng):
    net = random_network(rng, K=3)
    aux = random_dataset(rng, 4, 3, 3)
    with pytest.raises(ValueError):
        SsaProblem(net, np.zeros(3), 1, 1, aux)
    with pytest.raises(ValueError):
        SsaProblem(net, np.zeros(3), 0, 5, aux)
    with pytest.raises(ValueError):
        SsaProblem(net, np.zeros(3), 0, 1, aux, delta=0)


@given(st.integers(0, 2**31 - 1))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    prob = _random_ssa(rng, 5)
    b_hat = rng.uniform(-0.5, 1.5, prob.size)
    assert prob.l1(b_hat) >= 0 and prob.l2(b_hat) >= 0


# ------------------------------------------------------------- TSA losses


def _random_tsa(rng, n=10, d=4):
    net = random_network(rng, d=d, widths=(6, 5), K=3, Q=4)
    aux = random_dataset(rng, n, d, 3, lo=0.0, hi=1.0)
    mask = np.zeros(d)
    mask[rng.choice(d, 2, replace=False)] = 1.0
    return TsaProblem(net, int(rng.integers(3)), mask, aux), aux


def test_tsa_uniform_and_perfect_losses():
    net = Network((), QuantLayer(np.zeros((3, 2), dtype=np.int64), 4, 1.0), np.zeros(3))
    aux = Dataset(np.full((4, 2), 0.5), [0, 1, 2, 0], 3, "aux", (0.0, 1.0))
    prob = TsaProblem(net, 1, np.array([1.0, 0.0]), aux)
    b = prob.b.astype(float)
    assert tsa_effectiveness_loss(prob, b, np.array([0.2, 0.2])) == pytest.approx(4 * np.log(3))
    perfect = Network((), QuantLayer(np.zeros((3, 2), dtype=np.int64), 4, 1.0), np.array([0.0, 1e4, 0.0]))
    prob = TsaProblem(perfect, 1, np.array([1.0, 0.0]), aux)
    q = np.array([0.3, 0.3])
    assert tsa_effectiveness_loss(prob, b, q) == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(prob.grad_l1_b(b, q), 0.0, atol=1e-12)


def test_tsa_loss_ignores_masked_coordinates(rng):
    prob, aux = _random_tsa(rng)
    b = rng.uniform(0, 1, prob.size)
    q = rng.uniform(0, 1, aux.input_dim)
    before = prob.l1(b, q)
    X = aux.X.copy()
    X[:, prob.mask == 1] = rng.uniform(0, 1, (len(aux), int(prob.mask.sum())))
    prob2 = TsaProblem(prob.net, prob.target, prob.mask, Dataset(X, aux.y, 3, "aux", (0.0, 1.0)))
    assert prob2.l1(b, q) == pytest.approx(before, rel=1e-12)


def test_tsa_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(6):
        prob, aux = _random_tsa(rng)
        b = rng.uniform(0, 1, prob.size)
        q = rng.uniform(0.1, 0.9, aux.input_dim)  # interior, away from the clamp
        gb1, gb2, gq = tsa_gradients(prob, b, q)
        assert rel_error(gb1, central_difference(lambda v: prob.l1(v, q), b, 1e-5)) <= 1e-5
        assert rel_error(gb2, central_difference(prob.l2, b, 1e-5)) <= 1e-5
        assert rel_error(gq, central_difference(lambda v: prob.l1(b, v), q, 1e-6)) <= 1e-5


def test_tsa_q_gradient_zero_mask_coordinates(rng):
    prob, aux = _random_tsa(rng)
    gq = prob.grad_l1_q(rng.uniform(0, 1, prob.size), rng.uniform(0, 1, aux.input_dim))
    np.testing.assert_array_equal(gq[prob.mask == 0], 0.0)


def test_tsa_problem_validation(rng):
    net = random_network(rng, d=4)
    aux = random_dataset(rng, 4, 4, 3, lo=0.0, hi=1.0)
    with pytest.raises(ValueError):
        TsaProblem(net, 0, np.zeros(4), aux)
    with pytest.raises(ValueError):
        TsaProblem(net, 0, np.ones(3), aux)
    with pytest.raises(ValueError):
        TsaProblem(net, 3, np.ones(4), aux)


# ------------------------------------------------------------------ search


def test_search_defaults_and_schedules():
    p = SearchPolicy()
    assert (p.k_init, p.lambda_init) == (5, 100.0)
    assert p.k_schedule() == [5, 10, 20, 40]
    assert p.lambda_schedule() == [100.0 / 2**i for i in range(8)]
    assert len(p.k_schedule()) * len(p.lambda_schedule()) == 32
    t = SearchPolicy.tsa_defaults()
    assert (t.k_schedule(), t.lambda_init, t.success_asr) == ([5, 10, 20, 40], 100.0, 98.0)
    assert AdmmConfig.tsa_defaults().lambda1 == 100.0
    with pytest.raises(ValueError):
        SearchPolicy(k_searches=0)


def test_ssa_exhaustion_uses_every_solve(rng):
    # target row can never win: its bias is hopelessly low and the budget is tiny
    net = random_network(rng, K=3, Q=2)
    net = Network(net.hidden, net.output, np.array([0.0, -1e6, 0.0]))
    aux = random_dataset(rng, 5, 3, 3)
    policy = SearchPolicy(k_init=1, k_searches=2, lambda_init=1.0, lambda_searches=3)
    cfg = AdmmConfig.ssa_defaults(max_iter=120)
    rep = run_ssa(net, rng.standard_normal(3), 0, 1, aux, policy, cfg)
    assert not rep.success
    assert rep.solves == 6
    assert rep.n_flip <= rep.k_used == 2


def test_success_rate():
    net = _bias_only_net([0.0, 1.0])
    assert attack_success_rate(net, np.zeros((4, 2)), 1) == 100.0
    assert attack_success_rate(net, np.zeros((4, 2)), 0) == 0.0
    assert attack_success_rate(net, np.zeros((0, 2)), 0) == 100.0


def test_ssa_blob_demo(blob_splits, blob_model):
    _, aux, val = blob_splits
    net = blob_model
    pred = predict(net, val.X)
    idx = np.flatnonzero((val.y == 3) & (pred == 3))[0]
    x = val.X[idx]
    cfg = AdmmConfig.ssa_defaults(eta=1e-3)
    rep = run_ssa(net, x, 3, 1, aux, SearchPolicy(lambda_init=1.0), cfg, validation=val)
    assert rep.success
    assert 0 < rep.n_flip <= rep.k_used
    assert rep.asr == 100.0
    assert {fb["row"] for fb in rep.flipped_bits} <= {1, 3}
    # replaying the reported flips reproduces the prediction
    bits = net.output.bits.copy()
    for fb in rep.flipped_bits:
        bits[fb["row"], fb["col"], fb["bit"]] ^= 1
    assert int(np.argmax(logits(net.with_output_bits(bits), x))) == 1
    assert AttackReport.from_dict(rep.to_dict(include_trace=True)) == rep


def test_tsa_degenerate_single_class():
    net = Network((DenseLayer(np.eye(2), np.zeros(2)),), quantize_layer(np.ones((1, 2)), 4))
    aux = Dataset(np.full((3, 2), 0.5), [0, 0, 0], 1, "aux", (0.0, 1.0))
    rep = run_tsa(net, 0, np.ones(2), aux, cfg=AdmmConfig.tsa_defaults(max_iter=150))
    assert rep.success and rep.k_used == 5 and rep.aux_asr == 100.0
    assert rep.solves == 1


def test_tsa_patch_demo(patch_splits, patch_model):
    from bitflip.datagen import patch_mask

    _, aux, val = patch_splits
    cfg = AdmmConfig.tsa_defaults(eta=1e-4)
    policy = SearchPolicy.tsa_defaults(lambda_init=5.0)
    rep = run_tsa(patch_model, 0, patch_mask(8, 2), aux, policy, cfg, seed=0, validation=val)
    assert rep.success
    assert rep.aux_asr >= 98.0
    assert rep.n_flip <= rep.k_used
    assert len(rep.trigger["pattern"]) == 64
    assert 0.0 <= rep.asr <= 100.0
