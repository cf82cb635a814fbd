import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptmoe.moe import (
    TOP1, TOP2, Expert, GatingNetwork, LoadBalanceStats, RoutingPolicy, combine, expert_forward,
    gate_probabilities, load_balance_loss, make_stats, moe_forward, route, select_experts,
)
from adaptmoe.tensor import ContractError, DimensionError, Tensor, finite_diff_check, parameter

ADAPT = RoutingPolicy("adaptive", 0.1)


def random_layer(hidden=6, inter=10, n_experts=4, seed=0):
    rng = np.random.default_rng(seed)
    experts = [Expert.init(hidden, inter, rng) for _ in range(n_experts)]
    gate = GatingNetwork(parameter(rng.normal(size=(hidden, n_experts))))
    return experts, gate, rng


def prob_vectors(n, e, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, e)) * rng.uniform(0.1, 3.0, size=(n, 1))
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


# -- experts and gate --------------------------------------------------------

def test_expert_zero_input():
    experts, _, _ = random_layer()
    assert not expert_forward(experts[0], Tensor(np.zeros((3, 6)))).data.any()


def test_expert_identity_weights():
    e = Expert(parameter(np.eye(3)), parameter(np.eye(3)))
    x = np.array([[0.5, 0.0, 2.0], [1.0, 3.0, 0.25]])
    np.testing.assert_array_equal(expert_forward(e, Tensor(x)).data, x)


def test_expert_matches_naive_loops():
    experts, _, rng = random_layer(hidden=4, inter=5)
    e = experts[1]
    x = rng.normal(size=(2, 4))
    w0, w1 = e.w0.data, e.w1.data
    expected = np.zeros((2, 4))
    for t in range(2):
        hidden = [max(0.0, sum(x[t, i] * w0[i, j] for i in range(4))) for j in range(5)]
        for k in range(4):
            expected[t, k] = sum(hidden[j] * w1[j, k] for j in range(5))
    np.testing.assert_allclose(expert_forward(e, Tensor(x)).data, expected, rtol=1e-12, atol=1e-14)


def test_expert_shape_error():
    experts, _, _ = random_layer()
    with pytest.raises(DimensionError):
        expert_forward(experts[0], Tensor(np.ones((2, 5))))


def test_gate_zero_weights_uniform():
    gate = GatingNetwork(parameter(np.zeros((3, 5))))
    probs = gate_probabilities(gate, Tensor(np.random.default_rng(0).normal(size=(4, 3)))).data
    np.testing.assert_allclose(probs, np.full((4, 5), 0.2), rtol=0, atol=1e-15)


def test_gate_dominant_logit():
    wg = np.zeros((2, 4))
    wg[0, 2] = 20.0
    probs = gate_probabilities(GatingNetwork(parameter(wg)), Tensor([[1.0, 0.0]])).data[0]
    # closed form: e^20 / (e^20 + 3)
    assert probs[2] == pytest.approx(math.exp(20) / (math.exp(20) + 3), rel=1e-12)
    assert probs[2] > 0.999


def test_gate_rows_sum_to_one():
    _, gate, rng = random_layer()
    probs = gate_probabilities(gate, Tensor(rng.normal(size=(20, 6)) * 5)).data
    assert np.abs(probs.sum(axis=1) - 1).max() <= 1e-12


# -- select_experts ----------------------------------------------------------

def test_adaptive_confident_token_goes_top1():
    d = select_experts([0.70, 0.10, 0.10, 0.10], ADAPT)
    assert d.expert_ids == (0,) and d.weights == (1.0,) and not d.is_top2


def test_adaptive_close_call_goes_top2():
    d = select_experts([0.45, 0.41, 0.07, 0.07], ADAPT)
    # gap 0.04 / 0.86 = 0.0465 <= 0.1
    assert d.expert_ids == (0, 1) and d.is_top2
    assert d.weights[0] == pytest.approx(0.45 / 0.86, abs=1e-15)
    assert d.weights[1] == pytest.approx(0.41 / 0.86, abs=1e-15)
    assert round(d.weights[0], 4) == 0.5233 and round(d.weights[1], 4) == 0.4767


def test_threshold_is_inclusive():
    # (0.625 - 0.375) / 1.0 is exactly 0.25
    d = select_experts([0.625, 0.375], RoutingPolicy("adaptive", 0.25))
    assert d.is_top2
    d = select_experts([0.625, 0.375], RoutingPolicy("adaptive", 0.2499))
    assert not d.is_top2


def test_raw_gap_mode():
    probs = [0.5, 0.3, 0.2]
    assert not select_experts(probs, RoutingPolicy("adaptive", 0.19, gap="raw")).is_top2
    assert select_experts(probs, RoutingPolicy("adaptive", 0.21, gap="raw")).is_top2


def test_top1_raw_weight_option():
    d = select_experts([0.7, 0.2, 0.1], TOP1, top1_weight="raw")
    assert d.weights == (0.7,)


def test_ties_break_to_lowest_index():
    d = select_experts([0.1, 0.3, 0.3, 0.3], TOP2)
    assert d.expert_ids == (1, 2)
    assert select_experts([0.25] * 4, TOP1).expert_ids == (0,)


def test_unnormalized_probs_rejected():
    with pytest.raises(ContractError):
        select_experts([0.5, 0.6], TOP2)


@pytest.mark.parametrize("seed", range(5))
def test_adaptive_t1_equals_top2(seed):
    for p in prob_vectors(50, 6, seed):
        a, b = select_experts(p, RoutingPolicy("adaptive", 1.0)), select_experts(p, TOP2)
        assert a.expert_ids == b.expert_ids and a.weights == b.weights


def test_vectorised_route_matches_per_token():
    probs = prob_vectors(300, 5, 11)
    for policy in (TOP1, TOP2, ADAPT, RoutingPolicy("adaptive", 0.3, "raw")):
        r = route(probs, policy)
        for i, p in enumerate(probs):
            d = select_experts(p, policy)
            assert d.expert_ids[0] == r.first[i]
            assert d.is_top2 == r.is_top2[i]
            if d.is_top2:
                assert d.expert_ids[1] == r.second[i]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
def test_top2_set_grows_with_threshold(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    probs = prob_vectors(64, 8, seed)
    small = route(probs, RoutingPolicy("adaptive", lo)).is_top2
    large = route(probs, RoutingPolicy("adaptive", hi)).is_top2
    assert not (small & ~large).any()


# -- combine -----------------------------------------------------------------

def test_combine_single():
    v = Tensor([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(combine([1.0], [v]).data, v.data)


def test_combine_symmetric_cancels():
    v = np.array([1.5, -2.0])
    assert not combine([0.5, 0.5], [Tensor(v), Tensor(-v)]).data.any()


def test_combine_weighted():
    out = combine([0.75, 0.25], [Tensor([4.0, 0.0]), Tensor([0.0, 4.0])])
    assert out.data.tolist() == [3.0, 1.0]


def test_combine_count_mismatch():
    with pytest.raises(ContractError):
        combine([1.0], [Tensor([1.0]), Tensor([2.0])])


def test_combine_gradient_flows_to_weights_and_outputs():
    w = parameter([0.3, 0.7])
    a, b = parameter([1.0, 2.0]), parameter([-1.0, 0.5])
    f = lambda: (combine([w[0], w[1]], [a, b]) ** 2).sum()
    assert finite_diff_check(f, [w, a, b]).max_rel_error < 1e-6


# -- load balance loss -------------------------------------------------------

@pytest.mark.parametrize("e", [2, 4, 8, 16])
def test_balance_loss_uniform_is_one(e):
    stats = LoadBalanceStats(np.full(e, 1 / e), Tensor(np.full(e, 1 / e)), e, 10)
    assert load_balance_loss(stats).item() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("e", [2, 4, 8])
def test_balance_loss_concentrated_is_e(e):
    onehot = np.eye(e)[0]
    assert load_balance_loss(LoadBalanceStats(onehot, Tensor(onehot), e, 5)).item() == e


def test_balance_loss_all_top2_is_zero():
    probs = Tensor(prob_vectors(10, 4, 0))
    routing = route(probs.data, TOP2)
    stats = make_stats(routing, probs)
    assert stats.top1_token_count == 0 and load_balance_loss(stats).item() == 0.0


def test_balance_loss_minimised_by_uniform_f1():
    # enumerate f1 on a grid of the 4-simplex with p fixed uniform
    e, steps = 4, 8
    best = None
    for counts in itertools.product(range(steps + 1), repeat=e):
        if sum(counts) != steps:
            continue
        f1 = np.array(counts) / steps
        loss = load_balance_loss(LoadBalanceStats(f1, Tensor(np.full(e, 0.25)), e, steps)).item()
        if best is None or loss < best[0] - 1e-15:
            best = (loss, counts)
        assert loss >= 1.0 - 1e-12
    assert best[0] == pytest.approx(1.0)


def test_top2_tokens_excluded_from_f1():
    probs = np.array([[0.9, 0.1], [0.52, 0.48], [0.2, 0.8], [0.6, 0.4]])
    routing = route(probs, RoutingPolicy("adaptive", 0.1))
    assert routing.is_top2.tolist() == [False, True, False, False]
    stats = make_stats(routing, Tensor(probs))
    np.testing.assert_allclose(stats.f1, [2 / 3, 1 / 3])
    np.testing.assert_allclose(stats.p.data, probs.mean(axis=0))


# -- moe_forward -------------------------------------------------------------

def test_top1_and_adaptive_t0_agree():
    experts, gate, rng = random_layer()
    x = Tensor(rng.normal(size=(30, 6)))
    a = moe_forward(experts, gate, TOP1, x)
    b = moe_forward(experts, gate, RoutingPolicy("adaptive", 0.0), x)
    np.testing.assert_array_equal(a.outputs.data, b.outputs.data)
    assert a.top2_ratio == b.top2_ratio == 0
    assert [d.expert_ids for d in a.decisions] == [d.expert_ids for d in b.decisions]


def test_top2_and_adaptive_t1_agree():
    experts, gate, rng = random_layer()
    x = Tensor(rng.normal(size=(30, 6)))
    a = moe_forward(experts, gate, TOP2, x)
    b = moe_forward(experts, gate, RoutingPolicy("adaptive", 1.0), x)
    np.testing.assert_array_equal(a.outputs.data, b.outputs.data)
    assert a.top2_ratio == b.top2_ratio == 1


def test_hand_built_half_top2_batch():
    # logits (a, -a): pair gap = tanh(a); tokens 0,1 confident, 2,3 close calls
    experts, _, _ = random_layer(hidden=2, n_experts=2)
    gate = GatingNetwork(parameter([[1.0, -1.0], [0.0, 0.0]]))
    x = Tensor([[2.0, 0.0], [-2.0, 0.0], [0.05, 0.0], [0.0, 0.0]])
    out = moe_forward(experts, gate, ADAPT, x)
    assert out.top2_ratio == 0.5
    assert [d.expert_ids for d in out.decisions] == [(0,), (1,), (0, 1), (0, 1)]
    sig = lambda z: 1 / (1 + math.exp(-z))
    p0 = (sig(4) + sig(-4) + sig(0.1) + 0.5) / 4
    np.testing.assert_allclose(out.stats.f1, [0.5, 0.5])
    np.testing.assert_allclose(out.stats.p.data, [p0, 1 - p0], rtol=1e-14)
    assert out.stats.top1_token_count == 2
    assert load_balance_loss(out.stats).item() == pytest.approx(2 * (0.5 * p0 + 0.5 * (1 - p0)))
    # token outputs follow the combine rule
    y0 = expert_forward(experts[0], x).data
    y1 = expert_forward(experts[1], x).data
    w = sig(0.1)
    np.testing.assert_allclose(out.outputs.data[0], y0[0], rtol=1e-14)
    np.testing.assert_allclose(out.outputs.data[1], y1[1], rtol=1e-14)
    np.testing.assert_allclose(out.outputs.data[2], w * y0[2] + (1 - w) * y1[2], rtol=1e-12)
    np.testing.assert_allclose(out.outputs.data[3], 0.5 * y0[3] + 0.5 * y1[3], rtol=1e-12)


def test_weights_positive_and_normalised():
    experts, gate, rng = random_layer()
    out = moe_forward(experts, gate, RoutingPolicy("adaptive", 0.3), Tensor(rng.normal(size=(50, 6))))
    for d in out.decisions:
        assert all(w > 0 for w in d.weights)
        assert abs(sum(d.weights) - 1) <= 1e-12
        assert d.expert_ids[0] == int(np.argmax(d.full_probs))


def test_invocation_accounting():
    experts, gate, rng = random_layer()
    out = moe_forward(experts, gate, RoutingPolicy("adaptive", 0.3), Tensor(rng.normal(size=(50, 6))))
    calls = sum(len(d.expert_ids) for d in out.decisions)
    assert calls == out.routing.top1_count + 2 * out.routing.top2_count == out.routing.invocations


def test_expert_permutation_invariance():
    experts, gate, rng = random_layer(n_experts=5)
    x = Tensor(rng.normal(size=(40, 6)))
    perm = rng.permutation(5)
    p_experts = [experts[k] for k in perm]
    p_gate = GatingNetwork(Tensor(gate.wg.data[:, perm]))
    policy = RoutingPolicy("adaptive", 0.3)
    a = moe_forward(experts, gate, policy, x)
    b = moe_forward(p_experts, p_gate, policy, x)
    np.testing.assert_allclose(a.outputs.data, b.outputs.data, rtol=1e-12, atol=1e-14)
    assert a.top2_ratio == b.top2_ratio
    assert load_balance_loss(a.stats).item() == pytest.approx(load_balance_loss(b.stats).item(), rel=1e-12)
    for da, db in zip(a.decisions, b.decisions):
        assert da.expert_ids == tuple(int(perm[k]) for k in db.expert_ids)


def test_frozen_routing_gradient_check():
    experts, gate, rng = random_layer(hidden=4, inter=6, n_experts=3)
    x = parameter(rng.normal(size=(8, 4)))
    policy = RoutingPolicy("adaptive", 0.5)
    frozen = moe_forward(experts, gate, policy, x).routing
    w = rng.normal(size=(8, 4))
    params = [x, gate.wg] + [p for e in experts for p in e.parameters()]

    def f():
        out = moe_forward(experts, gate, policy, x, frozen=frozen)
        return (out.outputs * w).sum() + load_balance_loss(out.stats)

    assert finite_diff_check(f, params, eps=1e-5).max_rel_error < 1e-4


def test_single_expert_layer():
    experts, gate, rng = random_layer(n_experts=1)
    x = Tensor(rng.normal(size=(5, 6)))
    out = moe_forward(experts, gate, TOP1, x)
    np.testing.assert_allclose(out.outputs.data, expert_forward(experts[0], x).data, rtol=1e-14)
