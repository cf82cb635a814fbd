import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptmoe.cost import (
    REFERENCE_PAIRS, batch_cost, expert_flops, fit_omega, normalized_compute, step_time_model,
)
from adaptmoe.moe import Routing


def test_expert_flops_closed_form():
    assert expert_flops(64, 128) == 32768 == 4 * 64 * 128


def test_expert_flops_linear_in_intermediate():
    assert expert_flops(64, 256) == 2 * expert_flops(64, 128)


def test_expert_flops_rejects_nonpositive():
    with pytest.raises(ValueError):
        expert_flops(0, 4)


@pytest.mark.parametrize("frac, expected", [(1.0, 0.5), (0.8, 0.6), (0.5, 0.75), (0.2, 0.9), (0.0, 1.0)])
def test_normalized_compute_reference_rows(frac, expected):
    assert normalized_compute(frac) == expected


@given(st.floats(0, 1), st.floats(0, 1))
def test_normalized_compute_affine_decreasing(a, b):
    lo, hi = sorted((a, b))
    assert normalized_compute(hi) <= normalized_compute(lo)
    mid = (lo + hi) / 2
    assert normalized_compute(mid) == pytest.approx((normalized_compute(lo) + normalized_compute(hi)) / 2, abs=1e-15)


@pytest.mark.parametrize("form", ["straggler", "affine"])
@given(omega=st.floats(0, 1))
def test_step_time_is_one_without_top1_tokens(form, omega):
    assert step_time_model(0.0, omega, form) == 1.0


@pytest.mark.parametrize("form", ["straggler", "affine"])
@given(frac=st.floats(0, 1))
def test_step_time_without_overhead_is_compute(form, frac):
    assert step_time_model(frac, 0.0, form) == normalized_compute(frac)


@pytest.mark.parametrize("form", ["straggler", "affine"])
@given(frac=st.floats(0, 1), omega=st.floats(0, 1))
def test_step_time_never_below_compute(form, frac, omega):
    assert step_time_model(frac, omega, form) >= normalized_compute(frac)


def test_fit_reference_pairs_residuals():
    fit = fit_omega(REFERENCE_PAIRS)
    assert 0 <= fit.omega <= 1
    assert fit.max_abs_residual < 0.05


def test_affine_form_cannot_fit_reference_pairs():
    # the (0.5, 0.67) point needs omega < 0.44 and (0.75, 0.92) needs omega > 0.48
    for omega in np.linspace(0, 1, 1001):
        preds = [step_time_model(2 * (1 - c), omega, "affine") for c, _ in REFERENCE_PAIRS]
        assert max(abs(p - t) for p, (_, t) in zip(preds, REFERENCE_PAIRS)) >= 0.05


@pytest.mark.parametrize("form", ["straggler", "affine"])
@pytest.mark.parametrize("omega", [0.0, 0.137, 0.5, 0.91])
def test_fit_recovers_known_omega(form, omega):
    compute = [0.5, 0.55, 0.7, 0.8, 0.95]
    pairs = [(c, step_time_model(2 * (1 - c), omega, form)) for c in compute]
    assert abs(fit_omega(pairs, form).omega - omega) < 1e-9


def test_fit_single_pair_interpolates():
    fit = fit_omega([(0.6, 0.8)])
    assert fit.max_abs_residual < 1e-15


def _routing(flags):
    flags = np.asarray(flags, dtype=bool)
    zeros = np.zeros(len(flags), dtype=int)
    return Routing(zeros, zeros + 1, flags)


def test_batch_cost_all_top1():
    report = batch_cost([_routing([False] * 10)] * 3, 64, 128)
    assert report.norm_compute == 0.5
    assert report.batch_expert_flops == 3 * 10 * 32768
    assert report.expert_flops_per_token == 3 * 32768


def test_batch_cost_half_and_half():
    report = batch_cost([_routing([True, False] * 8)], 64, 128)
    assert report.norm_compute == 0.75
    assert report.modeled_step_time >= report.norm_compute


def test_batch_cost_matches_recount():
    rng = np.random.default_rng(0)
    for _ in range(50):
        layers = [_routing(rng.random(rng.integers(1, 40)) < rng.random()) for _ in range(rng.integers(1, 5))]
        n = len(layers[0].is_top2)
        layers = [_routing(rng.random(n) < 0.4) for _ in layers]
        calls = 0
        for r in layers:
            for flag in r.is_top2:
                calls += 2 if flag else 1
        report = batch_cost(layers, 8, 16)
        assert report.invocations == calls
        assert report.batch_expert_flops == calls * expert_flops(8, 16)
        assert report.norm_compute == pytest.approx(calls / (2 * n * len(layers)), abs=1e-15)
