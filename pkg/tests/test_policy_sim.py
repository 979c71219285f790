import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dsalab.numerics import NumericsError, softmax_rows
from dsalab.policy_sim import (
    RoutingRecord,
    SamplingConfig,
    SamplingRecord,
    TabularPolicy,
    ToyMoEPolicy,
    forward_replay,
    forward_with_routing,
    masked_log_softmax,
    masked_logprob,
    read_records,
    sample_group,
    truncation_mask,
    write_records,
)


def test_truncation_no_op():
    assert truncation_mask([0.1, 0.2, 0.3, 0.4], 1.0, 4).all()
    assert truncation_mask([0.1, 0.2, 0.3, 0.4], 1.0, 0).all()


def test_truncation_top1_is_argmax():
    assert truncation_mask([0.2, 0.5, 0.3], 1.0, 1).tolist() == [False, True, False]
    assert truncation_mask([0.4, 0.4, 0.2], 1.0, 1).tolist() == [True, False, False]


def test_truncation_prefix_mass():
    assert truncation_mask([0.5, 0.3, 0.2], 0.7, 3).tolist() == [True, True, False]
    # exact boundary: mass >= top_p is reached at the first token
    assert truncation_mask([0.5, 0.3, 0.2], 0.5, 3).tolist() == [True, False, False]


def test_truncation_topk_before_topp():
    assert truncation_mask([0.4, 0.3, 0.2, 0.1], 0.95, 2).tolist() == [True, True, False, False]


@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(0.001, 1)), st.floats(0.01, 1.0), st.integers(0, 12))
def test_truncation_keeps_a_prefix_of_the_ranking(w, top_p, top_k):
    p = w / w.sum()
    mask = truncation_mask(p, top_p, top_k)
    assert mask.any()
    if top_k > 0:
        assert mask.sum() <= top_k
    kept, dropped = p[mask], p[~mask]
    if dropped.size:
        assert kept.min() >= dropped.max()


def tabular(rng, contexts=2, V=5):
    return TabularPolicy(rng.normal(size=(contexts, V)))


def test_masked_logprob_full_mask_equals_logsoftmax(rng):
    pol = tabular(rng)
    lp = np.log(softmax_rows(pol.logits[1])[0])
    for tok in range(5):
        assert masked_logprob(pol, 1, tok, np.ones(5, bool)) == pytest.approx(lp[tok], abs=1e-14)


def test_masked_logprob_singleton_is_zero(rng):
    mask = np.zeros(5, bool)
    mask[3] = True
    assert masked_logprob(tabular(rng), 0, 3, mask) == 0.0


def test_masked_logprob_renormalizes(rng):
    pol = tabular(rng, V=9)
    for _ in range(20):
        mask = rng.random(9) < 0.5
        mask[rng.integers(9)] = True
        total = sum(math.exp(masked_logprob(pol, 0, t, mask)) for t in np.flatnonzero(mask))
        assert abs(total - 1) <= 1e-12


def test_masked_logprob_rejects_outside_token(rng):
    with pytest.raises(NumericsError):
        masked_logprob(tabular(rng), 0, 0, np.array([False, True, True, True, True]))


def test_masked_log_softmax_temperature(rng):
    z = rng.normal(size=4)
    np.testing.assert_allclose(masked_log_softmax(z, np.ones(4, bool), 2.0), np.log(softmax_rows(z / 2)[0]), atol=1e-14)


def test_greedy_rollouts_identical(rng):
    pol = tabular(rng, contexts=3)
    group = sample_group(pol, 0, 6, 3, SamplingConfig(greedy=True), seed=9)
    assert all(r.tokens == group[0].tokens for r in group)
    assert group[0].tokens == [int(np.argmax(pol.logits[t])) for t in range(3)]
    assert all(lp == 0.0 for lp in group[0].old_logprobs)


def test_sampling_reproducible(rng):
    pol = ToyMoEPolicy.random(4, 3, 5, 6, 2, rng)
    cfg = SamplingConfig(top_p=0.9, top_k=4, perturb=0.1)
    a = sample_group(pol, 1, 4, 2, cfg, seed=123)
    b = sample_group(pol, 1, 4, 2, cfg, seed=123)
    assert write_records(a) == write_records(b)
    assert write_records(a) != write_records(sample_group(pol, 1, 4, 2, cfg, seed=124))


def test_records_respect_masks_and_logprobs(rng):
    pol = tabular(rng, contexts=4)
    for rec in sample_group(pol, 0, 8, 4, SamplingConfig(top_p=0.8, top_k=3), seed=5):
        for c, tok, lp, mask in zip(rec.contexts, rec.tokens, rec.old_logprobs, rec.masks):
            assert mask[tok]
            assert lp == pytest.approx(masked_logprob(pol, c, tok, mask), abs=1e-15)


def test_monte_carlo_frequencies():
    pol = TabularPolicy(np.array([[1.0, 0.5, 0.0, -0.5, -1.0]]))
    cfg = SamplingConfig(top_p=0.9, top_k=4)
    n = 100_000
    group = sample_group(pol, 0, n, 1, cfg, seed=2024)
    counts = np.bincount([r.tokens[0] for r in group], minlength=5)
    mask = group[0].masks[0]
    expected = np.exp(masked_log_softmax(pol.logits[0], mask))
    se = np.sqrt(expected * (1 - expected) / n)
    freq = counts / n
    assert np.all(np.abs(freq - expected) <= 3 * se + 1e-15)
    assert counts[~mask].sum() == 0


def test_single_expert_route(rng):
    moe = ToyMoEPolicy.random(3, 1, 4, 5, 1, rng)
    for c in range(3):
        logits, rec = forward_with_routing(moe, c)
        assert rec.experts == (0,)
        np.testing.assert_allclose(logits, moe.experts[0] @ moe.features[c], rtol=1e-15)


def test_router_tie_goes_to_expert_zero(rng):
    moe = ToyMoEPolicy.random(1, 2, 4, 3, 1, rng)
    moe.router_logits[:] = 0.7
    assert forward_with_routing(moe, 0)[1].experts == (0,)


def test_gate_weighted_sum_oracle(rng):
    moe = ToyMoEPolicy.random(2, 5, 4, 3, 3, rng)
    logits, rec = forward_with_routing(moe, 1)
    r = moe.router_logits[1]
    chosen = sorted(range(5), key=lambda e: (-r[e], e))[:3]
    assert list(rec.experts) == sorted(chosen)
    z = sum(math.exp(r[e]) for e in chosen)
    manual = sum(math.exp(r[e]) / z * (moe.experts[e] @ moe.features[1]) for e in chosen)
    np.testing.assert_allclose(logits, manual, rtol=1e-12, atol=1e-14)


def test_replay_identity_and_isolation(rng):
    moe = ToyMoEPolicy.random(2, 4, 5, 3, 2, rng)
    logits, rec = forward_with_routing(moe, 0)
    assert np.array_equal(forward_replay(moe, 0, rec), logits)
    other = [e for e in range(4) if e not in rec.experts]
    moe.experts[other] += rng.normal(size=moe.experts[other].shape)
    moe.router_logits[0, other] += 50.0  # current router would now pick different experts
    assert forward_with_routing(moe, 0)[1] != rec
    assert np.array_equal(forward_replay(moe, 0, rec), logits)


def test_replay_gradient_touches_recorded_experts_only(rng):
    moe = ToyMoEPolicy.random(1, 4, 5, 3, 2, rng)
    rec = RoutingRecord((1, 3))
    out = np.zeros(moe.flat_params().size)
    moe.backward(0, rng.normal(size=5), rec, out)
    expert_grad = out[moe.router_logits.size:].reshape(moe.experts.shape)
    assert np.all(expert_grad[[0, 2]] == 0) and np.any(expert_grad[[1, 3]] != 0)
    assert np.all(out[[0, 2]] == 0)


@pytest.mark.parametrize("bad", [(0,), (2, 2), (3, 1), (0, 9)])
def test_replay_rejects_malformed_record(rng, bad):
    moe = ToyMoEPolicy.random(1, 4, 5, 3, 2, rng)
    with pytest.raises(NumericsError):
        forward_replay(moe, 0, RoutingRecord(bad))


def test_moe_rejects_bad_top_r(rng):
    with pytest.raises(ValueError):
        ToyMoEPolicy.random(1, 2, 4, 3, 3, rng)


def test_shared_action_subspace(rng):
    old = ToyMoEPolicy.random(2, 4, 6, 3, 2, rng)
    new = old.with_params(old.flat_params() + 0.5 * rng.normal(size=old.flat_params().size))
    for rec in sample_group(old, 0, 16, 2, SamplingConfig(top_p=0.7, top_k=3, perturb=0.3), seed=3):
        for c, tok, mask, route in zip(rec.contexts, rec.tokens, rec.masks, rec.routing):
            for pol in (old, new):
                assert math.isfinite(masked_logprob(pol, c, tok, mask, route))


def test_record_line_roundtrip(rng):
    moe = ToyMoEPolicy.random(3, 4, 7, 3, 2, rng)
    recs = sample_group(moe, 0, 3, 3, SamplingConfig(top_p=0.8), seed=1)
    back = read_records(write_records(recs))
    for a, b in zip(recs, back):
        assert a.tokens == b.tokens and a.contexts == b.contexts and a.old_logprobs == b.old_logprobs
        assert all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))
        assert a.routing == b.routing


def test_record_line_format():
    rec = SamplingRecord([2], [0], [-0.5], [np.array([True, True, False, True])])
    assert rec.to_line() == "tokens=2\tcontexts=0\tlogprobs=-0.5\tmasks=1:2,1,1\trouting=-"
    assert SamplingRecord.from_line(rec.to_line()).routing is None


def test_group_needs_two(rng):
    with pytest.raises(ValueError):
        sample_group(tabular(rng), 0, 1, 1, SamplingConfig(), seed=0)
