"""Property sweeps behind ``dsalab verify``.

Each check returns ``(passed, measured)``; ``run_all`` collects them into a
report. Random instances come from streams named after the check, so the
report is reproducible for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import context_sim as cs
from . import rng as rngmod
from .dsa import (
    IndexerParams,
    SelectionSet,
    count_operations,
    indexer_scores,
    instrumented_costs,
    masked_dense_simulation,
    select_topk,
    sparse_attention,
)
from .grpo import (
    GrpoConfig,
    PolicyEval,
    RolloutGroup,
    grpo_objective,
    objective_and_grad,
    offpolicy_mask,
    unbiased_kl_terms,
)
from .indexer_training import (
    ScheduleConfig,
    ToyIndexerModel,
    run_two_stage_schedule,
    sparse_stage_loss,
    target_distribution,
    warmup_loss,
)
from .mla import MlaParams, ModelDims, mha_mode_attention, mqa_mode_attention
from .numerics import finite_diff_grad, kl_divergence, l1_normalize, softmax_rows, topk_indices
from .policy_sim import (
    SamplingConfig,
    TabularPolicy,
    ToyMoEPolicy,
    forward_replay,
    forward_with_routing,
    masked_log_softmax,
    masked_logprob,
    sample_group,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: str


class Context:
    def __init__(self, seed: int = 0, seeds: int = 20, dims: ModelDims = ModelDims(), corrupt_tie_rule: bool = False,
                 schedule: Optional[ScheduleConfig] = None, train_L: int = 32):
        self.schedule = schedule or ScheduleConfig(k_select=8)
        self.train_L = train_L
        self.seed = seed
        self.seeds = seeds
        self.dims = dims
        self.corrupt_tie_rule = corrupt_tie_rule
        self._corrupt_rng = rngmod.stream(seed, "verify", "corrupt")

    def rng(self, *namespace) -> np.random.Generator:
        return rngmod.stream(self.seed, "verify", *namespace)

    def topk(self, scores, k):
        if not self.corrupt_tie_rule:
            return topk_indices(scores, k)
        # negative control: random tie-breaking
        s = np.asarray(scores, dtype=np.float64)
        jitter = self._corrupt_rng.permutation(s.size)
        order = np.lexsort((jitter, -s))
        return np.sort(order[: min(k, s.size)])


def _small_dims(rng) -> ModelDims:
    return ModelDims(d=int(rng.integers(2, 33)), H=int(rng.integers(1, 4)), d_h=int(rng.integers(1, 9)),
                     d_c=int(rng.integers(1, 9)), H_I=int(rng.integers(1, 4)), d_I=int(rng.integers(1, 6)),
                     k_select=int(rng.integers(1, 6)))


def _rel(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


CHECKS: list[tuple[str, Callable[[Context], tuple]]] = []


def check(name):
    def deco(fn):
        CHECKS.append((name, fn))
        return fn
    return deco


@check("numerics.kl_nonnegative")
def _kl_nonneg(ctx):
    rng = ctx.rng("kl")
    worst = np.inf
    for _ in range(200):
        p, q = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))
        worst = min(worst, kl_divergence(p, q))
    zero = max(abs(kl_divergence(p, p)) for p in rng.dirichlet(np.ones(8), size=50))
    return worst >= 0 and zero <= 1e-9, f"min KL={worst:.3g}, max KL(p,p)={zero:.1e}"


@check("numerics.softmax_normalized_shift_invariant")
def _softmax(ctx):
    rng = ctx.rng("softmax")
    x = rng.normal(size=(50, 9)) * 10 ** rng.uniform(-3, 3, size=(50, 1))
    s = softmax_rows(x)
    dev_sum = float(np.max(np.abs(s.sum(axis=1) - 1)))
    dev_shift = float(np.max(np.abs(softmax_rows(x + rng.normal(size=(50, 1)) * 100) - s)))
    return dev_sum <= 1e-9 and dev_shift <= 1e-9, f"row-sum dev={dev_sum:.1e}, shift dev={dev_shift:.1e}"


@check("numerics.topk_determinism")
def _topk(ctx):
    rng = ctx.rng("topk")
    ok = True
    for _ in range(50):
        s = rng.integers(0, 4, size=32).astype(float)  # many ties
        k = int(rng.integers(1, 33))
        first, second = ctx.topk(s, k), ctx.topk(s, k)
        oracle = np.sort(sorted(range(s.size), key=lambda i: (-s[i], i))[:k])
        ok &= np.array_equal(first, second) and np.array_equal(first, oracle)
    return bool(ok), "repeat + smaller-index tie rule over 50 tied inputs"


@check("numerics.l1_roundtrip")
def _l1(ctx):
    v = ctx.rng("l1").uniform(0, 5, size=(50, 16))
    dev = max(_rel(l1_normalize(r) * r.sum(), r) for r in v)
    return dev <= 1e-12, f"max rel dev={dev:.1e}"


def _instance(rng, L=None):
    dims = _small_dims(rng)
    L = int(rng.integers(1, 17)) if L is None else L
    return dims, rng.normal(size=(L, dims.d)), MlaParams.random(dims, rng), IndexerParams.random(dims, rng)


@check("mla.mode_equivalence")
def _modes(ctx):
    rng = ctx.rng("modes")
    dev = max(_rel(mqa_mode_attention(h, mp).u, mha_mode_attention(h, mp).u)
              for _, h, mp, _ in (_instance(rng) for _ in range(50)))
    return dev < 1e-9, f"max rel dev={dev:.1e} over 50 instances"


@check("mla.causality")
def _causality(ctx):
    rng = ctx.rng("causality")
    ok = True
    for _ in range(ctx.seeds):
        _, h, mp, _ = _instance(rng, L=8)
        t = int(rng.integers(0, 7))
        h2 = h.copy()
        h2[t + 1:] += rng.normal(size=h2[t + 1:].shape)
        ok &= np.array_equal(mqa_mode_attention(h, mp).u[: t + 1], mqa_mode_attention(h2, mp).u[: t + 1])
        ok &= np.array_equal(mha_mode_attention(h, mp).u[: t + 1], mha_mode_attention(h2, mp).u[: t + 1])
    return bool(ok), "prefix outputs bit-identical under future perturbation"


@check("mla.weights_are_distributions")
def _weights(ctx):
    rng = ctx.rng("weights")
    dev = 0.0
    for _ in range(ctx.seeds):
        _, h, mp, _ = _instance(rng)
        for w in (mha_mode_attention(h, mp).weights, mqa_mode_attention(h, mp).weights):
            dev = max(dev, float(np.max(np.abs(w.sum(axis=2) - 1))))
    return dev <= 1e-9, f"max row-sum dev={dev:.1e}"


@check("mla.head_permutation")
def _perm(ctx):
    rng = ctx.rng("perm")
    dev = 0.0
    for _ in range(ctx.seeds):
        dims, h, mp, _ = _instance(rng)
        perm = rng.permutation(dims.H)
        dev = max(dev, _rel(mqa_mode_attention(h, mp.permute_heads(perm)).u, mqa_mode_attention(h, mp).u))
    return dev <= 1e-12, f"max rel dev={dev:.1e}"


@check("dsa.full_selection_equivalence")
def _full(ctx):
    rng = ctx.rng("full")
    dev = 0.0
    for _ in range(ctx.seeds):
        _, h, mp, ip = _instance(rng)
        sel = select_topk(indexer_scores(h, ip), h.shape[0], ctx.topk)
        dev = max(dev, _rel(sparse_attention(h, mp, sel).u, mqa_mode_attention(h, mp).u))
    return dev <= 1e-12, f"max rel dev={dev:.1e}"


@check("dsa.masked_dense_oracle")
def _masked(ctx):
    rng = ctx.rng("masked")
    dev = 0.0
    for _ in range(25):
        dims, h, mp, ip = _instance(rng)
        sel = select_topk(indexer_scores(h, ip), dims.k_select, ctx.topk)
        dev = max(dev, _rel(sparse_attention(h, mp, sel).u, masked_dense_simulation(h, mp, sel).u))
    return dev <= 1e-10, f"max rel dev={dev:.1e} over 25 pairs"


@check("dsa.selection_causality")
def _selcaus(ctx):
    rng = ctx.rng("selcaus")
    ok = True
    for _ in range(ctx.seeds):
        dims, h, mp, ip = _instance(rng, L=10)
        sel = select_topk(indexer_scores(h, ip), dims.k_select, ctx.topk)
        ok &= all(s.max() <= t for t, s in enumerate(sel.S))
        t = int(rng.integers(0, 10))
        outside = [s for s in range(10) if s not in set(sel.S[t]) and s != t]
        h2 = h.copy()
        h2[outside] += rng.normal(size=(len(outside), dims.d))
        ok &= np.array_equal(sparse_attention(h, mp, sel).u[t], sparse_attention(h2, mp, sel).u[t])
    return bool(ok), "S_t within prefix; u_t blind to unselected tokens"


@check("dsa.cost_model_agreement")
def _cost(ctx):
    rng = ctx.rng("cost")
    ok = True
    for L in (16, 64, 256):
        dims = ModelDims(d=8, H=2, d_h=4, d_c=4, H_I=2, d_I=3, k_select=32)
        for mode in ("dense", "sparse"):
            ok &= instrumented_costs(dims, L, mode, rng) == count_operations(dims, L, mode)
    return bool(ok), "instrumented == closed form for L in {16, 64, 256}"


@check("dsa.indexer_scale_covariance")
def _scale(ctx):
    rng = ctx.rng("scale")
    ok = True
    for _ in range(ctx.seeds):
        dims, h, mp, ip = _instance(rng)
        c = float(rng.uniform(0.1, 10))
        a, b = indexer_scores(h, ip), indexer_scores(h, ip.scaled(c))
        sa, sb = select_topk(a, dims.k_select, ctx.topk), select_topk(b, dims.k_select, ctx.topk)
        ok &= all(np.array_equal(x, y) for x, y in zip(sa.S, sb.S))
    return bool(ok), "S_t unchanged under positive rescaling of indexer weights"


def _indexer_case(rng, L=6):
    dims = ModelDims(d=6, H=2, d_h=3, d_c=4, H_I=2, d_I=3, k_select=3)
    h = rng.normal(size=(L, dims.d))
    mp, ip = MlaParams.random(dims, rng), IndexerParams.random(dims, rng)
    p = target_distribution(mha_mode_attention(h, mp).weights)
    return dims, h, mp, ip, p


def _rel_grad_err(g, fd) -> float:
    return float(np.max(np.abs(g - fd)) / max(1e-12, float(np.max(np.abs(fd)))))


@check("indexer.gradients_match_finite_differences")
def _igrad(ctx):
    rng = ctx.rng("igrad")
    worst = 0.0
    for _ in range(ctx.seeds):
        dims, h, mp, ip, p = _indexer_case(rng)
        sc = indexer_scores(h, ip)
        sel = select_topk(sc, dims.k_select, ctx.topk)
        cases = [
            (warmup_loss(p, sc).grad, lambda s: warmup_loss(p, s, with_grad=False).value),
            (sparse_stage_loss(p, sc, sel).grad, lambda s: sparse_stage_loss(p, s, sel, with_grad=False).value),
        ]
        for grad, value in cases:
            fd = finite_diff_grad(lambda x, value=value: value(indexer_scores(h, ip.unflatten(x))), ip.flatten(), 1e-6)
            worst = max(worst, _rel_grad_err(grad.flatten(), fd))
    return worst <= 1e-5, f"max rel err={worst:.1e}"


@check("indexer.detach_contract")
def _detach(ctx):
    rng = ctx.rng("detach")
    ok = True
    for _ in range(ctx.seeds):
        dims, h, mp, ip, p = _indexer_case(rng)
        sc = indexer_scores(h, ip)
        before = warmup_loss(p, sc).value
        # perturb the main model and its inputs; cached target and scores stay
        mp.W_q += rng.normal(size=mp.W_q.shape)
        h += rng.normal(size=h.shape)
        mha_mode_attention(h, mp)
        ok &= warmup_loss(p, sc).value == before
        ok &= set(vars(warmup_loss(p, sc).grad)) == {"Wq_I", "Wk_I", "Ww_I"}
    return bool(ok), "loss unchanged; gradient covers indexer parameters only"


@check("indexer.loss_nonnegative_zero_at_match")
def _izero(ctx):
    rng = ctx.rng("izero")
    ok = True
    zero = 0.0
    for _ in range(ctx.seeds):
        dims, h, mp, ip, p = _indexer_case(rng)
        sc = indexer_scores(h, ip)
        sel = select_topk(sc, dims.k_select, ctx.topk)
        ok &= warmup_loss(p, sc).value >= 0 and sparse_stage_loss(p, sc, sel).value >= 0
        own = target_distribution(np.stack([np.tril(softmax_rows(np.where(np.tril(np.ones_like(sc.I)) > 0, sc.I, -np.inf)))]))
        zero = max(zero, abs(warmup_loss(own, sc).value), float(np.max(np.abs(warmup_loss(own, sc).grad.flatten()))))
    return bool(ok) and zero <= 1e-9, f"loss >= 0; self-target loss/grad={zero:.1e}"


@check("indexer.saturated_sparse_equals_warmup")
def _isat(ctx):
    rng = ctx.rng("isat")
    ok = True
    for _ in range(ctx.seeds):
        dims, h, mp, ip, p = _indexer_case(rng)
        sc = indexer_scores(h, ip)
        ok &= sparse_stage_loss(p, sc, SelectionSet.full(h.shape[0])).value == warmup_loss(p, sc).value
    return bool(ok), "exact equality under full selection"


@check("indexer.two_stage_descent")
def _schedule(ctx):
    model = ToyIndexerModel.random(ctx.dims, ctx.train_L, ctx.rng("schedule"))
    trace = run_two_stage_schedule(ctx.schedule, model)
    warm = [v for stage, _, v in trace if stage == "warmup"]
    sparse = [v for stage, _, v in trace if stage == "sparse"]
    ok = bool(warm) and warm[-1] < 0.5 * warm[0] and all(np.isfinite(sparse))
    detail = f"warm-up {warm[0]:.3f} -> {warm[-1]:.3f}" if warm else "no warm-up steps"
    if sparse:
        detail += f"; sparse {sparse[0]:.4f} -> {sparse[-1]:.4f}"
    return ok, detail


def _moe(rng, contexts=4, E=4, V=6, D=5, top_r=2):
    return ToyMoEPolicy.random(contexts, E, V, D, top_r, rng)


@check("policy.shared_action_subspace")
def _subspace(ctx):
    rng = ctx.rng("subspace")
    old = TabularPolicy(rng.normal(size=(6, 8)))
    cur = TabularPolicy(old.logits + rng.normal(size=old.logits.shape))
    recs = sample_group(old, 0, 32, 6, SamplingConfig(top_p=0.7, top_k=5), ctx.seed, ("verify",))
    ok = all(np.isfinite(masked_logprob(pol, r.contexts[t], r.tokens[t], r.masks[t]))
             for r in recs for t in range(len(r)) for pol in (old, cur))
    return bool(ok), f"{sum(len(r) for r in recs)} sampled steps"


@check("policy.replay_isolation")
def _replay(ctx):
    rng = ctx.rng("replay")
    ok = True
    for _ in range(ctx.seeds):
        moe = _moe(rng)
        c = int(rng.integers(0, 4))
        logits, rec = forward_with_routing(moe, c)
        ok &= np.array_equal(forward_replay(moe, c, rec), logits)
        others = [e for e in range(moe.E) if e not in rec.experts]
        moe.experts[others] += rng.normal(size=moe.experts[others].shape)
        ok &= np.array_equal(forward_replay(moe, c, rec), logits)
    return bool(ok), "replay bit-identical after perturbing unrouted experts"


@check("policy.seed_determinism")
def _pseed(ctx):
    moe = _moe(ctx.rng("pseed"))
    cfg = SamplingConfig(top_p=0.9, perturb=0.1)
    a = sample_group(moe, 0, 4, 4, cfg, ctx.seed)
    b = sample_group(moe, 0, 4, 4, cfg, ctx.seed)
    return all(x.to_line() == y.to_line() for x, y in zip(a, b)), "identical serialized records"


@check("policy.masked_renormalization")
def _renorm(ctx):
    rng = ctx.rng("renorm")
    dev = 0.0
    for _ in range(200):
        logits = rng.normal(size=10) * 3
        mask = rng.random(10) < 0.5
        mask[int(rng.integers(0, 10))] = True
        dev = max(dev, abs(float(np.sum(np.exp(masked_log_softmax(logits, mask)))) - 1))
    return dev <= 1e-12, f"max |sum - 1|={dev:.1e}"


def _enumerated_kl(p_old, p_cur, p_ref):
    lo, lc, lr = np.log(p_old), np.log(p_cur), np.log(p_ref)
    expect = float(np.sum(p_old * unbiased_kl_terms(lo, lc, lr)))
    return expect, kl_divergence(p_cur, p_ref)


@check("grpo.estimator_unbiased_by_enumeration")
def _unbiased(ctx):
    rng = ctx.rng("unbiased")
    dev = 0.0
    for _ in range(ctx.seeds):
        p_old, p_cur, p_ref = rng.dirichlet(np.ones(4), size=3)
        e, kl = _enumerated_kl(p_old, p_cur, p_ref)
        dev = max(dev, abs(e - kl))
    return dev <= 1e-10, f"max |E[est] - KL|={dev:.1e}"


def _grpo_case(rng, G=4, V=5, max_len=6):
    cur = TabularPolicy(rng.normal(size=(max_len, V)))
    old = TabularPolicy(cur.logits + 0.5 * rng.normal(size=cur.logits.shape))
    ref = TabularPolicy(rng.normal(size=cur.logits.shape))
    L = int(rng.integers(1, max_len + 1))
    seed = int(rng.integers(0, 2**32))
    recs = sample_group(old, 0, G, L, SamplingConfig(top_p=0.95), seed)
    return cur, ref, RolloutGroup(0, recs, rng.normal(size=G))


@check("grpo.clip_inert_on_policy")
def _clip(ctx):
    rng = ctx.rng("clip")
    ok = True
    for _ in range(ctx.seeds):
        lo = [np.log(rng.uniform(0.05, 1, size=5)) for _ in range(4)]
        ev = PolicyEval(lo, lo, lo)
        grp = RolloutGroup(0, [None] * 4, rng.normal(size=4))
        a = grpo_objective([grp], [ev], GrpoConfig(epsilon=0.2, beta=0.0))
        b = grpo_objective([grp], [ev], GrpoConfig(epsilon=0.9, beta=0.0))
        ok &= a.value == b.value and abs(a.value) <= 1e-12
    return bool(ok), "clip range irrelevant when ratios are 1"


@check("grpo.sequence_level_mask")
def _seqmask(ctx):
    rng = ctx.rng("seqmask")
    ok = True
    for _ in range(ctx.seeds):
        lo = [rng.normal(size=int(rng.integers(1, 7))) for _ in range(4)]
        lc = [x + rng.normal(size=x.size) for x in lo]
        masks = offpolicy_mask(PolicyEval(lo, lc, lc), rng.normal(size=4), 0.1)
        ok &= all(np.all(m == m[0]) for m in masks)
    return bool(ok), "constant mask within each output"


@check("grpo.reward_shift_invariance")
def _shift(ctx):
    rng = ctx.rng("shift")
    dev = 0.0
    for _ in range(ctx.seeds):
        cur, ref, grp = _grpo_case(rng)
        cfg = GrpoConfig(beta=0.1, delta=0.05)
        v1, g1, r1, _ = objective_and_grad(cur, ref, [grp], cfg)
        shifted = RolloutGroup(0, grp.outputs, grp.rewards + float(rng.normal() * 3))
        v2, g2, r2, _ = objective_and_grad(cur, ref, [shifted], cfg)
        dev = max(dev, abs(v1 - v2), float(np.max(np.abs(g1 - g2))))
        if any(not np.array_equal(a, b) for a, b in zip(r1.masks[0], r2.masks[0])):
            dev = np.inf
    return dev <= 1e-12, f"max deviation={dev:.1e}"


@check("grpo.gradient_matches_finite_differences")
def _ggrad(ctx):
    rng = ctx.rng("ggrad")
    worst = 0.0
    for _ in range(ctx.seeds):
        cur, ref, grp = _grpo_case(rng)
        cfg = GrpoConfig(beta=0.2, delta=0.05)
        _, g, _, _ = objective_and_grad(cur, ref, [grp], cfg)
        fd = finite_diff_grad(lambda x: objective_and_grad(cur.with_params(x), ref, [grp], cfg)[0],
                              cur.flat_params(), 1e-6)
        worst = max(worst, _rel_grad_err(g, fd))
    return worst <= 1e-5, f"max rel err={worst:.1e}"


_CTX_TASK = cs.SyntheticTask(K=4, find_prob=0.25)


@check("ctx.post_strategy_token_bound")
def _bound(ctx):
    worst = 0.0
    for strategy in ("Summary", "Discard75", "DiscardAll"):
        budget = cs.Budget(3000)
        for j in range(200):
            r = cs.run_trajectory(_CTX_TASK, budget, cs.Strategy(strategy), 40, cs.trial_seed(ctx.seed, j))
            worst = max(worst, r.max_post_strategy_tokens / budget.window)
    return worst < 1, f"max post-strategy usage={worst:.3f} of window"


def _random_messages(rng, n):
    out = []
    for _ in range(n):
        role = cs.ROLES[int(rng.integers(0, 4))]
        reasoning = "r" if role == "assistant" and rng.random() < 0.7 else None
        out.append(cs.Message(role, "b", int(rng.integers(0, 50)), reasoning, int(rng.integers(0, 50)),
                              tool_call=role == "assistant" and rng.random() < 0.5))
    return out


@check("ctx.assemble_idempotent_and_tool_preserving")
def _assemble(ctx):
    rng = ctx.rng("assemble")
    ok = True
    for _ in range(200):
        msgs = _random_messages(rng, int(rng.integers(0, 12)))
        once = cs.assemble_context(msgs)
        ok &= cs.assemble_context(once) == once
        ok &= [m for m in once if m.role == "tool"] == [m for m in msgs if m.role == "tool"]
        ok &= len(once) == len(msgs)
    return bool(ok), "200 random message lists"


@check("ctx.parallel_fewest_step_selection")
def _parallel(ctx):
    ok = True
    budget = cs.Budget(6000)
    for j in range(50):
        seed = cs.trial_seed(ctx.seed, j)
        r = cs.run_trajectory(_CTX_TASK, budget, cs.Strategy("ParallelFewestStep", 4), 40, seed)
        members = [cs.run_trajectory(_CTX_TASK, budget, cs.Strategy("NoManagement"), 40,
                                     cs.parallel_member_seed(seed, m)) for m in range(4)]
        wins = [m.steps for m in members if m.success]
        ok &= r.success == bool(wins) and (not wins or r.steps == min(wins))
    return bool(ok), "fewest-step member matches a full scan"


@check("ctx.seed_determinism")
def _cseed(ctx):
    a = cs.run_experiment(_CTX_TASK, [cs.Strategy("Summary")], [3000], 20, ctx.seed, 40)
    b = cs.run_experiment(_CTX_TASK, [cs.Strategy("Summary")], [3000], 20, ctx.seed, 40)
    return a == b, "identical aggregate rows"


def run_all(ctx: Context) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        try:
            passed, measured = fn(ctx)
        except Exception as exc:  # a crashing property is a failing property
            passed, measured = False, f"error: {exc!r}"
        results.append(CheckResult(name, bool(passed), measured))
    return results


def format_report(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.measured}" for r in results]
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} properties passed")
    return "\n".join(lines) + "\n"
