"""GRPO with group-centered advantages, an importance-corrected K3 KL penalty,
and off-policy sequence masking, plus a small training loop over toy policies.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .policy_sim import (
    Policy,
    SamplingConfig,
    SamplingRecord,
    TabularPolicy,
    masked_log_softmax,
    sample_group,
)

_MAX_EXP = 700.0


@dataclass
class GrpoConfig:
    epsilon: float = 0.2
    beta: float = 0.01
    delta: float = 0.1
    kl_estimator: str = "unbiased"  # or "k3"
    use_mask: bool = True

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.kl_estimator not in ("unbiased", "k3"):
            raise ValueError(f"unknown KL estimator {self.kl_estimator!r}")


@dataclass
class RolloutGroup:
    question: int
    outputs: list  # SamplingRecords
    rewards: np.ndarray

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if len(self.outputs) < 2 or len(self.outputs) != self.rewards.size:
            raise ValueError("a group needs >= 2 outputs with one reward each")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")


@dataclass
class PolicyEval:
    """Per-output arrays of token log-probabilities under the old, current and
    reference policies."""

    old: list
    cur: list
    ref: list

    def __post_init__(self):
        for name in ("old", "cur", "ref"):
            setattr(self, name, [np.asarray(a, dtype=np.float64) for a in getattr(self, name)])
        if not len(self.old) == len(self.cur) == len(self.ref):
            raise ValueError("old/cur/ref must cover the same outputs")
        for i, (a, b, c) in enumerate(zip(self.old, self.cur, self.ref)):
            if not a.shape == b.shape == c.shape:
                raise ValueError(f"output {i}: log-prob lengths differ")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
                raise ValueError(f"output {i}: non-finite log-probabilities")


class EstimatorOverflow(ArithmeticError):
    pass


def group_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group size must be >= 2")
    return r - r.mean()


def _exp(x, where: str):
    x = np.asarray(x, dtype=np.float64)
    if np.any(x > _MAX_EXP):
        raise EstimatorOverflow(f"log-ratio overflow at {where}")
    return np.exp(x)


def unbiased_kl_terms(old, cur, ref) -> np.ndarray:
    """(pi/pi_old) * (pi_ref/pi - log(pi_ref/pi) - 1), elementwise from log-probs."""
    log_ref_cur = np.asarray(ref) - np.asarray(cur)
    w = _exp(np.asarray(cur) - np.asarray(old), "importance ratio")
    return w * (_exp(log_ref_cur, "reference ratio") - log_ref_cur - 1.0)


def k3_terms(cur, ref) -> np.ndarray:
    log_ref_cur = np.asarray(ref) - np.asarray(cur)
    return _exp(log_ref_cur, "reference ratio") - log_ref_cur - 1.0


def unbiased_kl_estimate(ev: PolicyEval, i: int, t: int) -> float:
    try:
        return float(unbiased_kl_terms(ev.old[i][t], ev.cur[i][t], ev.ref[i][t]))
    except EstimatorOverflow as exc:
        raise EstimatorOverflow(f"{exc} (output {i}, token {t})") from None


def offpolicy_mask(ev: PolicyEval, adv, delta: float) -> list:
    """Per output, an all-0 token mask for negative-advantage sequences whose mean
    old/current log-ratio exceeds delta; all-1 otherwise."""
    adv = np.asarray(adv, dtype=np.float64)
    out = []
    for i, (lo, lc) in enumerate(zip(ev.old, ev.cur)):
        div = float(np.mean(lo - lc))
        drop = adv[i] < 0 and div > delta
        out.append(np.full(lo.size, 0.0 if drop else 1.0))
    return out


@dataclass
class GrpoResult:
    value: float
    dlogprob: list  # per group, per output: d value / d logprob_cur
    advantages: list
    masks: list

    @property
    def masked_fraction(self) -> float:
        seqs = [m[0] for g in self.masks for m in g if m.size]
        return float(np.mean([s == 0 for s in seqs])) if seqs else 0.0


def _surrogate_and_grad(r: np.ndarray, a: float, eps: float):
    unclipped = r * a
    clipped = np.clip(r, 1 - eps, 1 + eps) * a
    value = np.minimum(unclipped, clipped)
    # the min picks the clipped branch (zero slope) only outside the trust region
    flat = ((r > 1 + eps) & (a > 0)) | ((r < 1 - eps) & (a < 0))
    return value, np.where(flat, 0.0, r * a)


def grpo_objective(groups: Sequence[RolloutGroup], evals: Sequence[PolicyEval], cfg: GrpoConfig) -> GrpoResult:
    """Masked GRPO objective (to be maximized) and its gradient w.r.t. each
    current-policy token log-prob. Advantages, masks, old and reference
    log-probs are constants."""
    if not groups:
        raise ValueError("no groups")
    total = 0.0
    dlog, advs, masks = [], [], []
    for g, (grp, ev) in enumerate(zip(groups, evals)):
        G = len(grp.outputs)
        for i, lo in enumerate(ev.old):
            if lo.size == 0:
                raise ValueError(f"group {g}, output {i} is empty")
        adv = group_advantages(grp.rewards)
        if cfg.use_mask:
            mask = offpolicy_mask(ev, adv, cfg.delta)
        else:
            mask = [np.ones(lo.size) for lo in ev.old]
        group_value = 0.0
        grads = []
        for i in range(G):
            lo, lc, lr = ev.old[i], ev.cur[i], ev.ref[i]
            n = lo.size
            r = _exp(lc - lo, f"group {g}, output {i}")
            surr, dsurr = _surrogate_and_grad(r, adv[i], cfg.epsilon)
            if cfg.kl_estimator == "unbiased":
                kl = unbiased_kl_terms(lo, lc, lr)
                dkl = r * (lc - lr)
            else:
                kl = k3_terms(lc, lr)
                dkl = 1.0 - np.exp(lr - lc)
            group_value += np.sum(surr * mask[i] - cfg.beta * kl) / n
            grads.append((dsurr * mask[i] - cfg.beta * dkl) / (n * G * len(groups)))
        total += group_value / G
        dlog.append(grads)
        advs.append(adv)
        masks.append(mask)
    return GrpoResult(total / len(groups), dlog, advs, masks)


def evaluate_group(policy: Policy, ref_policy: Policy, grp: RolloutGroup,
                   keep_sampling_mask: bool = True, keep_routing: bool = True) -> PolicyEval:
    old, cur, ref = [], [], []
    for rec in grp.outputs:
        old.append(np.array(rec.old_logprobs))
        cur.append(np.array([_token_logprob(policy, rec, t, keep_sampling_mask, keep_routing)
                             for t in range(len(rec))]))
        ref.append(np.array([_token_logprob(ref_policy, rec, t, keep_sampling_mask, keep_routing)
                             for t in range(len(rec))]))
    return PolicyEval(old, cur, ref)


def _step_inputs(policy: Policy, rec: SamplingRecord, t: int, keep_sampling_mask: bool, keep_routing: bool):
    routing = rec.routing[t] if (keep_routing and rec.routing is not None) else None
    logits, used = policy.forward(rec.contexts[t], routing)
    mask = rec.masks[t] if keep_sampling_mask else np.ones(policy.V, dtype=bool)
    return logits, mask, used


def _token_logprob(policy, rec, t, keep_sampling_mask, keep_routing) -> float:
    logits, mask, _ = _step_inputs(policy, rec, t, keep_sampling_mask, keep_routing)
    return float(masked_log_softmax(logits, mask, policy.temperature)[rec.tokens[t]])


def objective_and_grad(policy: Policy, ref_policy: Policy, groups: Sequence[RolloutGroup], cfg: GrpoConfig,
                       keep_sampling_mask: bool = True, keep_routing: bool = True):
    """Objective value, its gradient w.r.t. the policy's flat parameters, and the
    evaluation details."""
    evals = [evaluate_group(policy, ref_policy, g, keep_sampling_mask, keep_routing) for g in groups]
    res = grpo_objective(groups, evals, cfg)
    grad = np.zeros_like(policy.flat_params())
    for grp, dl in zip(groups, res.dlogprob):
        for rec, d in zip(grp.outputs, dl):
            for t in range(len(rec)):
                if d[t] == 0.0:
                    continue
                logits, mask, used = _step_inputs(policy, rec, t, keep_sampling_mask, keep_routing)
                q = np.exp(masked_log_softmax(logits, mask, policy.temperature))
                dlogits = -q
                dlogits[rec.tokens[t]] += 1.0
                policy.backward(rec.contexts[t], d[t] * dlogits / policy.temperature, used, grad)
    return res.value, grad, res, evals


@dataclass
class ScriptedEnv:
    """Reward = fraction of positions whose token matches the scripted target."""

    targets: np.ndarray  # (questions, max_len)

    def __post_init__(self):
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=int))

    @property
    def questions(self) -> int:
        return self.targets.shape[0]

    @property
    def max_len(self) -> int:
        return self.targets.shape[1]

    def reward(self, question: int, tokens) -> float:
        return float(np.mean(np.asarray(tokens) == self.targets[question]))


@dataclass
class TrainConfig:
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    lr: float = 0.1
    G: int = 8
    inner_steps: int = 1
    keep_sampling_mask: bool = True
    keep_routing: bool = True


TRACE_FIELDS = ("step", "mean_reward", "objective", "mean_abs_logratio", "masked_fraction")


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite GRPO objective at step {step}")
        self.step = step


def train_toy_policy(env: ScriptedEnv, policy: Policy, cfg: TrainConfig, steps: int, seed: int) -> list[dict]:
    """Sample a group per question, then take ``inner_steps`` gradient-ascent
    updates on the same batch. Returns one trace row per outer step.

    ``mean_abs_logratio`` is measured after the updates, between the sampling
    log-probs and the updated policy, over all sampled tokens.
    """
    ref = policy
    trace = []
    for step in range(steps):
        groups = []
        for q in range(env.questions):
            recs = sample_group(policy, q, cfg.G, env.max_len, cfg.sampling, seed, namespace=("step", step))
            groups.append(RolloutGroup(q, recs, [env.reward(q, r.tokens) for r in recs]))
        first_value = None
        res = None
        for _ in range(cfg.inner_steps):
            value, grad, res, _ = objective_and_grad(policy, ref, groups, cfg.grpo,
                                                     cfg.keep_sampling_mask, cfg.keep_routing)
            if not (np.isfinite(value) and np.all(np.isfinite(grad))):
                raise TrainingDivergence(step)
            if first_value is None:
                first_value = value
            with np.errstate(invalid="ignore", over="ignore"):
                params = policy.flat_params() + cfg.lr * grad
            if not np.all(np.isfinite(params)):
                raise TrainingDivergence(step)
            policy = policy.with_params(params)
        evals = [evaluate_group(policy, ref, g, cfg.keep_sampling_mask, cfg.keep_routing) for g in groups]
        gaps = np.concatenate([lo - lc for ev in evals for lo, lc in zip(ev.old, ev.cur)])
        trace.append({
            "step": step,
            "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
            "objective": float(first_value),
            "mean_abs_logratio": float(np.mean(np.abs(gaps))),
            "masked_fraction": res.masked_fraction if res is not None else 0.0,
        })
    return trace


def trace_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRACE_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def uniform_tabular(contexts: int, V: int, temperature: float = 1.0) -> TabularPolicy:
    return TabularPolicy(np.zeros((contexts, V)), temperature)
