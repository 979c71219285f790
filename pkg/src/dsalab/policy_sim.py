"""Toy policies that record what a GRPO update must replay.

A rollout stores, per step, the truncation mask it sampled under and (for the
mixture-of-experts policy) which experts were routed. Training then evaluates
the current policy on exactly that action subset and those experts.

Sampling draws one uniform u per step from the rollout's own stream and picks
the first token whose cumulative masked probability exceeds u.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as rngmod
from .numerics import NumericsError, softmax_rows, topk_indices


@dataclass(frozen=True)
class RoutingRecord:
    experts: tuple  # sorted expert indices for one step

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(int(e) for e in self.experts))


class Policy:
    """Maps a context id to vocabulary logits; parameters are one flat vector."""

    V: int
    temperature: float

    def forward(self, context: int, routing: Optional[RoutingRecord] = None):
        raise NotImplementedError

    def flat_params(self) -> np.ndarray:
        raise NotImplementedError

    def with_params(self, flat) -> "Policy":
        raise NotImplementedError

    def backward(self, context: int, dlogits: np.ndarray, routing: Optional[RoutingRecord], out: np.ndarray) -> None:
        """Accumulate d(objective)/d(params) into ``out`` given d/d(logits)."""
        raise NotImplementedError


@dataclass
class TabularPolicy(Policy):
    logits: np.ndarray  # (contexts, V)
    temperature: float = 1.0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or self.logits.shape[1] < 2:
            raise ValueError(f"logits must be (contexts, V>=2), got {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def V(self) -> int:
        return self.logits.shape[1]

    def forward(self, context, routing=None):
        return self.logits[context], None

    def flat_params(self):
        return self.logits.ravel().copy()

    def with_params(self, flat):
        return TabularPolicy(np.asarray(flat, dtype=np.float64).reshape(self.logits.shape), self.temperature)

    def backward(self, context, dlogits, routing, out):
        V = self.V
        out[context * V:(context + 1) * V] += dlogits


@dataclass
class ToyMoEPolicy(Policy):
    router_logits: np.ndarray  # (contexts, E)
    experts: np.ndarray  # (E, V, D)
    features: np.ndarray  # (contexts, D), fixed
    top_r: int = 1
    temperature: float = 1.0

    def __post_init__(self):
        self.router_logits = np.asarray(self.router_logits, dtype=np.float64)
        self.experts = np.asarray(self.experts, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        E = self.experts.shape[0]
        if self.router_logits.shape[1] != E:
            raise ValueError("router width must equal expert count")
        if not 1 <= self.top_r <= E:
            raise ValueError(f"top_r must lie in 1..{E}, got {self.top_r}")
        if self.experts.shape[1] < 2:
            raise ValueError("vocabulary must have at least 2 tokens")

    @property
    def V(self) -> int:
        return self.experts.shape[1]

    @property
    def E(self) -> int:
        return self.experts.shape[0]

    @classmethod
    def random(cls, contexts: int, E: int, V: int, D: int, top_r: int, rng: np.random.Generator,
               temperature: float = 1.0) -> "ToyMoEPolicy":
        return cls(rng.normal(size=(contexts, E)), rng.normal(size=(E, V, D)) / np.sqrt(D),
                   rng.normal(size=(contexts, D)), top_r, temperature)

    def route(self, context: int) -> RoutingRecord:
        return RoutingRecord(topk_indices(self.router_logits[context], self.top_r))

    def gates(self, context: int, record: RoutingRecord) -> np.ndarray:
        return softmax_rows(self.router_logits[context, list(record.experts)])[0]

    def forward(self, context, routing=None):
        if routing is None:
            return forward_with_routing(self, context)
        return forward_replay(self, context, routing), routing

    def flat_params(self):
        return np.concatenate([self.router_logits.ravel(), self.experts.ravel()])

    def with_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        n = self.router_logits.size
        return ToyMoEPolicy(flat[:n].reshape(self.router_logits.shape), flat[n:].reshape(self.experts.shape),
                            self.features, self.top_r, self.temperature)

    def backward(self, context, dlogits, routing, out):
        if routing is None:
            routing = self.route(context)
        idx = list(routing.experts)
        x = self.features[context]
        g = self.gates(context, routing)
        y = self.experts[idx] @ x  # (r, V)
        dg = y @ dlogits
        E, V, D = self.experts.shape
        n = self.router_logits.size
        out[context * E + np.asarray(idx)] += g * (dg - g @ dg)
        expert_grad = out[n:].reshape(E, V, D)
        for gi, e in zip(g, idx):
            expert_grad[e] += gi * np.outer(dlogits, x)


def _check_record(moe: ToyMoEPolicy, record: RoutingRecord) -> None:
    ex = record.experts
    if len(ex) != moe.top_r or len(set(ex)) != len(ex) or list(ex) != sorted(ex):
        raise NumericsError(f"routing record {ex} is not {moe.top_r} sorted distinct experts")
    if min(ex) < 0 or max(ex) >= moe.E:
        raise NumericsError(f"routing record {ex} names experts outside 0..{moe.E - 1}")


def forward_with_routing(moe: ToyMoEPolicy, context: int) -> tuple[np.ndarray, RoutingRecord]:
    record = moe.route(context)
    return forward_replay(moe, context, record), record


def forward_replay(moe: ToyMoEPolicy, context: int, record: RoutingRecord) -> np.ndarray:
    """Vocabulary logits computed with the recorded experts, gates renormalized over them."""
    _check_record(moe, record)
    g = moe.gates(context, record)
    x = moe.features[context]
    return sum(gi * (moe.experts[e] @ x) for gi, e in zip(g, record.experts))


def truncation_mask(probs, top_p: float = 1.0, top_k: int = 0) -> np.ndarray:
    """Top-k filter, then the shortest descending-probability prefix holding top_p mass.

    ``top_k <= 0`` disables the top-k filter. At least one token is always kept.
    """
    p = np.asarray(probs, dtype=np.float64)
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    order = np.argsort(-p, kind="stable")
    if top_k > 0:
        order = order[:top_k]
    if top_p < 1.0:
        cum = np.cumsum(p[order])
        n = int(np.searchsorted(cum, top_p, side="left")) + 1
        order = order[: min(n, order.size)]
    mask = np.zeros(p.size, dtype=bool)
    mask[order] = True
    return mask


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Log-probabilities renormalized over ``mask``; -inf outside it."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    zm = np.where(mask, z, -np.inf)
    m = zm.max()
    return zm - (m + np.log(np.sum(np.exp(zm - m))))


def masked_logprob(policy: Policy, context: int, token: int, mask, routing: Optional[RoutingRecord] = None) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask[token]:
        raise NumericsError(f"token {token} lies outside the sampling mask")
    logits, _ = policy.forward(context, routing)
    return float(masked_log_softmax(logits, mask, policy.temperature)[token])


@dataclass
class SamplingConfig:
    top_p: float = 1.0
    top_k: int = 0
    greedy: bool = False
    perturb: float = 0.0  # std of inference-side logit noise


@dataclass
class SamplingRecord:
    tokens: list
    contexts: list
    old_logprobs: list
    masks: list  # per step, bool array over the vocabulary
    routing: Optional[list] = None  # per step RoutingRecord, MoE policies only

    def __len__(self) -> int:
        return len(self.tokens)

    def to_line(self) -> str:
        parts = [
            "tokens=" + ",".join(str(t) for t in self.tokens),
            "contexts=" + ",".join(str(c) for c in self.contexts),
            "logprobs=" + ",".join(repr(float(x)) for x in self.old_logprobs),
            "masks=" + ";".join(_rle_encode(m) for m in self.masks),
            "routing=" + ("-" if self.routing is None else ";".join(",".join(map(str, r.experts)) for r in self.routing)),
        ]
        return "\t".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "SamplingRecord":
        fields = dict(part.split("=", 1) for part in line.rstrip("\n").split("\t"))

        def ints(s):
            return [int(x) for x in s.split(",")] if s else []

        routing = None
        if fields["routing"] != "-":
            routing = [RoutingRecord(ints(r)) for r in fields["routing"].split(";")] if fields["routing"] else []
        return cls(
            tokens=ints(fields["tokens"]),
            contexts=ints(fields["contexts"]),
            old_logprobs=[float(x) for x in fields["logprobs"].split(",")] if fields["logprobs"] else [],
            masks=[_rle_decode(m) for m in fields["masks"].split(";")] if fields["masks"] else [],
            routing=routing,
        )


def _rle_encode(mask) -> str:
    """``<first value 0|1>:<run lengths>``, e.g. [1,1,0,1] -> ``1:2,1,1``."""
    m = np.asarray(mask, dtype=bool)
    change = np.flatnonzero(m[1:] != m[:-1]) + 1
    bounds = np.concatenate([[0], change, [m.size]])
    return f"{int(m[0])}:" + ",".join(str(int(n)) for n in np.diff(bounds))


def _rle_decode(text: str) -> np.ndarray:
    first, runs = text.split(":")
    value = bool(int(first))
    out = []
    for n in runs.split(","):
        out.extend([value] * int(n))
        value = not value
    return np.array(out, dtype=bool)


def write_records(records: Sequence[SamplingRecord]) -> str:
    return "".join(r.to_line() + "\n" for r in records)


def read_records(text: str) -> list[SamplingRecord]:
    return [SamplingRecord.from_line(line) for line in text.splitlines() if line.strip()]


def sample_rollout(policy: Policy, contexts: Sequence[int], cfg: SamplingConfig,
                   gen: np.random.Generator, noise: Optional[np.random.Generator] = None) -> SamplingRecord:
    tokens, lps, masks, routes = [], [], [], []
    moe = isinstance(policy, ToyMoEPolicy)
    for c in contexts:
        if moe and cfg.perturb > 0:
            # inference-side router drift: route on perturbed router logits
            jitter = policy.router_logits[c] + cfg.perturb * noise.normal(size=policy.E)
            record = RoutingRecord(topk_indices(jitter, policy.top_r))
            logits = forward_replay(policy, c, record)
        else:
            logits, record = policy.forward(c)
        logits = np.array(logits, dtype=np.float64)
        if cfg.perturb > 0:
            logits = logits + cfg.perturb * noise.normal(size=logits.size)
        probs = softmax_rows(logits / policy.temperature)[0]
        mask = truncation_mask(probs, cfg.top_p, 1 if cfg.greedy else cfg.top_k)
        logp = masked_log_softmax(logits, mask, policy.temperature)
        if cfg.greedy:
            tok = int(np.flatnonzero(mask)[0])
        else:
            cdf = np.cumsum(np.exp(logp))
            tok = int(np.searchsorted(cdf, gen.random() * cdf[-1], side="right"))
            tok = min(tok, logp.size - 1)
            while not mask[tok]:  # guards the cdf tail against rounding
                tok -= 1
        tokens.append(tok)
        lps.append(float(logp[tok]))
        masks.append(mask)
        routes.append(record)
    return SamplingRecord(tokens, list(contexts), lps, masks, routes if moe else None)


def sample_group(policy: Policy, question: int, G: int, max_len: int, cfg: SamplingConfig, seed: int,
                 namespace: tuple = ()) -> list[SamplingRecord]:
    """G rollouts for one question; rollout i draws from stream (seed, *namespace, "rollout", i).

    Contexts are positional: step t of question q uses context ``q * max_len + t``.
    """
    if G < 2:
        raise ValueError("a group needs at least two rollouts")
    contexts = [question * max_len + t for t in range(max_len)]
    out = []
    for i in range(G):
        gen = rngmod.stream(seed, *namespace, "rollout", question, i)
        noise = rngmod.stream(seed, *namespace, "perturb", question, i)
        out.append(sample_rollout(policy, contexts, cfg, gen, noise))
    return out
