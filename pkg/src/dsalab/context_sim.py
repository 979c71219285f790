"""Thinking-retention context assembly and a Monte-Carlo simulator of
context-management strategies for a search agent under a token window.

The simulated agent takes steps. Each step appends an assistant tool call
(with a reasoning block) and a tool result, and with some probability the
result contains one evidence item the agent still lacks. A task succeeds once
all K evidence items are held at the same time, either in live tool results
or in the persistent notes. When usage reaches the trigger fraction of the
window the chosen strategy frees space; without management the trajectory
fails as soon as the window fills.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import rng as rngmod

ROLES = ("system", "user", "assistant", "tool")


@dataclass(frozen=True)
class Message:
    role: str
    body: str = ""
    token_cost: int = 0
    reasoning: Optional[str] = None
    reasoning_cost: int = 0
    tool_call: bool = False
    evidence: frozenset = frozenset()

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.token_cost < 0 or self.reasoning_cost < 0:
            raise ValueError("token costs must be nonnegative")
        if self.reasoning is not None and self.role != "assistant":
            raise ValueError("only assistant messages carry reasoning")

    @property
    def live_cost(self) -> int:
        return self.token_cost + (self.reasoning_cost if self.reasoning is not None else 0)

    @property
    def is_tool_history(self) -> bool:
        return self.role == "tool" or (self.role == "assistant" and self.tool_call)


def assemble_context(messages: Sequence[Message]) -> list[Message]:
    """Drop an assistant's reasoning only if a user message comes after it.
    Tool calls and tool results always stay, in order."""
    last_user = max((i for i, m in enumerate(messages) if m.role == "user"), default=-1)
    out = []
    for i, m in enumerate(messages):
        if m.role == "assistant" and m.reasoning is not None and i < last_user:
            m = replace(m, reasoning=None, reasoning_cost=0)
        out.append(m)
    return out


@dataclass
class TrajectoryState:
    messages: list
    notes: frozenset = frozenset()
    notes_cost: int = 0
    steps: int = 0

    @property
    def tokens_used(self) -> int:
        live = sum(m.live_cost for m in assemble_context(self.messages))
        return live + (self.notes_cost if self.notes else 0)

    def held(self) -> frozenset:
        found = set(self.notes)
        for m in self.messages:
            found |= m.evidence
        return frozenset(found)


@dataclass(frozen=True)
class Budget:
    window: int
    trigger_fraction: float = 0.8

    def __post_init__(self):
        if self.window <= 0:
            raise ValueError("window must be positive")
        if not 0 < self.trigger_fraction < 1:
            raise ValueError("trigger_fraction must lie in (0, 1)")

    @property
    def trigger(self) -> float:
        return self.trigger_fraction * self.window


@dataclass(frozen=True)
class Strategy:
    kind: str
    n: int = 1

    KINDS = ("Summary", "Discard75", "DiscardAll", "ParallelFewestStep", "NoManagement")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind == "ParallelFewestStep" and self.n < 1:
            raise ValueError("ParallelFewestStep needs N >= 1")

    def __str__(self) -> str:
        return f"ParallelFewestStep({self.n})" if self.kind == "ParallelFewestStep" else self.kind

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        m = re.fullmatch(r"\s*ParallelFewestStep\((\d+)\)\s*", text)
        if m:
            return cls("ParallelFewestStep", int(m.group(1)))
        return cls(text.strip())


@dataclass(frozen=True)
class SyntheticTask:
    K: int = 4
    find_prob: float = 0.25
    call_cost: tuple = (40, 120)  # inclusive uniform range
    result_cost: tuple = (200, 800)
    reasoning_cost: tuple = (50, 300)
    fidelity: float = 0.8
    system_cost: int = 300
    user_cost: int = 100
    summary_cost: int = 400
    notes_cost: int = 100

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        for name in ("find_prob", "fidelity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("call_cost", "result_cost", "reasoning_cost"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be a range 0 <= lo <= hi")

    @property
    def max_step_cost(self) -> int:
        return self.call_cost[1] + self.result_cost[1] + self.reasoning_cost[1]


def initial_state(task: SyntheticTask) -> TrajectoryState:
    return TrajectoryState([
        Message("system", "search agent", task.system_cost),
        Message("user", "question", task.user_cost),
    ])


def _drop_tool_pairs(messages: list, n_pairs: int) -> list:
    """Remove the oldest ``n_pairs`` tool calls together with their results."""
    out, removed, dropping = [], 0, False
    for m in messages:
        if m.role == "assistant" and m.tool_call:
            dropping = removed < n_pairs
            if dropping:
                removed += 1
                continue
        elif m.role == "tool" and dropping:
            continue
        else:
            dropping = False
        out.append(m)
    return out


class ContextOverflow(RuntimeError):
    pass


def apply_strategy(state: TrajectoryState, strategy: Strategy, task: SyntheticTask,
                   rng: Optional[np.random.Generator], window: Optional[int] = None) -> TrajectoryState:
    if strategy.kind in ("NoManagement", "ParallelFewestStep"):
        raise ValueError(f"{strategy} does not manage a single context; the caller must truncate")
    base = [m for m in state.messages if not m.is_tool_history]
    if strategy.kind == "Summary":
        held = sorted(state.held())
        keep = frozenset(e for e, u in zip(held, rng.random(len(held))) if u < task.fidelity)
        new = TrajectoryState(base, keep, task.summary_cost, state.steps)
    elif strategy.kind == "Discard75":
        pairs = sum(1 for m in state.messages if m.role == "assistant" and m.tool_call)
        new = TrajectoryState(_drop_tool_pairs(state.messages, (3 * pairs) // 4), state.notes,
                              state.notes_cost, state.steps)
    else:  # DiscardAll: findings carry over into the notes
        new = TrajectoryState(base, state.held(), task.notes_cost, state.steps)
    if window is not None and new.tokens_used >= window:
        raise ContextOverflow(f"{strategy} left {new.tokens_used} tokens in a {window}-token window")
    return new


@dataclass(frozen=True)
class TrialResult:
    success: bool
    steps: int
    total_tokens: int
    interventions: int = 0
    max_post_strategy_tokens: int = 0


def _single_trajectory(task: SyntheticTask, budget: Budget, strategy: Strategy, max_steps: int,
                       seed: int) -> TrialResult:
    step_rng = rngmod.stream(seed, "ctx", "steps")
    strat_rng = rngmod.stream(seed, "ctx", "strategy")
    state = initial_state(task)
    total = 0
    interventions = 0
    post_max = 0
    for step in range(1, max_steps + 1):
        # fixed draw count per step keeps trajectories aligned across max_steps
        call = int(step_rng.integers(task.call_cost[0], task.call_cost[1], endpoint=True))
        result = int(step_rng.integers(task.result_cost[0], task.result_cost[1], endpoint=True))
        think = int(step_rng.integers(task.reasoning_cost[0], task.reasoning_cost[1], endpoint=True))
        u = float(step_rng.random())
        missing = sorted(set(range(task.K)) - state.held())
        found = frozenset([missing[0]]) if (missing and u < task.find_prob) else frozenset()
        state.messages.append(Message("assistant", "call", call, reasoning="...", reasoning_cost=think,
                                      tool_call=True))
        state.messages.append(Message("tool", "result", result, evidence=found))
        state.steps = step
        total += call + result + think
        if state.tokens_used >= budget.window:
            return TrialResult(False, step, total, interventions, post_max)
        if len(state.held()) == task.K:
            return TrialResult(True, step, total, interventions, post_max)
        if strategy.kind != "NoManagement" and state.tokens_used >= budget.trigger:
            state = apply_strategy(state, strategy, task, strat_rng, budget.window)
            interventions += 1
            post_max = max(post_max, state.tokens_used)
    return TrialResult(False, max_steps, total, interventions, post_max)


def parallel_member_seed(seed: int, member: int) -> int:
    return rngmod.derive_seed(seed, "parallel", member)


def run_trajectory(task: SyntheticTask, budget: Budget, strategy: Strategy, max_steps: int,
                   seed: int) -> TrialResult:
    """One trial. ParallelFewestStep(N) runs N unmanaged trajectories on derived
    seeds and keeps the successful one with the fewest steps; its token count is
    the sum over all N."""
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    base = task.system_cost + task.user_cost
    if base + max(task.summary_cost, task.notes_cost) >= budget.trigger:
        raise ValueError("prompt plus notes already exceed the trigger; no strategy can make room")
    if strategy.kind != "ParallelFewestStep":
        return _single_trajectory(task, budget, strategy, max_steps, seed)
    members = [_single_trajectory(task, budget, Strategy("NoManagement"), max_steps,
                                  parallel_member_seed(seed, m)) for m in range(strategy.n)]
    total = sum(r.total_tokens for r in members)
    wins = [r for r in members if r.success]
    if wins:
        return TrialResult(True, min(r.steps for r in wins), total)
    return TrialResult(False, max(r.steps for r in members), total)


def trial_seed(seed: int, trial: int) -> int:
    return rngmod.derive_seed(seed, "trial", trial)


EXPERIMENT_FIELDS = ("strategy", "window", "success_rate", "mean_steps", "mean_tokens")


def run_experiment(task: SyntheticTask, strategies: Sequence[Strategy], windows: Sequence[int], trials: int,
                   seed: int, max_steps: int, trigger_fraction: float = 0.8) -> list[dict]:
    """Every (strategy, window) cell reuses the same trial seeds, so cells are paired."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    seeds = [trial_seed(seed, j) for j in range(trials)]
    rows = []
    for strategy in strategies:
        for window in windows:
            budget = Budget(int(window), trigger_fraction)
            results = [run_trajectory(task, budget, strategy, max_steps, s) for s in seeds]
            rows.append({
                "strategy": str(strategy),
                "window": int(window),
                "success_rate": sum(r.success for r in results) / trials,
                "mean_steps": sum(r.steps for r in results) / trials,
                "mean_tokens": sum(r.total_tokens for r in results) / trials,
            })
    return rows


def experiment_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EXPERIMENT_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
