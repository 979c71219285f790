import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsalab.context_sim import (
    EXPERIMENT_FIELDS,
    Budget,
    ContextOverflow,
    Message,
    Strategy,
    SyntheticTask,
    TrajectoryState,
    apply_strategy,
    assemble_context,
    experiment_csv,
    initial_state,
    parallel_member_seed,
    run_experiment,
    run_trajectory,
    trial_seed,
)
from dsalab.context_sim import _single_trajectory

SYS = Message("system", "sys", 10)
USER = Message("user", "q", 5)


def asst(cost=3, think=7):
    return Message("assistant", "call", cost, reasoning="think", reasoning_cost=think, tool_call=True)


def tool(cost=20, evidence=()):
    return Message("tool", "result", cost, evidence=frozenset(evidence))


def test_reasoning_kept_without_later_user():
    msgs = [SYS, USER, asst(), tool(), asst()]
    out = assemble_context(msgs)
    assert out[2].reasoning == "think" and out[4].reasoning == "think"


def test_reasoning_dropped_after_new_user():
    msgs = [SYS, USER, asst(), tool(), Message("user", "follow-up", 4), asst()]
    out = assemble_context(msgs)
    assert out[2].reasoning is None and out[2].reasoning_cost == 0
    assert out[5].reasoning == "think"
    assert out[3] == msgs[3]
    assert [m.role for m in out] == [m.role for m in msgs]


def test_no_reasoning_is_identity():
    msgs = [SYS, USER, Message("assistant", "a", 3), tool(), Message("user", "b", 1)]
    assert assemble_context(msgs) == msgs


message_lists = st.lists(
    st.one_of(
        st.builds(Message, st.just("user"), st.just("u"), st.integers(0, 50)),
        st.builds(Message, st.just("tool"), st.just("t"), st.integers(0, 50)),
        st.builds(Message, st.just("assistant"), st.just("a"), st.integers(0, 50), st.sampled_from([None, "r"]),
                  st.integers(0, 50), st.booleans()),
    ),
    max_size=20,
)


@settings(max_examples=300)
@given(message_lists)
def test_assemble_idempotent_and_preserves_tools(msgs):
    once = assemble_context(msgs)
    assert assemble_context(once) == once
    assert [m for m in once if m.role == "tool"] == [m for m in msgs if m.role == "tool"]
    assert [m.tool_call for m in once if m.role == "assistant"] == [m.tool_call for m in msgs if m.role == "assistant"]
    assert len(once) == len(msgs)


def test_message_validation():
    with pytest.raises(ValueError):
        Message("tool", "x", 1, reasoning="no")
    with pytest.raises(ValueError):
        Message("narrator")
    with pytest.raises(ValueError):
        Message("user", "x", -1)


def test_tokens_used_counts_live_reasoning_and_notes():
    st_ = TrajectoryState([SYS, USER, asst(3, 7), tool(20)], frozenset({1}), 9)
    assert st_.tokens_used == 10 + 5 + 3 + 7 + 20 + 9
    st_.messages.append(Message("user", "next", 2))
    assert st_.tokens_used == 10 + 5 + 3 + 20 + 2 + 9


TASK = SyntheticTask()


def test_discard_all_on_tool_only_state():
    state = TrajectoryState([SYS, USER, asst(), tool(), asst(), tool()])
    out = apply_strategy(state, Strategy("DiscardAll"), TASK, None)
    assert out.tokens_used == SYS.token_cost + USER.token_cost
    assert out.notes == frozenset()


def test_discard_all_keeps_findings_in_notes():
    state = TrajectoryState([SYS, USER, asst(), tool(evidence={2}), asst(), tool(evidence={0})])
    out = apply_strategy(state, Strategy("DiscardAll"), TASK, None)
    assert out.held() == frozenset({0, 2})
    assert out.tokens_used == 15 + TASK.notes_cost


def test_discard75_removes_three_of_four_pairs():
    pairs = [(asst(i + 1), tool(10 * (i + 1), {i})) for i in range(4)]
    state = TrajectoryState([SYS, USER] + [m for p in pairs for m in p])
    out = apply_strategy(state, Strategy("Discard75"), TASK, None)
    assert out.messages == [SYS, USER, pairs[3][0], pairs[3][1]]


@pytest.mark.parametrize("n,removed", [(1, 0), (2, 1), (3, 2), (5, 3), (8, 6)])
def test_discard75_rounds_down(n, removed):
    state = TrajectoryState([SYS, USER] + [m for _ in range(n) for m in (asst(), tool())])
    out = apply_strategy(state, Strategy("Discard75"), TASK, None)
    assert sum(m.role == "tool" for m in out.messages) == n - removed


@pytest.mark.parametrize("fidelity,expected", [(1.0, {0, 1, 3}), (0.0, set())])
def test_summary_boundary_fidelity(fidelity, expected, rng):
    task = SyntheticTask(fidelity=fidelity)
    state = TrajectoryState([SYS, USER, asst(), tool(evidence={0}), asst(), tool(evidence={1, 3})])
    out = apply_strategy(state, Strategy("Summary"), task, rng)
    assert out.notes == frozenset(expected)
    assert [m.role for m in out.messages] == ["system", "user"]


def test_no_management_rejected():
    with pytest.raises(ValueError):
        apply_strategy(initial_state(TASK), Strategy("NoManagement"), TASK, None)


def test_strategy_parse_and_str():
    s = Strategy.parse("ParallelFewestStep(3)")
    assert (s.kind, s.n, str(s)) == ("ParallelFewestStep", 3, "ParallelFewestStep(3)")
    assert Strategy.parse(" Summary ").kind == "Summary"
    with pytest.raises(ValueError):
        Strategy.parse("Magic")
    with pytest.raises(ValueError):
        Strategy("ParallelFewestStep", 0)


def test_budget_validation():
    assert Budget(1000).trigger == 800
    with pytest.raises(ValueError):
        Budget(1000, 1.0)
    with pytest.raises(ValueError):
        Budget(0)


def test_overflow_guard_reports():
    state = TrajectoryState([SYS, USER, asst(), tool(evidence={0})])
    task = SyntheticTask(summary_cost=10_000, fidelity=1.0)
    with pytest.raises(ContextOverflow):
        apply_strategy(state, Strategy("Summary"), task, np.random.default_rng(0), 1000)


@pytest.mark.parametrize("kind", ["Summary", "Discard75", "DiscardAll"])
def test_unreachable_trigger_matches_no_management(kind):
    window = 60 * TASK.max_step_cost + 10_000
    for seed in range(20):
        a = run_trajectory(TASK, Budget(window), Strategy(kind), 60, seed)
        b = run_trajectory(TASK, Budget(window), Strategy("NoManagement"), 60, seed)
        assert a == b and a.interventions == 0


def test_parallel_one_is_derived_single():
    for seed in range(20):
        a = run_trajectory(TASK, Budget(4000), Strategy("ParallelFewestStep", 1), 60, seed)
        b = _single_trajectory(TASK, Budget(4000), Strategy("NoManagement"), 60, parallel_member_seed(seed, 0))
        assert (a.success, a.steps, a.total_tokens) == (b.success, b.steps, b.total_tokens)


def test_parallel_takes_fewest_steps_among_successes():
    for seed in range(30):
        res = run_trajectory(TASK, Budget(8000), Strategy("ParallelFewestStep", 5), 60, seed)
        members = [_single_trajectory(TASK, Budget(8000), Strategy("NoManagement"), 60, parallel_member_seed(seed, m))
                   for m in range(5)]
        wins = [m.steps for m in members if m.success]
        assert res.success == bool(wins)
        if wins:
            assert res.steps == min(wins)
        assert res.total_tokens == sum(m.total_tokens for m in members)


def test_deterministic_task():
    res = run_trajectory(SyntheticTask(K=3, find_prob=1.0), Budget(100_000), Strategy("NoManagement"), 50, 0)
    assert (res.success, res.steps) == (True, 3)


def test_seed_determinism():
    for kind in ("Summary", "Discard75", "DiscardAll", "NoManagement"):
        a = run_trajectory(TASK, Budget(4000), Strategy(kind), 60, 11)
        assert a == run_trajectory(TASK, Budget(4000), Strategy(kind), 60, 11)


@pytest.mark.parametrize("kind", ["Summary", "Discard75", "DiscardAll"])
def test_post_strategy_bound(kind):
    for seed in range(300):
        res = run_trajectory(TASK, Budget(3000), Strategy(kind), 80, seed)
        assert res.max_post_strategy_tokens < 3000


def test_no_management_fails_on_window():
    res = run_trajectory(TASK, Budget(2500), Strategy("NoManagement"), 60, 0)
    assert not res.success or res.steps <= 3


def test_trajectory_rejects_impossible_budget():
    with pytest.raises(ValueError):
        run_trajectory(TASK, Budget(600), Strategy("Summary"), 10, 0)
    with pytest.raises(ValueError):
        run_trajectory(TASK, Budget(4000), Strategy("Summary"), 0, 0)


def test_experiment_single_trial_reproduces_trajectory():
    rows = run_experiment(TASK, [Strategy("Summary")], [4000], 1, seed=3, max_steps=60)
    res = run_trajectory(TASK, Budget(4000), Strategy("Summary"), 60, trial_seed(3, 0))
    assert rows == [{"strategy": "Summary", "window": 4000, "success_rate": float(res.success),
                     "mean_steps": float(res.steps), "mean_tokens": float(res.total_tokens)}]


def test_discard_all_monotone_in_max_steps():
    rates = [run_experiment(TASK, [Strategy("DiscardAll")], [4000], 200, 0, m)[0]["success_rate"]
             for m in (5, 10, 20, 40, 80)]
    assert rates == sorted(rates)


def test_parallel_monotone_in_n():
    rates = [run_experiment(TASK, [Strategy("ParallelFewestStep", n)], [4000], 200, 0, 60)[0]["success_rate"]
             for n in (1, 2, 4, 8)]
    assert rates == sorted(rates)


def test_qualitative_ordering():
    rows = run_experiment(TASK, [Strategy("NoManagement"), Strategy("Summary"), Strategy("DiscardAll")], [4000],
                          300, 1, 60)
    rate = {r["strategy"]: r["success_rate"] for r in rows}
    assert rate["NoManagement"] < rate["Summary"] < rate["DiscardAll"]


def test_experiment_csv_schema():
    rows = run_experiment(TASK, [Strategy("DiscardAll")], [4000, 8000], 3, 0, 20)
    parsed = list(csv.DictReader(io.StringIO(experiment_csv(rows))))
    assert tuple(parsed[0]) == EXPERIMENT_FIELDS
    assert [p["window"] for p in parsed] == ["4000", "8000"]


def test_task_validation():
    with pytest.raises(ValueError):
        SyntheticTask(K=0)
    with pytest.raises(ValueError):
        SyntheticTask(find_prob=1.5)
