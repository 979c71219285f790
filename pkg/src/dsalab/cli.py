"""``dsalab verify | bench | grpo | ctxsim``.

Exit status: 0 success, 1 a property or agreement check failed, 2 invalid
configuration, 3 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import context_sim as cs
from . import grpo as gr
from . import rng as rngmod
from .artifacts import write_atomic, write_manifest
from .dsa import cost_reports_csv, count_operations, instrumented_costs
from .indexer_training import ScheduleConfig
from .mla import ModelDims
from .policy_sim import SamplingConfig, TabularPolicy, ToyMoEPolicy
from .verify import Context, format_report, run_all

log = logging.getLogger("dsalab")

EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 1, 2, 3


def model_dims(cfg) -> ModelDims:
    return ModelDims(d=cfg["dims.d"], H=cfg["dims.H"], d_h=cfg["dims.d_h"], d_c=cfg["dims.d_c"],
                     H_I=cfg["dims.H_I"], d_I=cfg["dims.d_I"], k_select=cfg["indexer.k_select"])


def cmd_verify(cfg, out: Path) -> int:
    ctx = Context(seed=cfg["seed"], seeds=cfg["verify.seeds"], dims=model_dims(cfg),
                  corrupt_tie_rule=cfg["verify.corrupt_tie_rule"],
                  schedule=ScheduleConfig(cfg["train.warmup_lr"], cfg["train.sparse_lr"], cfg["train.warmup_steps"],
                                          cfg["train.sparse_steps"], cfg["train.sparse_k"]),
                  train_L=cfg["train.L"])
    results = run_all(ctx)
    report = format_report(results)
    sys.stdout.write(report)
    write_atomic(out / "verify_report.txt", report)
    write_manifest(out, "verify", cfg["seed"], cfg.snapshot(), ["verify_report.txt"])
    return 0 if all(r.passed for r in results) else EXIT_FAIL


def cmd_bench(cfg, out: Path) -> int:
    dims = model_dims(cfg)
    grid = cfg["bench.L_grid"]
    if not grid:
        raise cfgmod.ConfigError("bench.L_grid", "must name at least one length")
    reports, ok = [], True
    for L in grid:
        for mode in ("dense", "sparse"):
            predicted = count_operations(dims, L, mode)
            reports.append(predicted)
            if L <= cfg["bench.instrument_max_L"]:
                measured = instrumented_costs(dims, L, mode, rngmod.stream(cfg["seed"], "bench", L, mode))
                agree = measured == predicted
                ok &= agree
                print(f"{'PASS' if agree else 'FAIL'}  instrumented == predicted  mode={mode} L={L}")
    by_L = {r.L: r for r in reports if r.mode == "dense"}
    for r in reports:
        if r.mode == "sparse":
            print(f"L={r.L}: sparse/dense score MACs = {r.score_macs / by_L[r.L].score_macs:.6f}")
    write_atomic(out / "bench.csv", cost_reports_csv(reports))
    write_manifest(out, "bench", cfg["seed"], cfg.snapshot(), ["bench.csv"])
    return 0 if ok else EXIT_FAIL


def _grpo_setup(cfg):
    seed = cfg["seed"]
    V, max_len, questions = cfg["grpo.V"], cfg["grpo.max_len"], cfg["grpo.questions"]
    targets = rngmod.stream(seed, "grpo", "env").integers(0, V, size=(questions, max_len))
    contexts = questions * max_len
    if cfg["grpo.policy"] == "tabular":
        policy = TabularPolicy(np.zeros((contexts, V)), cfg["grpo.temperature"])
    elif cfg["grpo.policy"] == "moe":
        if cfg["grpo.top_r"] > cfg["grpo.experts"]:
            raise cfgmod.ConfigError("grpo.top_r", "cannot exceed grpo.experts")
        policy = ToyMoEPolicy.random(contexts, cfg["grpo.experts"], V, 8, cfg["grpo.top_r"],
                                     rngmod.stream(seed, "grpo", "init"), cfg["grpo.temperature"])
    else:
        raise cfgmod.ConfigError("grpo.policy", f"expected tabular or moe, got {cfg['grpo.policy']!r}")
    return gr.ScriptedEnv(targets), policy


def _train_config(cfg, use_mask: bool) -> gr.TrainConfig:
    try:
        grpo_cfg = gr.GrpoConfig(cfg["grpo.epsilon"], cfg["grpo.beta"], cfg["grpo.delta"], cfg["grpo.kl"], use_mask)
        sampling = SamplingConfig(cfg["grpo.top_p"], cfg["grpo.top_k"], False, cfg["grpo.perturb"])
        if not 0 < sampling.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
    except ValueError as exc:
        raise cfgmod.ConfigError("grpo.*", str(exc)) from None
    return gr.TrainConfig(grpo_cfg, sampling, cfg["grpo.lr"], cfg["grpo.G"], cfg["grpo.inner_steps"],
                          cfg["grpo.keep_sampling_mask"], cfg["grpo.keep_routing"])


def cmd_grpo(cfg, out: Path) -> int:
    if cfg["grpo.G"] < 2:
        raise cfgmod.ConfigError("grpo.G", "group size must be >= 2")
    runs = [(cfg["grpo.mask"], "grpo_trace.csv")]
    if cfg["grpo.paired"]:
        runs = [(True, "grpo_mask_on.csv"), (False, "grpo_mask_off.csv")]
    written = []
    for use_mask, name in runs:
        env, policy = _grpo_setup(cfg)
        try:
            trace = gr.train_toy_policy(env, policy, _train_config(cfg, use_mask), cfg["grpo.steps"], cfg["seed"])
        except (gr.TrainingDivergence, gr.EstimatorOverflow) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        write_atomic(out / name, gr.trace_csv(trace))
        written.append(name)
        if trace:
            print(f"{name}: final mean_reward={trace[-1]['mean_reward']:.4f} "
                  f"max mean_abs_logratio={max(r['mean_abs_logratio'] for r in trace):.6f}")
    write_manifest(out, "grpo", cfg["seed"], cfg.snapshot(), written)
    return 0


def ctx_task(cfg) -> cs.SyntheticTask:
    try:
        return cs.SyntheticTask(K=cfg["ctx.K"], find_prob=cfg["ctx.find_prob"], fidelity=cfg["ctx.fidelity"])
    except ValueError as exc:
        raise cfgmod.ConfigError("ctx.*", str(exc)) from None


def cmd_ctxsim(cfg, out: Path) -> int:
    try:
        strategies = [cs.Strategy.parse(s) for s in cfg["ctx.strategies"]]
        rows = cs.run_experiment(ctx_task(cfg), strategies, cfg["ctx.window"], cfg["ctx.trials"], cfg["seed"],
                                 cfg["ctx.max_steps"], cfg["ctx.trigger"])
    except cfgmod.ConfigError:
        raise
    except ValueError as exc:
        raise cfgmod.ConfigError("ctx.*", str(exc)) from None
    write_atomic(out / "ctxsim.csv", cs.experiment_csv(rows))
    write_manifest(out, "ctxsim", cfg["seed"], cfg.snapshot(), ["ctxsim.csv"])
    for row in rows:
        print(f"{row['strategy']:<24} window={row['window']:<7} success={row['success_rate']:.3f} "
              f"steps={row['mean_steps']:.1f}")
    return 0


COMMANDS = {"verify": cmd_verify, "bench": cmd_bench, "grpo": cmd_grpo, "ctxsim": cmd_ctxsim}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsalab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    parser.add_argument("--out", default="out", help="artifact directory (default: out)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, environ, args.seed)
        return COMMANDS[args.command](cfg, Path(args.out))
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
