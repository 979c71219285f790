"""Namespaced ``key=value`` run configuration.

One setting per line, ``#`` starts a comment. Every key has a default below;
unknown keys are rejected. Precedence: defaults, then the config file, then
environment variables ``DSALAB_<KEY>`` (key upper-cased, dots as
underscores, e.g. ``DSALAB_DIMS_H=4``), then command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Optional

ENV_PREFIX = "DSALAB_"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def _str_list(text: str) -> list:
    return [x.strip() for x in text.split(";") if x.strip()]


def _flag(text: str) -> bool:
    if text.strip() in ("1", "true", "yes", "on"):
        return True
    if text.strip() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected 0/1, got {text!r}")


def _positive(cast):
    def parse(text):
        v = cast(text)
        if not v > 0:
            raise ValueError(f"must be positive, got {v}")
        return v
    return parse


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 1 << 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    doc: str


KEYS: dict[str, Key] = {
    "seed": Key(_seed, "0", "top-level seed; every random stream is derived from it"),
    "dims.d": Key(_positive(int), "16", "hidden width"),
    "dims.H": Key(_positive(int), "2", "attention heads"),
    "dims.d_h": Key(_positive(int), "8", "per-head width"),
    "dims.d_c": Key(_positive(int), "8", "latent key-value width"),
    "dims.H_I": Key(_positive(int), "2", "indexer heads"),
    "dims.d_I": Key(_positive(int), "4", "indexer head width"),
    "indexer.k_select": Key(_positive(int), "2048", "tokens selected per query (production value)"),
    "train.warmup_lr": Key(float, "1e-3", "dense warm-up learning rate (production value)"),
    "train.sparse_lr": Key(float, "7.3e-6", "sparse-stage learning rate (production value)"),
    "train.warmup_steps": Key(int, "200", "desk-scale warm-up steps"),
    "train.sparse_steps": Key(int, "1000", "desk-scale sparse-stage steps"),
    "train.L": Key(_positive(int), "32", "toy sequence length for indexer training"),
    "train.sparse_k": Key(_positive(int), "8", "k_select used by the toy sparse stage"),
    "verify.seeds": Key(_positive(int), "20", "random instances per randomized property"),
    "verify.corrupt_tie_rule": Key(_flag, "0", "test hook: break top-k ties randomly"),
    "bench.L_grid": Key(_int_list, "1024,2048,4096,8192", "sequence lengths for the cost table"),
    "bench.instrument_max_L": Key(int, "1024", "largest L also run through the instrumented kernels"),
    "grpo.epsilon": Key(float, "0.2", "clip range"),
    "grpo.beta": Key(float, "0.01", "KL penalty weight"),
    "grpo.delta": Key(float, "0.02", "off-policy masking threshold"),
    "grpo.kl": Key(str, "unbiased", "KL estimator: unbiased or k3"),
    "grpo.mask": Key(_flag, "1", "off-policy sequence masking"),
    "grpo.keep_sampling_mask": Key(_flag, "1", "evaluate the current policy under the sampling masks"),
    "grpo.keep_routing": Key(_flag, "1", "replay the sampled expert routing during training"),
    "grpo.policy": Key(str, "tabular", "tabular or moe"),
    "grpo.experts": Key(_positive(int), "4", "experts in the MoE policy"),
    "grpo.top_r": Key(_positive(int), "1", "routed experts per step"),
    "grpo.V": Key(_positive(int), "5", "vocabulary size"),
    "grpo.max_len": Key(_positive(int), "1", "tokens per rollout"),
    "grpo.questions": Key(_positive(int), "1", "questions per step"),
    "grpo.G": Key(_positive(int), "8", "group size"),
    "grpo.steps": Key(int, "500", "outer training steps"),
    "grpo.inner_steps": Key(_positive(int), "1", "gradient updates per sampled batch"),
    "grpo.lr": Key(float, "0.1", "gradient-ascent step size"),
    "grpo.temperature": Key(_positive(float), "1.0", "sampling temperature"),
    "grpo.top_p": Key(float, "1.0", "nucleus mass"),
    "grpo.top_k": Key(int, "0", "top-k filter, 0 disables"),
    "grpo.perturb": Key(float, "0.0", "std of sampling-time logit noise"),
    "grpo.paired": Key(_flag, "0", "also run the opposite grpo.mask setting on the same seed"),
    "ctx.window": Key(_int_list, "4000,8000,16000", "context windows (tokens)"),
    "ctx.trigger": Key(float, "0.8", "fraction of the window that triggers management"),
    "ctx.fidelity": Key(float, "0.8", "probability an evidence item survives a summary"),
    "ctx.find_prob": Key(float, "0.25", "per-step probability of finding a missing item"),
    "ctx.K": Key(_positive(int), "4", "evidence items required"),
    "ctx.trials": Key(_positive(int), "200", "trials per grid cell"),
    "ctx.max_steps": Key(_positive(int), "60", "step cap per trajectory"),
    "ctx.strategies": Key(_str_list, "NoManagement;Summary;Discard75;DiscardAll;ParallelFewestStep(4)",
                          "semicolon-separated strategies"),
}


def env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


assert len({env_name(k) for k in KEYS}) == len(KEYS)


class RunConfig(Mapping):
    def __init__(self, raw: Optional[dict] = None):
        self.raw = {k: v.default for k, v in KEYS.items()}
        self.values = {}
        for k, v in (raw or {}).items():
            if k not in KEYS:
                raise ConfigError(k, "unknown configuration key")
            self.raw[k] = str(v).strip()
        for k, text in self.raw.items():
            try:
                self.values[k] = KEYS[k].parse(text)
            except (TypeError, ValueError) as exc:
                raise ConfigError(k, f"invalid value {text!r} ({exc})") from None

    def __getitem__(self, key):
        return self.values[key]

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def snapshot(self) -> list[str]:
        return [f"{k}={self.raw[k]}" for k in sorted(self.raw)]

    def with_overrides(self, **overrides) -> "RunConfig":
        raw = dict(self.raw)
        raw.update({k.replace("__", "."): v for k, v in overrides.items()})
        return RunConfig(raw)


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load(path: Optional[str] = None, environ: Optional[Mapping] = None, seed: Optional[int] = None) -> RunConfig:
    raw = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            raw.update(parse_text(fh.read()))
    environ = os.environ if environ is None else environ
    by_env = {env_name(k): k for k in KEYS}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            if name not in by_env:
                raise ConfigError(name, "environment override names no configuration key")
            raw[by_env[name]] = value
    if seed is not None:
        raw["seed"] = str(seed)
    return RunConfig(raw)
