"""Indexer alignment losses and a two-stage gradient-descent schedule.

The target for query t is the main attention summed over heads and
L1-normalized. The indexer is trained to match it with
KL(p_t || softmax(I_t)) over the whole causal prefix (dense warm-up) or over
the selected set S_t only (sparse stage). Gradients flow into the indexer
parameters only; the hidden states and the attention that produced the target
are constants.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dsa import IndexerParams, IndexScores, SelectionSet, indexer_scores, select_topk
from .mla import MlaParams, ModelDims, mha_mode_attention
from .numerics import NumericsError, kl_divergence, l1_normalize, softmax_rows

log = logging.getLogger(__name__)

# Reported budgets of the production run, kept for reference only.
REPORTED_WARMUP_STEPS = 1000
REPORTED_WARMUP_TOKENS = 2.1e9
REPORTED_SPARSE_STEPS = 15000
REPORTED_SPARSE_TOKENS = 943.7e9

WARMUP_LR = 1e-3
SPARSE_LR = 7.3e-6


@dataclass
class TargetDistribution:
    p: np.ndarray  # (L, L), row t supported on 0..t

    @property
    def L(self) -> int:
        return self.p.shape[0]

    def row(self, t: int) -> np.ndarray:
        return self.p[t, : t + 1]


@dataclass
class IndexerLoss:
    value: float
    grad: Optional[IndexerParams]
    skipped: list = field(default_factory=list)  # query rows with no target mass on S_t


def target_distribution(attn_weights) -> TargetDistribution:
    """Sum causal attention weights over heads, then L1-normalize each row."""
    w = np.asarray(attn_weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    H, L, L2 = w.shape
    if L != L2:
        raise NumericsError(f"attention grid must be square, got {L}x{L2}")
    p = np.zeros((L, L))
    for t in range(L):
        if np.any(w[:, t, t + 1:] != 0):
            raise NumericsError(f"row {t} puts weight on future positions")
        try:
            p[t, : t + 1] = l1_normalize(w[:, t, : t + 1].sum(axis=0))
        except NumericsError as exc:
            raise NumericsError(f"row {t}: {exc}") from None
    return TargetDistribution(p)


def _row_loss(p_row: np.ndarray, scores_row: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(p || softmax(scores)) and its gradient w.r.t. scores."""
    q = softmax_rows(scores_row)[0]
    return kl_divergence(p_row, q), q - p_row


def _backprop(G: np.ndarray, scores: IndexScores) -> IndexerParams:
    """Chain dL/dI (L, L) through the indexer to its three projection matrices."""
    if scores.h is None or scores.params is None:
        raise NumericsError("index scores carry no indexer inputs; recompute with indexer_scores")
    h, q, k, w, z = scores.h, scores.q, scores.k, scores.w, scores.z
    relu = np.maximum(z, 0.0)
    dw = np.einsum("ts,jts->tj", G, relu)
    dz = G[None, :, :] * w.T[:, :, None] * (z > 0)
    dq = np.einsum("jts,si->jti", dz, k)
    dk = np.einsum("jts,jti->si", dz, q)
    return IndexerParams(
        Wq_I=np.einsum("jti,td->jid", dq, h),
        Wk_I=dk.T @ h,
        Ww_I=dw.T @ h,
    )


def _loss(p: TargetDistribution, scores: IndexScores, sets, with_grad: bool) -> IndexerLoss:
    L = scores.L
    if p.L != L:
        raise NumericsError(f"target covers {p.L} queries, scores cover {L}")
    G = np.zeros((L, L))
    total = 0.0
    skipped = []
    for t in range(L):
        idx = np.arange(t + 1) if sets is None else np.asarray(sets[t])
        target = p.p[t, idx]
        mass = target.sum()
        if not mass > 0:
            skipped.append(t)
            continue
        value, g = _row_loss(target / mass, scores.I[t, idx])
        total += value
        G[t, idx] = g
    if skipped:
        log.debug("skipped %d query rows with zero restricted target mass", len(skipped))
    grad = _backprop(G, scores) if with_grad else None
    return IndexerLoss(total, grad, skipped)


def warmup_loss(p: TargetDistribution, scores: IndexScores, with_grad: bool = True) -> IndexerLoss:
    return _loss(p, scores, None, with_grad)


def sparse_stage_loss(p: TargetDistribution, scores: IndexScores, sel: SelectionSet,
                      with_grad: bool = True) -> IndexerLoss:
    sel.validate(scores.L)
    return _loss(p, scores, sel.S, with_grad)


@dataclass
class ToyIndexerModel:
    h: np.ndarray
    mla: MlaParams
    indexer: IndexerParams

    @classmethod
    def random(cls, dims: ModelDims, L: int, rng: np.random.Generator) -> "ToyIndexerModel":
        return cls(rng.normal(size=(L, dims.d)), MlaParams.random(dims, rng), IndexerParams.random(dims, rng))

    def target(self) -> TargetDistribution:
        return target_distribution(mha_mode_attention(self.h, self.mla).weights)


@dataclass
class ScheduleConfig:
    warmup_lr: float = WARMUP_LR
    sparse_lr: float = SPARSE_LR
    warmup_steps: int = 200
    sparse_steps: int = 1000
    k_select: int = 2048


class DivergenceError(RuntimeError):
    def __init__(self, stage: str, step: int):
        super().__init__(f"non-finite indexer loss in {stage} stage at step {step}")
        self.stage = stage
        self.step = step


def run_two_stage_schedule(cfg: ScheduleConfig, model: ToyIndexerModel,
                           target: Optional[TargetDistribution] = None) -> list[tuple[str, int, float]]:
    """Plain gradient descent on the indexer: dense warm-up, then the sparse stage.

    The attention parameters stay frozen, so the target is computed once.
    Returns ``(stage, step, loss)`` rows, loss measured before each update.
    """
    if cfg.warmup_steps < 0 or cfg.sparse_steps < 0:
        raise ValueError("step counts must be nonnegative")
    p = model.target() if target is None else target
    ip = model.indexer
    trace = []
    for stage, steps, lr in (("warmup", cfg.warmup_steps, cfg.warmup_lr),
                             ("sparse", cfg.sparse_steps, cfg.sparse_lr)):
        for step in range(steps):
            try:
                scores = indexer_scores(model.h, ip)
                if stage == "warmup":
                    loss = warmup_loss(p, scores)
                else:
                    loss = sparse_stage_loss(p, scores, select_topk(scores, cfg.k_select))
                if not np.isfinite(loss.value):
                    raise NumericsError("non-finite loss")
                trace.append((stage, step, loss.value))
                ip = ip.unflatten(ip.flatten() - lr * loss.grad.flatten())
            except (NumericsError, FloatingPointError) as exc:
                log.debug("divergence: %s", exc)
                raise DivergenceError(stage, step) from None
    model.indexer = ip
    return trace


def loss_trace_csv(trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("stage", "step", "loss"))
    for stage, step, value in trace:
        writer.writerow((stage, step, repr(float(value))))
    return buf.getvalue()
