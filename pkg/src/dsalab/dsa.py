"""Lightning indexer, top-k token selection, sparse attention over the selected
latent entries, and a multiply-accumulate cost model."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mla import (
    AttentionOutput,
    MacCounter,
    MlaParams,
    ModelDims,
    _check_input,
    _project_out,
    absorbed_queries,
    causal_mask,
    mha_mode_attention,
    mqa_mode_attention,
)
from .numerics import NumericsError, as_matrix, softmax_rows, topk_indices


@dataclass
class IndexerParams:
    Wq_I: np.ndarray  # (H_I, d_I, d)
    Wk_I: np.ndarray  # (d_I, d)
    Ww_I: np.ndarray  # (H_I, d)

    def __post_init__(self):
        for name in ("Wq_I", "Wk_I", "Ww_I"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise NumericsError(f"{name} has non-finite entries")
            setattr(self, name, a)
        H_I, d_I, d = self.Wq_I.shape
        if self.Wk_I.shape != (d_I, d):
            raise NumericsError(f"Wk_I shape {self.Wk_I.shape} != {(d_I, d)}")
        if self.Ww_I.shape != (H_I, d):
            raise NumericsError(f"Ww_I shape {self.Ww_I.shape} != {(H_I, d)}")

    @property
    def H_I(self) -> int:
        return self.Wq_I.shape[0]

    @property
    def d_I(self) -> int:
        return self.Wq_I.shape[1]

    @property
    def d(self) -> int:
        return self.Wq_I.shape[2]

    @classmethod
    def random(cls, dims: ModelDims, rng: np.random.Generator) -> "IndexerParams":
        return cls(
            Wq_I=rng.normal(size=(dims.H_I, dims.d_I, dims.d)) / np.sqrt(dims.d),
            Wk_I=rng.normal(size=(dims.d_I, dims.d)) / np.sqrt(dims.d),
            Ww_I=rng.normal(size=(dims.H_I, dims.d)) / np.sqrt(dims.d),
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.Wq_I.ravel(), self.Wk_I.ravel(), self.Ww_I.ravel()])

    def unflatten(self, flat) -> "IndexerParams":
        flat = np.asarray(flat, dtype=np.float64)
        a, b = self.Wq_I.size, self.Wq_I.size + self.Wk_I.size
        if flat.size != b + self.Ww_I.size:
            raise NumericsError(f"expected {b + self.Ww_I.size} values, got {flat.size}")
        return IndexerParams(
            flat[:a].reshape(self.Wq_I.shape),
            flat[a:b].reshape(self.Wk_I.shape),
            flat[b:].reshape(self.Ww_I.shape),
        )

    def scaled(self, factor: float) -> "IndexerParams":
        return IndexerParams(self.Wq_I, self.Wk_I, self.Ww_I * factor)


@dataclass
class IndexScores:
    """Causal index scores. Only entries with s <= t are meaningful; the rest are 0.

    The indexer inputs are kept (as constants) so losses can be differentiated
    with respect to the indexer parameters alone.
    """

    I: np.ndarray  # (L, L)
    h: Optional[np.ndarray] = field(default=None, repr=False)
    params: Optional[IndexerParams] = field(default=None, repr=False)
    q: Optional[np.ndarray] = field(default=None, repr=False)  # (H_I, L, d_I)
    k: Optional[np.ndarray] = field(default=None, repr=False)  # (L, d_I)
    w: Optional[np.ndarray] = field(default=None, repr=False)  # (L, H_I)
    z: Optional[np.ndarray] = field(default=None, repr=False)  # (H_I, L, L) pre-ReLU logits

    @property
    def L(self) -> int:
        return self.I.shape[0]

    def row(self, t: int) -> np.ndarray:
        return self.I[t, : t + 1]


@dataclass
class SelectionSet:
    S: list  # S[t]: sorted int array, subset of 0..t

    @property
    def L(self) -> int:
        return len(self.S)

    def mask(self) -> np.ndarray:
        L = self.L
        m = np.zeros((L, L), dtype=bool)
        for t, s in enumerate(self.S):
            m[t, s] = True
        return m

    def validate(self, L: int) -> None:
        if self.L != L:
            raise NumericsError(f"selection covers {self.L} queries, sequence has {L}")
        for t, s in enumerate(self.S):
            s = np.asarray(s)
            if s.size == 0:
                raise NumericsError(f"empty selection for query {t}")
            if s.min() < 0 or s.max() > t:
                raise NumericsError(f"selection for query {t} reaches outside 0..{t}")

    @classmethod
    def full(cls, L: int) -> "SelectionSet":
        return cls([np.arange(t + 1) for t in range(L)])


def indexer_pair_cost(H_I: int, d_I: int) -> int:
    """Indexer work per causal (t, s) pair: for each head, the d_I-wide dot
    product counted as d_I multiplies and d_I adds, plus the weighting by w."""
    return H_I * (2 * d_I + 1)


def indexer_scores(h_seq, ip: IndexerParams, counter: Optional[MacCounter] = None) -> IndexScores:
    h = as_matrix(h_seq, "h_seq")
    if h.shape[1] != ip.d:
        raise NumericsError(f"h_seq width {h.shape[1]} != indexer input width {ip.d}")
    L = h.shape[0]
    q = np.einsum("jid,td->jti", ip.Wq_I, h)
    k = h @ ip.Wk_I.T
    w = h @ ip.Ww_I.T
    z = np.einsum("jti,si->jts", q, k)
    causal = causal_mask(L)
    I = np.einsum("tj,jts->ts", w, np.maximum(z, 0.0))
    I = np.where(causal, I, 0.0)
    if counter is not None:
        counter.add("indexer", int(causal.sum()) * indexer_pair_cost(ip.H_I, ip.d_I))
    return IndexScores(I=I, h=h, params=ip, q=q, k=k, w=w, z=z)


def select_topk(scores: IndexScores, k_select: int, topk=topk_indices) -> SelectionSet:
    if k_select < 1:
        raise NumericsError(f"k_select must be >= 1, got {k_select}")
    return SelectionSet([topk(scores.row(t), k_select) for t in range(scores.L)])


def sparse_attention(h_seq, mp: MlaParams, sel: SelectionSet, counter: Optional[MacCounter] = None) -> AttentionOutput:
    """Absorbed-mode attention where query t only reads the latents in S_t."""
    h = _check_input(h_seq, mp)
    L = h.shape[0]
    sel.validate(L)
    c = h @ mp.W_dkv.T
    qt = absorbed_queries(h, mp)
    scale = 1.0 / np.sqrt(mp.d_h)
    weights = np.zeros((mp.H, L, L))
    ctx = np.empty((mp.H, L, mp.d_c))
    for t in range(L):
        idx = np.asarray(sel.S[t])
        c_sel = c[idx]
        a = softmax_rows(qt[:, t, :] @ c_sel.T * scale)
        weights[:, t, idx] = a
        ctx[:, t, :] = a @ c_sel
        if counter is not None:
            counter.add("score", idx.size * mp.H * mp.d_c)
            counter.add("mix", idx.size * mp.H * mp.d_c)
    o = np.einsum("hkc,htc->htk", mp.W_uv, ctx)
    return AttentionOutput(_project_out(o, mp), weights)


def masked_dense_simulation(h_seq, mp: MlaParams, sel: SelectionSet) -> AttentionOutput:
    """Dense MHA-mode attention with unselected scores forced to -inf."""
    h = _check_input(h_seq, mp)
    sel.validate(h.shape[0])
    return mha_mode_attention(h, mp, allowed=sel.mask())


@dataclass(frozen=True)
class CostReport:
    mode: str
    L: int
    k_select: int
    indexer_macs: int
    score_macs: int
    mix_macs: int

    FIELDS = ("mode", "L", "k_select", "indexer_macs", "score_macs", "mix_macs")

    def as_row(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}


def attended_pairs(L: int, k_select: Optional[int] = None) -> int:
    """Number of causal (t, s) pairs, optionally capped at k_select per query."""
    dense = L * (L + 1) // 2
    if k_select is None or k_select >= L:
        return dense
    k = k_select
    return k * (k + 1) // 2 + (L - k) * k


def count_operations(dims: ModelDims, L: int, mode: str) -> CostReport:
    if L < 1:
        raise ValueError("L must be >= 1")
    if mode not in ("dense", "sparse"):
        raise ValueError(f"mode must be 'dense' or 'sparse', got {mode!r}")
    pairs = attended_pairs(L, dims.k_select if mode == "sparse" else None)
    per_pair = dims.H * dims.d_c
    return CostReport(
        mode=mode,
        L=L,
        k_select=dims.k_select,
        indexer_macs=attended_pairs(L) * indexer_pair_cost(dims.H_I, dims.d_I),
        score_macs=pairs * per_pair,
        mix_macs=pairs * per_pair,
    )


def instrumented_costs(dims: ModelDims, L: int, mode: str, rng: np.random.Generator) -> CostReport:
    """Run the indexer and the attention path on random data and report the tallies
    the operations themselves recorded."""
    h = rng.normal(size=(L, dims.d))
    mp = MlaParams.random(dims, rng)
    ip = IndexerParams.random(dims, rng)
    counter = MacCounter()
    scores = indexer_scores(h, ip, counter)
    if mode == "dense":
        mqa_mode_attention(h, mp, counter)
    elif mode == "sparse":
        sparse_attention(h, mp, select_topk(scores, dims.k_select), counter)
    else:
        raise ValueError(f"mode must be 'dense' or 'sparse', got {mode!r}")
    return CostReport(mode, L, dims.k_select, counter["indexer"], counter["score"], counter["mix"])


def cost_reports_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CostReport.FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.as_row())
    return buf.getvalue()
