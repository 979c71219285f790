"""Multi-head latent attention over a shared latent cache.

Two evaluation orders are provided. MHA mode up-projects every cached latent
into per-head keys and values. MQA mode absorbs the key up-projection into the
query and the value up-projection into the output, so every head attends to
the same latent vectors directly. The two are equal in exact arithmetic.

Shapes (row vectors are tokens)::

    W_dkv  (d_c, d)        c_s = W_dkv @ h_s
    W_q    (H, d_h, d)     q_h(t) = W_q[h] @ h_t
    W_uk   (H, d_h, d_c)   K_h(s) = W_uk[h] @ c_s
    W_uv   (H, d_h, d_c)   V_h(s) = W_uv[h] @ c_s
    W_o    (d, H * d_h)    u_t = W_o @ concat_h(o_h(t))
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import NumericsError, as_matrix, softmax_rows


@dataclass(frozen=True)
class ModelDims:
    d: int = 16
    H: int = 2
    d_h: int = 8
    d_c: int = 8
    H_I: int = 2
    d_I: int = 4
    k_select: int = 2048

    def __post_init__(self):
        for name in ("d", "H", "d_h", "d_c", "H_I", "d_I", "k_select"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"ModelDims.{name} must be a positive integer, got {v}")


class MacCounter(Counter):
    """Multiply-accumulate tally keyed by component name."""

    def add(self, component: str, n: int) -> None:
        self[component] += int(n)


@dataclass
class MlaParams:
    W_dkv: np.ndarray
    W_q: np.ndarray
    W_uk: np.ndarray
    W_uv: np.ndarray
    W_o: np.ndarray

    def __post_init__(self):
        for name in ("W_dkv", "W_q", "W_uk", "W_uv", "W_o"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise NumericsError(f"{name} has non-finite entries")
            setattr(self, name, a)
        d_c, d = self.W_dkv.shape
        H, d_h, d_q = self.W_q.shape
        if d_q != d:
            raise NumericsError(f"W_q expects width {d_q}, W_dkv expects {d}")
        for name in ("W_uk", "W_uv"):
            if getattr(self, name).shape != (H, d_h, d_c):
                raise NumericsError(f"{name} shape {getattr(self, name).shape} != {(H, d_h, d_c)}")
        if self.W_o.shape != (d, H * d_h):
            raise NumericsError(f"W_o shape {self.W_o.shape} != {(d, H * d_h)}")

    @property
    def d(self) -> int:
        return self.W_dkv.shape[1]

    @property
    def d_c(self) -> int:
        return self.W_dkv.shape[0]

    @property
    def H(self) -> int:
        return self.W_q.shape[0]

    @property
    def d_h(self) -> int:
        return self.W_q.shape[1]

    @classmethod
    def random(cls, dims: ModelDims, rng: np.random.Generator) -> "MlaParams":
        d, H, d_h, d_c = dims.d, dims.H, dims.d_h, dims.d_c
        return cls(
            W_dkv=rng.normal(size=(d_c, d)) / np.sqrt(d),
            W_q=rng.normal(size=(H, d_h, d)) / np.sqrt(d),
            W_uk=rng.normal(size=(H, d_h, d_c)) / np.sqrt(d_c),
            W_uv=rng.normal(size=(H, d_h, d_c)) / np.sqrt(d_c),
            W_o=rng.normal(size=(d, H * d_h)) / np.sqrt(H * d_h),
        )

    def permute_heads(self, perm) -> "MlaParams":
        """Same function with heads reordered; W_o columns follow their heads."""
        perm = np.asarray(perm)
        cols = np.concatenate([np.arange(h * self.d_h, (h + 1) * self.d_h) for h in perm])
        return MlaParams(self.W_dkv, self.W_q[perm], self.W_uk[perm], self.W_uv[perm], self.W_o[:, cols])


@dataclass
class LatentCache:
    c: np.ndarray  # (L, d_c)

    def __len__(self) -> int:
        return self.c.shape[0]

    def append(self, h_t, params: MlaParams) -> "LatentCache":
        c_t = params.W_dkv @ np.asarray(h_t, dtype=np.float64)
        return LatentCache(np.vstack([self.c, c_t[None, :]]))


@dataclass
class AttentionOutput:
    u: np.ndarray  # (L, d)
    weights: np.ndarray = field(repr=False)  # (H, L, L), zero outside the attended set

    def __post_init__(self):
        if not np.all(np.isfinite(self.u)):
            raise NumericsError("attention produced non-finite outputs")


def _check_input(h_seq, params: MlaParams) -> np.ndarray:
    h = as_matrix(h_seq, "h_seq")
    if h.shape[0] < 1:
        raise NumericsError("empty sequence")
    if h.shape[1] != params.d:
        raise NumericsError(f"h_seq width {h.shape[1]} != d={params.d}")
    return h


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))


def build_latent_cache(h_seq, params: MlaParams) -> LatentCache:
    h = _check_input(h_seq, params)
    return LatentCache(h @ params.W_dkv.T)


def _softmax_heads(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    H, L, _ = scores.shape
    if not np.all(np.isfinite(np.where(allowed, scores, 0.0))):
        raise NumericsError("non-finite attention scores")
    w = softmax_rows(scores.reshape(H * L, L), np.broadcast_to(allowed, scores.shape).reshape(H * L, L))
    return w.reshape(H, L, L)


def _project_out(per_head: np.ndarray, params: MlaParams) -> np.ndarray:
    H, L, d_h = per_head.shape
    concat = per_head.transpose(1, 0, 2).reshape(L, H * d_h)
    return concat @ params.W_o.T


def mha_mode_attention(h_seq, params: MlaParams, allowed: Optional[np.ndarray] = None) -> AttentionOutput:
    """Causal attention with per-head keys and values expanded from the latent cache.

    ``allowed`` (L, L) further restricts which keys each query may see; entries
    outside it are forced to -inf before the softmax.
    """
    h = _check_input(h_seq, params)
    L = h.shape[0]
    c = h @ params.W_dkv.T
    q = np.einsum("hkd,td->htk", params.W_q, h)
    k = np.einsum("hkc,sc->hsk", params.W_uk, c)
    v = np.einsum("hkc,sc->hsk", params.W_uv, c)
    scores = np.einsum("htk,hsk->hts", q, k) / np.sqrt(params.d_h)
    mask = causal_mask(L) if allowed is None else (np.asarray(allowed, dtype=bool) & causal_mask(L))
    w = _softmax_heads(scores, mask)
    o = np.einsum("hts,hsk->htk", w, v)
    return AttentionOutput(_project_out(o, params), w)


def absorbed_queries(h: np.ndarray, params: MlaParams) -> np.ndarray:
    """Per-head queries mapped into latent space: W_uk[h]^T W_q[h] h_t, shape (H, L, d_c)."""
    q = np.einsum("hkd,td->htk", params.W_q, h)
    return np.einsum("hkc,htk->htc", params.W_uk, q)


def mqa_mode_attention(h_seq, params: MlaParams, counter: Optional[MacCounter] = None) -> AttentionOutput:
    """Causal attention with every head scoring the shared latents directly."""
    h = _check_input(h_seq, params)
    L = h.shape[0]
    c = h @ params.W_dkv.T
    qt = absorbed_queries(h, params)
    scores = np.einsum("htc,sc->hts", qt, c) / np.sqrt(params.d_h)
    mask = causal_mask(L)
    w = _softmax_heads(scores, mask)
    ctx = np.einsum("hts,sc->htc", w, c)
    o = np.einsum("hkc,htc->htk", params.W_uv, ctx)
    if counter is not None:
        pairs = int(mask.sum())
        counter.add("score", pairs * params.H * params.d_c)
        counter.add("mix", pairs * params.H * params.d_c)
    return AttentionOutput(_project_out(o, params), w)


def decode_step(h_t, cache: LatentCache, params: MlaParams) -> tuple[np.ndarray, LatentCache]:
    """Append one token to the cache and return its MQA-mode output."""
    h_t = np.asarray(h_t, dtype=np.float64)
    cache = cache.append(h_t, params)
    qt = absorbed_queries(h_t[None, :], params)[:, 0, :]  # (H, d_c)
    scores = qt @ cache.c.T / np.sqrt(params.d_h)
    a = softmax_rows(scores)
    o = np.einsum("hkc,hc->hk", params.W_uv, a @ cache.c)
    return params.W_o @ o.reshape(-1), cache
