"""Shared fixtures and brute-force oracles. The oracles use plain Python loops
and share no code with the implementations they check."""

import math

import numpy as np
import pytest

from dsalab.dsa import IndexerParams
from dsalab.mla import MlaParams, ModelDims


@pytest.fixture
def rng():
    return np.random.default_rng(20251017)


def random_instance(rng, L=6, d=8, H=2, d_h=4, d_c=6, H_I=3, d_I=3, k_select=3):
    dims = ModelDims(d=d, H=H, d_h=d_h, d_c=d_c, H_I=H_I, d_I=d_I, k_select=k_select)
    h = rng.normal(size=(L, d))
    return dims, h, MlaParams.random(dims, rng), IndexerParams.random(dims, rng)


def matvec(M, v):
    return [sum(M[i][j] * v[j] for j in range(len(v))) for i in range(len(M))]


def naive_attention(h, mp, allowed=None):
    """Three-loop MHA-mode attention: heads, queries, keys."""
    L = len(h)
    H, d_h = mp.W_q.shape[0], mp.W_q.shape[1]
    c = [matvec(mp.W_dkv, h[s]) for s in range(L)]
    out = []
    for t in range(L):
        concat = []
        for hd in range(H):
            q = matvec(mp.W_q[hd], h[t])
            keys = [s for s in range(t + 1) if allowed is None or allowed[t][s]]
            logits = []
            for s in keys:
                k = matvec(mp.W_uk[hd], c[s])
                logits.append(sum(a * b for a, b in zip(q, k)) / math.sqrt(d_h))
            m = max(logits)
            e = [math.exp(x - m) for x in logits]
            z = sum(e)
            o = [0.0] * d_h
            for wgt, s in zip(e, keys):
                v = matvec(mp.W_uv[hd], c[s])
                for i in range(d_h):
                    o[i] += wgt / z * v[i]
            concat.extend(o)
        out.append(matvec(mp.W_o, concat))
    return np.array(out)


def naive_index_scores(h, ip):
    L = len(h)
    I = np.zeros((L, L))
    for t in range(L):
        for s in range(t + 1):
            k = matvec(ip.Wk_I, h[s])
            w = matvec(ip.Ww_I, h[t])
            total = 0.0
            for j in range(ip.Wq_I.shape[0]):
                q = matvec(ip.Wq_I[j], h[t])
                total += w[j] * max(0.0, sum(a * b for a, b in zip(q, k)))
            I[t, s] = total
    return I


def sort_topk(scores, k):
    return sorted(sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k])


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    if acceptance is not None and acceptance.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.REPORT:
            terminalreporter.write_line(line)
