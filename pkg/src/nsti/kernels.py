"""Hot inner loops: CTC forward-backward and edit-distance alignment.

Every kernel exists twice: a numba loop version and a vectorised numpy
version. ``ctc_forward_backward`` and ``edit_ops`` dispatch on
``nsti._accel.BACKEND`` unless a backend is passed explicitly.
"""
import math

import numpy as np

from . import _accel
from ._accel import njit

NEG_INF = -np.inf


def extend_labels(labels, blank):
    """Interleave blanks: [a, b] -> [blank, a, blank, b, blank]."""
    labels = np.asarray(labels, dtype=np.int64)
    ext = np.full(2 * labels.size + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _skip_allowed(ext, blank):
    allow = np.zeros(ext.size, dtype=np.bool_)
    if ext.size > 2:
        allow[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allow


# ---------------------------------------------------------------------------
# CTC forward-backward, numpy
# ---------------------------------------------------------------------------

def _ctc_numpy(logp, ext, allow):
    T = logp.shape[0]
    S = ext.size
    emit = logp[:, ext]  # T x S
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            acc = prev.copy()
            acc[1:] = np.logaddexp(acc[1:], prev[:-1])
            skip = np.full(S, NEG_INF)
            skip[2:] = np.where(allow[2:], prev[:-2], NEG_INF)
            acc = np.logaddexp(acc, skip)
            alpha[t] = acc + emit[t]

        beta = np.full((T, S), NEG_INF)
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            skip = np.full(S, NEG_INF)
            skip[:-2] = np.where(allow[2:], nxt[2:], NEG_INF)
            beta[t] = np.logaddexp(acc, skip)

    if S > 1:
        log_z = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_z = alpha[T - 1, 0]
    occ = np.zeros_like(logp)
    if np.isfinite(log_z):
        post = np.exp(alpha + beta - log_z)
        for s in range(S):
            occ[:, ext[s]] += post[:, s]
    return -log_z, occ


# ---------------------------------------------------------------------------
# CTC forward-backward, numba
# ---------------------------------------------------------------------------

@njit(cache=True)
def _lse2(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def _ctc_numba(logp, ext, allow):
    T = logp.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = _lse2(acc, alpha[t - 1, s - 1])
            if s >= 2 and allow[s]:
                acc = _lse2(acc, alpha[t - 1, s - 2])
            if acc != -np.inf:
                alpha[t, s] = acc + logp[t, ext[s]]
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            acc = beta[t + 1, s] + logp[t + 1, ext[s]]
            if s + 1 < S:
                acc = _lse2(acc, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
            if s + 2 < S and allow[s + 2]:
                acc = _lse2(acc, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
            beta[t, s] = acc
    if S > 1:
        log_z = _lse2(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        log_z = alpha[T - 1, 0]
    occ = np.zeros_like(logp)
    if log_z != -np.inf:
        for t in range(T):
            for s in range(S):
                v = alpha[t, s] + beta[t, s]
                if v != -np.inf:
                    occ[t, ext[s]] += math.exp(v - log_z)
    return -log_z, occ


def ctc_forward_backward(logp, labels, blank, backend=None):
    """Negative log-likelihood and per-class state occupancy.

    ``logp`` is a (T, C) array of log probabilities. Returns ``(nll, occ)``
    where ``occ[t, k]`` is the posterior probability that frame ``t`` emits
    class ``k`` under the label sequence; each row of ``occ`` sums to one
    when the labels are feasible. ``nll`` is ``inf`` for infeasible labels.
    """
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    ext = extend_labels(labels, blank)
    allow = _skip_allowed(ext, blank)
    backend = backend or _accel.BACKEND
    if backend == "numba" and _accel.NUMBA_AVAILABLE:
        nll, occ = _ctc_numba(logp, ext, allow)
    else:
        nll, occ = _ctc_numpy(logp, ext, allow)
    return float(nll), occ


# ---------------------------------------------------------------------------
# Edit distance with operation counts
# ---------------------------------------------------------------------------
# Backtrace preference on equal cost: diagonal (match/substitution), then
# deletion, then insertion.

def _edit_table_numpy(ref, hyp):
    n, m = ref.size, hyp.size
    table = np.empty((n + 1, m + 1), dtype=np.int64)
    table[0] = np.arange(m + 1)
    cols = np.arange(m + 1)
    for i in range(1, n + 1):
        cand = np.empty(m + 1, dtype=np.int64)
        cand[0] = i
        cost = (hyp != ref[i - 1]).astype(np.int64)
        cand[1:] = np.minimum(table[i - 1, 1:] + 1, table[i - 1, :-1] + cost)
        # insertions chain left to right: row[j] = min_k<=j cand[k] + (j - k)
        table[i] = np.minimum.accumulate(cand - cols) + cols
    return table


def _backtrace(table, ref, hyp):
    i, j = ref.size, hyp.size
    subs = ins = dels = 0
    while i > 0 or j > 0:
        cur = table[i, j]
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if table[i - 1, j - 1] + cost == cur:
                subs += cost
                i -= 1
                j -= 1
                continue
        if i > 0 and table[i - 1, j] + 1 == cur:
            dels += 1
            i -= 1
            continue
        ins += 1
        j -= 1
    return subs, ins, dels


def _edit_ops_numpy(ref, hyp):
    return _backtrace(_edit_table_numpy(ref, hyp), ref, hyp)


@njit(cache=True)
def _edit_ops_numba(ref, hyp):
    n = ref.shape[0]
    m = hyp.shape[0]
    table = np.empty((n + 1, m + 1), dtype=np.int64)
    for j in range(m + 1):
        table[0, j] = j
    for i in range(1, n + 1):
        table[i, 0] = i
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            best = table[i - 1, j - 1] + cost
            if table[i - 1, j] + 1 < best:
                best = table[i - 1, j] + 1
            if table[i, j - 1] + 1 < best:
                best = table[i, j - 1] + 1
            table[i, j] = best
    i = n
    j = m
    subs = 0
    ins = 0
    dels = 0
    while i > 0 or j > 0:
        cur = table[i, j]
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if table[i - 1, j - 1] + cost == cur:
                subs += cost
                i -= 1
                j -= 1
                continue
        if i > 0 and table[i - 1, j] + 1 == cur:
            dels += 1
            i -= 1
            continue
        ins += 1
        j -= 1
    return subs, ins, dels


def edit_ops(ref, hyp, backend=None):
    """Return ``(substitutions, insertions, deletions)`` of a minimal alignment."""
    ref = np.asarray(ref, dtype=np.int64).reshape(-1)
    hyp = np.asarray(hyp, dtype=np.int64).reshape(-1)
    backend = backend or _accel.BACKEND
    if backend == "numba" and _accel.NUMBA_AVAILABLE:
        s, i, d = _edit_ops_numba(ref, hyp)
    else:
        s, i, d = _edit_ops_numpy(ref, hyp)
    return int(s), int(i), int(d)
