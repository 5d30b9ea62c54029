"""Hot loops with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from ``HTCN_NUMBA`` (``0`` forces
numpy). :func:`use_backend` switches it at runtime for tests and benchmarks.
Both backends implement the same contract; the numpy versions are
vectorised where the loop structure allows it.
"""

from __future__ import annotations

import contextlib
import os
import warnings

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None

HAS_NUMBA = numba is not None
_ENV_FLAG = os.environ.get("HTCN_NUMBA", "1").strip().lower()
_backend = "numba" if HAS_NUMBA and _ENV_FLAG not in ("0", "false", "no", "off") else "numpy"


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        warnings.warn("numba is not available, staying on numpy", RuntimeWarning)
        return
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    prev = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _njit(fn):
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# GRU recurrence
#
# Time-major layout. ``xw`` holds the precomputed input projections
# [T, B, 3H] with column blocks (update g, reset r, candidate h).
# ``keep`` is 1 - reset, ``mask`` is step validity, ``drop`` the dropout
# multiplier applied to the candidate only.


def _gru_forward_loop(xw, u_gr, u_h, s0, mask, keep, drop):
    T, B, H3 = xw.shape
    H = H3 // 3
    one = np.ones(1, dtype=xw.dtype)[0]
    out = np.empty((T, B, H), dtype=xw.dtype)
    sp_all = np.empty((T, B, H), dtype=xw.dtype)
    g_all = np.empty((T, B, H), dtype=xw.dtype)
    r_all = np.empty((T, B, H), dtype=xw.dtype)
    h_all = np.empty((T, B, H), dtype=xw.dtype)
    s = s0.copy()
    for t in range(T):
        sp = s * keep[t].reshape(B, 1)
        gr = one / (one + np.exp(-(xw[t, :, : 2 * H] + np.dot(sp, u_gr))))
        g = gr[:, :H]
        r = gr[:, H:]
        h = np.tanh(xw[t, :, 2 * H :] + np.dot(np.ascontiguousarray(sp * r), u_h))
        sn = (one - g) * (h * drop[t]) + g * sp
        m = mask[t].reshape(B, 1)
        s = m * sn + (one - m) * sp
        out[t] = s
        sp_all[t] = sp
        g_all[t] = g
        r_all[t] = r
        h_all[t] = h
    return out, sp_all, g_all, r_all, h_all


def _gru_backward_loop(d_out, ds_final, u_gr_t, u_h_t, sp_all, g_all, r_all, h_all, mask, keep, drop):
    T, B, H = sp_all.shape
    one = np.ones(1, dtype=sp_all.dtype)[0]
    da = np.zeros((T, B, 3 * H), dtype=sp_all.dtype)
    ds = ds_final.copy()
    for t in range(T - 1, -1, -1):
        m = mask[t].reshape(B, 1)
        dtot = d_out[t] + ds
        dsn = dtot * m
        dsp = dtot * (one - m)
        sp = sp_all[t]
        g = g_all[t]
        r = r_all[t]
        h = h_all[t]
        hd = h * drop[t]
        dg = dsn * (sp - hd)
        dsp = dsp + dsn * g
        dah = dsn * (one - g) * drop[t] * (one - h * h)
        dsr = np.dot(np.ascontiguousarray(dah), u_h_t)
        dsp = dsp + dsr * r
        dagr = np.empty((B, 2 * H), dtype=sp.dtype)
        dagr[:, :H] = dg * g * (one - g)
        dagr[:, H:] = dsr * sp * r * (one - r)
        dsp = dsp + np.dot(dagr, u_gr_t)
        da[t, :, : 2 * H] = dagr
        da[t, :, 2 * H :] = dah
        ds = dsp * keep[t].reshape(B, 1)
    return da, ds


def _gru_forward_fused(xw, u_gr, u_h, s0, mask, keep, drop):
    # numba path: BLAS for the two products, one fused loop for everything else
    T, B, H3 = xw.shape
    H = H3 // 3
    dt = xw.dtype
    out = np.empty((T, B, H), dtype=dt)
    sp_all = np.empty((T, B, H), dtype=dt)
    g_all = np.empty((T, B, H), dtype=dt)
    r_all = np.empty((T, B, H), dtype=dt)
    h_all = np.empty((T, B, H), dtype=dt)
    s = s0.copy()
    sp = np.empty((B, H), dtype=dt)
    spr = np.empty((B, H), dtype=dt)
    for t in range(T):
        for b in range(B):
            k = keep[t, b]
            for j in range(H):
                sp[b, j] = s[b, j] * k
        zgr = np.dot(sp, u_gr)
        for b in range(B):
            for j in range(H):
                g = 1.0 / (1.0 + np.exp(-(xw[t, b, j] + zgr[b, j])))
                r = 1.0 / (1.0 + np.exp(-(xw[t, b, H + j] + zgr[b, H + j])))
                g_all[t, b, j] = g
                r_all[t, b, j] = r
                spr[b, j] = sp[b, j] * r
        zh = np.dot(spr, u_h)
        for b in range(B):
            m = mask[t, b]
            for j in range(H):
                h = np.tanh(xw[t, b, 2 * H + j] + zh[b, j])
                g = g_all[t, b, j]
                sn = (1.0 - g) * (h * drop[t, b, j]) + g * sp[b, j]
                v = m * sn + (1.0 - m) * sp[b, j]
                s[b, j] = v
                out[t, b, j] = v
                sp_all[t, b, j] = sp[b, j]
                h_all[t, b, j] = h
    return out, sp_all, g_all, r_all, h_all


def _gru_backward_fused(d_out, ds_final, u_gr_t, u_h_t, sp_all, g_all, r_all, h_all, mask, keep, drop):
    T, B, H = sp_all.shape
    dt = sp_all.dtype
    da = np.zeros((T, B, 3 * H), dtype=dt)
    ds = ds_final.copy()
    dsp = np.empty((B, H), dtype=dt)
    dah = np.empty((B, H), dtype=dt)
    dagr = np.empty((B, 2 * H), dtype=dt)
    for t in range(T - 1, -1, -1):
        for b in range(B):
            m = mask[t, b]
            for j in range(H):
                dtot = d_out[t, b, j] + ds[b, j]
                dsn = dtot * m
                g = g_all[t, b, j]
                h = h_all[t, b, j]
                dr = drop[t, b, j]
                dsp[b, j] = dtot * (1.0 - m) + dsn * g
                dagr[b, j] = dsn * (sp_all[t, b, j] - h * dr) * g * (1.0 - g)
                dah[b, j] = dsn * (1.0 - g) * dr * (1.0 - h * h)
        dsr = np.dot(dah, u_h_t)
        for b in range(B):
            for j in range(H):
                r = r_all[t, b, j]
                dsp[b, j] += dsr[b, j] * r
                dagr[b, H + j] = dsr[b, j] * sp_all[t, b, j] * r * (1.0 - r)
        dgr = np.dot(dagr, u_gr_t)
        for b in range(B):
            k = keep[t, b]
            for j in range(H):
                da[t, b, j] = dagr[b, j]
                da[t, b, H + j] = dagr[b, H + j]
                da[t, b, 2 * H + j] = dah[b, j]
                ds[b, j] = (dsp[b, j] + dgr[b, j]) * k
    return da, ds


_gru_forward_nb = _njit(_gru_forward_fused)
_gru_backward_nb = _njit(_gru_backward_fused)


def gru_forward(xw, u_gr, u_h, s0, mask, keep, drop, force_numba=False):
    """Run the recurrent part of one GRU layer. Returns outputs and caches.

    Both backends use the numpy loop here unless ``force_numba``: the step is
    dominated by exp/tanh, which numpy evaluates with SIMD kernels while
    numba (without SVML) calls them one element at a time, about 1.7x
    slower on the reference machine. The compiled kernel is kept for
    benchmarks and parity tests.
    """
    fn = _gru_forward_nb if (force_numba and _backend == "numba") else _gru_forward_loop
    return fn(xw, u_gr, u_h, s0, mask, keep, drop)


def gru_backward(d_out, ds_final, u_gr_t, u_h_t, sp_all, g_all, r_all, h_all, mask, keep, drop):
    """Backward through the recurrence; returns pre-activation grads and d s0."""
    fn = _gru_backward_nb if _backend == "numba" else _gru_backward_loop
    return fn(d_out, ds_final, u_gr_t, u_h_t, sp_all, g_all, r_all, h_all, mask, keep, drop)


# ---------------------------------------------------------------------------
# Pessimistic ranks over ragged candidate pools


def _ranks_loop(scores, offsets, truth):
    n = offsets.shape[0] - 1
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        lo = offsets[i]
        hi = offsets[i + 1]
        target = scores[lo + truth[i]]
        c = 0
        for j in range(lo, hi):
            if scores[j] >= target:
                c += 1
        ranks[i] = c
    return ranks


def _ranks_numpy(scores, offsets, truth):
    lengths = np.diff(offsets)
    target = scores[offsets[:-1] + truth]
    ge = (scores >= np.repeat(target, lengths)).astype(np.int64)
    csum = np.concatenate(([0], np.cumsum(ge)))
    return csum[offsets[1:]] - csum[offsets[:-1]]


_ranks_nb = _njit(_ranks_loop)


def ragged_ranks(scores, offsets, truth):
    """Rank of the truth entry in each segment, ties counted ahead of it.

    ``offsets`` has one more entry than there are segments; ``truth`` holds the
    within-segment position of the ground-truth candidate. The truth entry
    itself is counted, so a strictly best truth gets rank 1.
    """
    scores = np.ascontiguousarray(scores)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    truth = np.ascontiguousarray(truth, dtype=np.int64)
    if len(offsets) <= 1:
        return np.zeros(0, dtype=np.int64)
    if np.any(np.diff(offsets) <= 0):
        raise ValueError("every pool must contain at least the ground truth")
    if _backend == "numba":
        return _ranks_nb(scores, offsets, truth)
    return _ranks_numpy(scores, offsets, truth)


# ---------------------------------------------------------------------------
# Mean over CSR neighbour lists (graph convolution aggregation)


def _segment_mean_loop(values, indptr, indices):
    n = indptr.shape[0] - 1
    d = values.shape[1]
    out = np.zeros((n, d), dtype=values.dtype)
    for u in range(n):
        lo = indptr[u]
        hi = indptr[u + 1]
        if hi == lo:
            continue
        for p in range(lo, hi):
            out[u] += values[indices[p]]
        out[u] /= hi - lo
    return out


def _segment_mean_numpy(values, indptr, indices):
    n = indptr.shape[0] - 1
    counts = np.diff(indptr)
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    nz = counts > 0
    if indices.size:
        sums = np.add.reduceat(values[indices], indptr[:-1][nz], axis=0)
        out[nz] = sums / counts[nz, None]
    return out


def _segment_mean_backward_loop(d_out, indptr, indices, n_src):
    n = indptr.shape[0] - 1
    d = d_out.shape[1]
    dv = np.zeros((n_src, d), dtype=d_out.dtype)
    for u in range(n):
        lo = indptr[u]
        hi = indptr[u + 1]
        if hi == lo:
            continue
        w = d_out[u] / (hi - lo)
        for p in range(lo, hi):
            dv[indices[p]] += w
    return dv


def _segment_mean_backward_numpy(d_out, indptr, indices, n_src):
    counts = np.diff(indptr)
    dv = np.zeros((n_src, d_out.shape[1]), dtype=d_out.dtype)
    if indices.size:
        owner = np.repeat(np.arange(len(counts)), counts)
        np.add.at(dv, indices, d_out[owner] / counts[owner, None])
    return dv


_segment_mean_nb = _njit(_segment_mean_loop)
_segment_mean_backward_nb = _njit(_segment_mean_backward_loop)


def segment_mean(values, indptr, indices):
    """Row ``u`` of the result is the mean of ``values[indices[indptr[u]:indptr[u+1]]]``.

    Empty segments produce zero rows.
    """
    values = np.ascontiguousarray(values)
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    if _backend == "numba":
        return _segment_mean_nb(values, indptr, indices)
    return _segment_mean_numpy(values, indptr, indices)


def segment_mean_backward(d_out, indptr, indices, n_src):
    d_out = np.ascontiguousarray(d_out)
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    if _backend == "numba":
        return _segment_mean_backward_nb(d_out, indptr, indices, n_src)
    return _segment_mean_backward_numpy(d_out, indptr, indices, n_src)


# ---------------------------------------------------------------------------
# Co-interaction pairs within a time window


def _window_pairs_loop(user_offsets, items, times, window):
    cap = 16
    a = np.empty(cap, dtype=np.int64)
    b = np.empty(cap, dtype=np.int64)
    n = 0
    for u in range(user_offsets.shape[0] - 1):
        lo = user_offsets[u]
        hi = user_offsets[u + 1]
        for i in range(lo, hi):
            for j in range(i + 1, hi):
                if times[j] - times[i] > window:
                    break
                if items[i] == items[j]:
                    continue
                if n == cap:
                    cap *= 2
                    a2 = np.empty(cap, dtype=np.int64)
                    b2 = np.empty(cap, dtype=np.int64)
                    a2[:n] = a[:n]
                    b2[:n] = b[:n]
                    a = a2
                    b = b2
                a[n] = items[i]
                b[n] = items[j]
                n += 1
    return a[:n], b[:n]


def _window_pairs_numpy(user_offsets, items, times, window):
    owner = np.repeat(np.arange(len(user_offsets) - 1), np.diff(user_offsets))
    out_a, out_b = [], []
    lag = 1
    while lag < len(items):
        same = owner[lag:] == owner[:-lag]
        close = (times[lag:] - times[:-lag]) <= window
        live = same & close
        if not live.any():
            break
        keep = live & (items[lag:] != items[:-lag])
        out_a.append(items[:-lag][keep])
        out_b.append(items[lag:][keep])
        lag += 1
    if not out_a:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(out_a), np.concatenate(out_b)


_window_pairs_nb = _njit(_window_pairs_loop)


def window_pairs(user_offsets, items, times, window):
    """All (earlier, later) item pairs of one user no more than ``window`` apart.

    ``times`` must be sorted within each user segment. Pairs of the same item
    are skipped. The order of returned pairs is backend specific.
    """
    user_offsets = np.ascontiguousarray(user_offsets, dtype=np.int64)
    items = np.ascontiguousarray(items, dtype=np.int64)
    times = np.ascontiguousarray(times, dtype=np.float64)
    if _backend == "numba":
        return _window_pairs_nb(user_offsets, items, times, float(window))
    return _window_pairs_numpy(user_offsets, items, times, float(window))
