"""Fused inner loops for the transformer hot path.

Two rules, both learned from profiling on small CPUs: transcendentals (exp,
tanh) go through numpy's SIMD ufuncs, and everything else is fused into
serial numba loops. Parallel numba is deliberately avoided: its worker pool
fights the BLAS thread pool and costs more in wakeups than it saves.

Every kernel has a pure-numpy fallback with identical semantics; set
FACTLAB_NO_NUMBA=1 to force the fallbacks.
"""

from __future__ import annotations

import math
import os

import numpy as np

_USE_NUMBA = os.environ.get("FACTLAB_NO_NUMBA", "") == ""
if _USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        _USE_NUMBA = False

if _USE_NUMBA:

    @njit(cache=True, fastmath=True)
    def _smax_shift_causal(s):
        # per row i: subtract max over columns <= i, set the rest to -inf
        N, T, _ = s.shape
        for n in range(N):
            for i in range(T):
                row = s[n, i]
                m = row[0]
                for j in range(1, i + 1):
                    if row[j] > m:
                        m = row[j]
                for j in range(i + 1):
                    row[j] -= m
                for j in range(i + 1, T):
                    row[j] = -np.inf

    @njit(cache=True, fastmath=True)
    def _rownorm(s):
        N, T, _ = s.shape
        for n in range(N):
            for i in range(T):
                row = s[n, i]
                tot = 0.0
                for j in range(T):
                    tot += row[j]
                # tot can only vanish on non-finite scores; poison the row so
                # the divergence check downstream sees it
                inv = 1.0 / tot if tot > 0.0 else np.nan
                for j in range(T):
                    row[j] *= inv

    @njit(cache=True, fastmath=True)
    def _softmax_bwd_causal(probs, dprobs):
        N, T, _ = probs.shape
        for n in range(N):
            for i in range(T):
                p = probs[n, i]
                dp = dprobs[n, i]
                dot = 0.0
                for j in range(i + 1):
                    dot += dp[j] * p[j]
                for j in range(i + 1):
                    dp[j] = p[j] * (dp[j] - dot)
                for j in range(i + 1, T):
                    dp[j] = 0.0

    @njit(cache=True)
    def _rope_rotate(x, cos, sin, out):
        N, T, d = x.shape
        half = d // 2
        for n in range(N):
            for t in range(T):
                for j in range(half):
                    a = x[n, t, j]
                    b = x[n, t, half + j]
                    c = cos[t, j]
                    s = sin[t, j]
                    out[n, t, j] = a * c - b * s
                    out[n, t, half + j] = b * c + a * s

    @njit(cache=True, fastmath=True)
    def _silu_combine(g, u, sig, m_out):
        # sig holds tanh(g/2) on entry, sigmoid(g) on exit
        N, I = g.shape
        for n in range(N):
            for j in range(I):
                s = 0.5 * (1.0 + sig[n, j])
                sig[n, j] = s
                m_out[n, j] = g[n, j] * s * u[n, j]

    @njit(cache=True, fastmath=True)
    def _silu_gate_bwd(dm, g, u, sig, dg_out, du_out):
        N, I = g.shape
        for n in range(N):
            for j in range(I):
                du_out[n, j] = dm[n, j] * g[n, j] * sig[n, j]
                dg_out[n, j] = dm[n, j] * u[n, j] * (sig[n, j] * (1.0 + g[n, j] * (1.0 - sig[n, j])))

    @njit(cache=True)
    def _rmsnorm_fwd(x, gain, eps, y_out, inv_out):
        N, h = x.shape
        for n in range(N):
            ss = 0.0
            for j in range(h):
                ss += x[n, j] * x[n, j]
            denom = math.sqrt(ss / h + eps)
            inv = 1.0 / denom if denom > 0.0 else np.nan  # inf/nan inputs poison the row
            inv_out[n] = inv
            for j in range(h):
                y_out[n, j] = x[n, j] * inv * gain[j]

    @njit(cache=True, fastmath=True)
    def _rmsnorm_bwd_dx(dy, x, gain, inv, dx_out, dgain_out):
        N, h = x.shape
        for j in range(h):
            dgain_out[j] = 0.0
        for n in range(N):
            dot = 0.0
            for j in range(h):
                dot += dy[n, j] * gain[j] * x[n, j]
            c = dot * inv[n] ** 3 / h
            for j in range(h):
                dx_out[n, j] = dy[n, j] * gain[j] * inv[n] - x[n, j] * c
                dgain_out[j] += dy[n, j] * x[n, j] * inv[n]

    @njit(cache=True, fastmath=True)
    def _ce_shift(logits, sel, shifted, mrow):
        N, V = logits.shape
        for n in range(N):
            if not sel[n]:
                mrow[n] = 0.0
                for j in range(V):
                    shifted[n, j] = -np.inf  # exp -> 0, row drops out
                continue
            row = logits[n]
            m = row[0]
            for j in range(1, V):
                if row[j] > m:
                    m = row[j]
            mrow[n] = m
            for j in range(V):
                shifted[n, j] = row[j] - m

    @njit(cache=True, fastmath=True)
    def _ce_final(exps, logits, targets, sel, mrow, inv_n, loss_out):
        # exps becomes dlogits in place
        N, V = exps.shape
        for n in range(N):
            if not sel[n]:
                loss_out[n] = 0.0
                for j in range(V):
                    exps[n, j] = 0.0
                continue
            tot = 0.0
            for j in range(V):
                tot += exps[n, j]
            if not tot > 0.0:  # non-finite logits; surface as NaN loss
                loss_out[n] = np.nan
                for j in range(V):
                    exps[n, j] = np.nan
                continue
            t = targets[n]
            loss_out[n] = mrow[n] + math.log(tot) - logits[n, t]
            c = inv_n / tot
            for j in range(V):
                exps[n, j] *= c
            exps[n, t] -= inv_n

    @njit(cache=True)
    def _embed_grad(ids, dx, out):
        N, h = dx.shape
        for n in range(N):
            row = ids[n]
            for j in range(h):
                out[row, j] += dx[n, j]

else:  # numpy fallbacks

    def _smax_shift_causal(s):
        T = s.shape[1]
        upper = np.triu(np.ones((T, T), dtype=bool), k=1)
        s[:, upper] = -np.inf
        m = np.max(s, axis=-1, keepdims=True)
        np.subtract(s, m, out=s)

    def _rownorm(s):
        tot = np.sum(s, axis=-1, keepdims=True)
        np.divide(s, tot, out=s)

    def _softmax_bwd_causal(probs, dprobs):
        dot = np.sum(dprobs * probs, axis=-1, keepdims=True)
        np.subtract(dprobs, dot, out=dprobs)
        np.multiply(dprobs, probs, out=dprobs)

    def _rope_rotate(x, cos, sin, out):
        half = x.shape[-1] // 2
        a, b = x[..., :half], x[..., half:]
        out[..., :half] = a * cos - b * sin
        out[..., half:] = b * cos + a * sin

    def _silu_combine(g, u, sig, m_out):
        sig += 1.0
        sig *= 0.5
        np.multiply(g, sig, out=m_out)
        m_out *= u

    def _silu_gate_bwd(dm, g, u, sig, dg_out, du_out):
        np.multiply(dm, g * sig, out=du_out)
        np.multiply(dm, u * (sig * (1.0 + g * (1.0 - sig))), out=dg_out)

    def _rmsnorm_fwd(x, gain, eps, y_out, inv_out):
        ms = np.mean(np.square(x), axis=-1)
        np.divide(1.0, np.sqrt(ms + eps), out=inv_out)
        np.multiply(x, inv_out[:, None], out=y_out)
        y_out *= gain

    def _rmsnorm_bwd_dx(dy, x, gain, inv, dx_out, dgain_out):
        h = x.shape[-1]
        xg = dy * gain
        dot = np.sum(xg * x, axis=-1)
        np.multiply(xg, inv[:, None], out=dx_out)
        dx_out -= x * (dot * inv**3 / h)[:, None]
        dgain_out[:] = (dy * x * inv[:, None]).sum(axis=0)

    def _ce_shift(logits, sel, shifted, mrow):
        m = np.max(logits, axis=-1)
        mrow[:] = np.where(sel, m, 0.0)
        np.subtract(logits, mrow[:, None], out=shifted)
        shifted[~sel] = -np.inf

    def _ce_final(exps, logits, targets, sel, mrow, inv_n, loss_out):
        tot = np.sum(exps, axis=-1)
        safe_tot = np.where(sel, tot, 1.0)
        idx = np.arange(len(targets))
        loss_out[:] = np.where(sel, mrow + np.log(safe_tot) - logits[idx, targets], 0.0)
        np.multiply(exps, (inv_n / safe_tot)[:, None], out=exps)
        exps[idx[sel], targets[sel]] -= inv_n
        exps[~sel] = 0.0

    def _embed_grad(ids, dx, out):
        np.add.at(out, ids, dx)


def softmax_causal_(scores: np.ndarray) -> np.ndarray:
    """In-place causal softmax over (N, T, T); entries above the diagonal become 0."""
    _smax_shift_causal(scores)
    np.exp(scores, out=scores)
    _rownorm(scores)
    return scores


def softmax_causal_bwd_(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """In-place: dprobs becomes dscores for the causal softmax."""
    _softmax_bwd_causal(probs, dprobs)
    return dprobs


def rope_rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate-half position encoding on contiguous (N, T, d)."""
    out = np.empty_like(x)
    _rope_rotate(x, cos, sin, out)
    return out


def silu_gate(g: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """silu(g) * u and the cached sigmoid(g)."""
    sig = np.multiply(g, g.dtype.type(0.5))
    np.tanh(sig, out=sig)
    m = np.empty_like(sig)
    _silu_combine(g, u, sig, m)
    return m, sig


def silu_gate_bwd(dm, g, u, sig) -> tuple[np.ndarray, np.ndarray]:
    dg = np.empty_like(sig)
    du = np.empty_like(sig)
    _silu_gate_bwd(dm, g, u, sig, dg, du)
    return dg, du


def rmsnorm_fwd(x2: np.ndarray, gain: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """x2 is (N, h); returns (normed, 1/rms per row)."""
    y = np.empty_like(x2)
    inv = np.empty(x2.shape[0], dtype=x2.dtype)
    _rmsnorm_fwd(x2, gain, x2.dtype.type(eps), y, inv)
    return y, inv


def rmsnorm_bwd(dy2, x2, gain, inv) -> tuple[np.ndarray, np.ndarray]:
    dx = np.empty_like(x2)
    dgain = np.empty_like(gain)
    _rmsnorm_bwd_dx(dy2, x2, gain, inv, dx, dgain)
    return dx, dgain


def ce_loss_and_dlogits(logits2, targets, sel, n_mask) -> tuple[float, np.ndarray]:
    """Summed cross-entropy over selected rows, and d(mean loss)/dlogits."""
    shifted = np.empty_like(logits2)
    mrow = np.empty(logits2.shape[0], dtype=logits2.dtype)
    _ce_shift(logits2, sel, shifted, mrow)
    np.exp(shifted, out=shifted)
    loss_rows = np.empty(logits2.shape[0], dtype=np.float64)
    _ce_final(shifted, logits2, targets, sel, mrow, logits2.dtype.type(1.0 / n_mask), loss_rows)
    return float(loss_rows.sum(dtype=np.float64)), shifted


def embed_grad(ids, dx, vocab: int) -> np.ndarray:
    out = np.zeros((vocab, dx.shape[-1]), dtype=dx.dtype)
    _embed_grad(np.ascontiguousarray(ids), dx, out)
    return out
