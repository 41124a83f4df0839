"""Hot numeric kernels: fused LSTM recurrences and embedding scatter-add.

Every kernel has a pure-numpy implementation and a numba ``@njit`` twin with
the same signature. The numba path is used when numba imports and the
``DFNET_NUMBA`` environment variable is not ``0``; :func:`set_backend` switches
at runtime (tests and the benchmark use it to compare both paths).

Shapes follow one convention: ``E`` stacked experts (shared + private
recurrent cells evaluated together), ``B`` batch, ``T`` time, ``I`` input
width, ``H`` hidden width. Gate order inside the ``4H`` axis is i, f, g, o.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _sigmoid(z):
    # tanh form is overflow-free and matches the numba scalar path
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _positions(lengths, T, reverse):
    steps = np.arange(T)[:, None]
    active = steps < lengths[None, :]
    if reverse:
        pos = lengths[None, :] - 1 - steps
    else:
        pos = np.broadcast_to(steps, active.shape).copy()
    pos = np.where(active, pos, 0)
    return pos.astype(np.int64), active


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def lstm_seq_forward_np(x, W, b, lengths, reverse):
    B, T, I = x.shape
    E, _, H4 = W.shape
    H = H4 // 4
    pos, active = _positions(lengths, T, reverse)
    rows = np.arange(B)
    Wx, Wh = W[:, :I, :], W[:, I:, :]
    out = np.zeros((E, B, T, H), dtype=x.dtype)
    gates = np.zeros((T, E, B, H4), dtype=x.dtype)
    cprev = np.zeros((T, E, B, H), dtype=x.dtype)
    cnew = np.zeros((T, E, B, H), dtype=x.dtype)
    hprev = np.zeros((T, E, B, H), dtype=x.dtype)
    h = np.zeros((E, B, H), dtype=x.dtype)
    c = np.zeros((E, B, H), dtype=x.dtype)
    xw = np.matmul(x.reshape(1, B * T, I), Wx).reshape(E, B, T, H4) + b[:, None, None, :]
    for s in range(T):
        m = active[s]
        if not m.any():
            break
        z = xw[:, rows, pos[s]] + np.matmul(h, Wh)
        ig = _sigmoid(z[..., :H])
        fg = _sigmoid(z[..., H : 2 * H])
        gg = np.tanh(z[..., 2 * H : 3 * H])
        og = _sigmoid(z[..., 3 * H :])
        cn = fg * c + ig * gg
        hn = og * np.tanh(cn)
        hprev[s] = h
        cprev[s] = c
        cnew[s] = cn
        gates[s] = np.concatenate([ig, fg, gg, og], axis=-1)
        mm = m[None, :, None]
        c = np.where(mm, cn, c)
        h = np.where(mm, hn, h)
        idx = rows[m]
        out[:, idx, pos[s, m]] = hn[:, idx]
    return out, (gates, cprev, cnew, hprev)


def lstm_seq_backward_np(dout, x, W, lengths, reverse, cache):
    gates, cprev, cnew, hprev = cache
    B, T, I = x.shape
    E, _, H4 = W.shape
    H = H4 // 4
    pos, active = _positions(lengths, T, reverse)
    rows = np.arange(B)
    Wx, Wh = W[:, :I, :], W[:, I:, :]
    dW = np.zeros_like(W)
    dzall = np.zeros((E, B, T, H4), dtype=x.dtype)
    dh = np.zeros((E, B, H), dtype=x.dtype)
    dc = np.zeros((E, B, H), dtype=x.dtype)
    for s in range(T - 1, -1, -1):
        m = active[s]
        if not m.any():
            continue
        mm = m[None, :, None]
        dh = dh + dout[:, rows, pos[s]] * mm
        ig = gates[s, ..., :H]
        fg = gates[s, ..., H : 2 * H]
        gg = gates[s, ..., 2 * H : 3 * H]
        og = gates[s, ..., 3 * H :]
        tc = np.tanh(cnew[s])
        dcn = dc + dh * og * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dcn * gg * ig * (1.0 - ig),
                dcn * cprev[s] * fg * (1.0 - fg),
                dcn * ig * (1.0 - gg * gg),
                dh * tc * og * (1.0 - og),
            ],
            axis=-1,
        ) * mm
        dW[:, I:, :] += np.matmul(hprev[s].transpose(0, 2, 1), dz)
        idx = rows[m]
        dzall[:, idx, pos[s, m]] = dz[:, idx]
        dhp = np.matmul(dz, Wh.transpose(0, 2, 1))
        dh = np.where(mm, dhp, dh)
        dc = np.where(mm, dcn * fg, dc)
    dzf = dzall.reshape(E, B * T, H4)
    xf = x.reshape(B * T, I)
    dW[:, :I, :] = np.matmul(xf.T[None], dzf)
    db = dzf.sum(axis=1)
    dx = np.matmul(dzf, Wx.transpose(0, 2, 1)).sum(axis=0).reshape(B, T, I)
    return dx, dW, db


def lstm_step_forward_np(x, h, c, W, b):
    I = x.shape[1]
    H = h.shape[2]
    z = np.matmul(x, W[:, :I, :]) + np.matmul(h, W[:, I:, :]) + b[:, None, :]
    ig = _sigmoid(z[..., :H])
    fg = _sigmoid(z[..., H : 2 * H])
    gg = np.tanh(z[..., 2 * H : 3 * H])
    og = _sigmoid(z[..., 3 * H :])
    cn = fg * c + ig * gg
    hn = og * np.tanh(cn)
    return hn, cn, np.concatenate([ig, fg, gg, og], axis=-1)


def lstm_step_backward_np(dhn, dcn, x, h, c, W, cn, gates):
    I = x.shape[1]
    H = h.shape[2]
    ig = gates[..., :H]
    fg = gates[..., H : 2 * H]
    gg = gates[..., 2 * H : 3 * H]
    og = gates[..., 3 * H :]
    tc = np.tanh(cn)
    dct = dcn + dhn * og * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            dct * gg * ig * (1.0 - ig),
            dct * c * fg * (1.0 - fg),
            dct * ig * (1.0 - gg * gg),
            dhn * tc * og * (1.0 - og),
        ],
        axis=-1,
    )
    dW = np.empty_like(W)
    dW[:, :I, :] = np.matmul(x.T[None], dz)
    dW[:, I:, :] = np.matmul(h.transpose(0, 2, 1), dz)
    db = dz.sum(axis=1)
    dx = np.matmul(dz, W[:, :I, :].transpose(0, 2, 1)).sum(axis=0)
    dh = np.matmul(dz, W[:, I:, :].transpose(0, 2, 1))
    dc = dct * fg
    return dx, dh, dc, dW, db


def scatter_add_rows_np(out, ids, rows):
    np.add.at(out, ids, rows)
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _sig(v):
        return 0.5 * (1.0 + math.tanh(0.5 * v))

    @njit(cache=True)
    def _lstm_seq_forward_nb(x, W, b, pos, active):
        B, T, I = x.shape
        E = W.shape[0]
        H4 = W.shape[2]
        H = H4 // 4
        dt = x.dtype
        out = np.zeros((E, B, T, H), dtype=dt)
        gates = np.zeros((T, E, B, H4), dtype=dt)
        cprev = np.zeros((T, E, B, H), dtype=dt)
        cnew = np.zeros((T, E, B, H), dtype=dt)
        hprev = np.zeros((T, E, B, H), dtype=dt)
        h = np.zeros((E, B, H), dtype=dt)
        c = np.zeros((E, B, H), dtype=dt)
        xf = x.reshape(B * T, I)
        for e in range(E):
            # input projection for every position at once; only h @ Wh recurs
            xw = np.dot(xf, np.ascontiguousarray(W[e, :I, :])).reshape(B, T, H4)
            Wh = np.ascontiguousarray(W[e, I:, :])
            for s in range(T):
                he = h[e]
                hprev[s, e] = he
                cprev[s, e] = c[e]
                z = np.dot(he, Wh)
                for bb in range(B):
                    if not active[s, bb]:
                        continue
                    p = pos[s, bb]
                    for k in range(H):
                        ig = _sig(z[bb, k] + xw[bb, p, k] + b[e, k])
                        fg = _sig(z[bb, H + k] + xw[bb, p, H + k] + b[e, H + k])
                        gg = math.tanh(z[bb, 2 * H + k] + xw[bb, p, 2 * H + k] + b[e, 2 * H + k])
                        og = _sig(z[bb, 3 * H + k] + xw[bb, p, 3 * H + k] + b[e, 3 * H + k])
                        cn = fg * c[e, bb, k] + ig * gg
                        hn = og * math.tanh(cn)
                        gates[s, e, bb, k] = ig
                        gates[s, e, bb, H + k] = fg
                        gates[s, e, bb, 2 * H + k] = gg
                        gates[s, e, bb, 3 * H + k] = og
                        cnew[s, e, bb, k] = cn
                        c[e, bb, k] = cn
                        h[e, bb, k] = hn
                        out[e, bb, p, k] = hn
        return out, gates, cprev, cnew, hprev

    @njit(cache=True)
    def _lstm_seq_backward_nb(dout, x, W, pos, active, gates, cprev, cnew, hprev):
        B, T, I = x.shape
        E = W.shape[0]
        H4 = W.shape[2]
        H = H4 // 4
        dt = x.dtype
        dW = np.zeros(W.shape, dtype=dt)
        db = np.zeros((E, H4), dtype=dt)
        dx = np.zeros((B * T, I), dtype=dt)
        xf = x.reshape(B * T, I)
        dh = np.zeros((B, H), dtype=dt)
        dc = np.zeros((B, H), dtype=dt)
        dz = np.zeros((B, H4), dtype=dt)
        dzall = np.zeros((B, T, H4), dtype=dt)
        for e in range(E):
            WhT = np.ascontiguousarray(W[e, I:, :].T)
            dh[:] = 0.0
            dc[:] = 0.0
            dzall[:] = 0.0
            dWh = np.zeros((H, H4), dtype=dt)
            for s in range(T - 1, -1, -1):
                for bb in range(B):
                    if not active[s, bb]:
                        dz[bb] = 0.0
                        continue
                    p = pos[s, bb]
                    for k in range(H):
                        dhv = dh[bb, k] + dout[e, bb, p, k]
                        ig = gates[s, e, bb, k]
                        fg = gates[s, e, bb, H + k]
                        gg = gates[s, e, bb, 2 * H + k]
                        og = gates[s, e, bb, 3 * H + k]
                        tc = math.tanh(cnew[s, e, bb, k])
                        dcn = dc[bb, k] + dhv * og * (1.0 - tc * tc)
                        dz[bb, k] = dcn * gg * ig * (1.0 - ig)
                        dz[bb, H + k] = dcn * cprev[s, e, bb, k] * fg * (1.0 - fg)
                        dz[bb, 2 * H + k] = dcn * ig * (1.0 - gg * gg)
                        dz[bb, 3 * H + k] = dhv * tc * og * (1.0 - og)
                        dc[bb, k] = dcn * fg
                    for k in range(H4):
                        dzall[bb, p, k] = dz[bb, k]
                dWh += np.dot(np.ascontiguousarray(hprev[s, e]).T, dz)
                dhp = np.dot(dz, WhT)
                for bb in range(B):
                    if active[s, bb]:
                        for k in range(H):
                            dh[bb, k] = dhp[bb, k]
            dzf = dzall.reshape(B * T, H4)
            dW[e, I:, :] = dWh
            dW[e, :I, :] = np.dot(xf.T, dzf)
            db[e] = dzf.sum(axis=0)
            dx += np.dot(dzf, np.ascontiguousarray(W[e, :I, :].T))
        return dx.reshape(B, T, I), dW, db

    @njit(cache=True)
    def _lstm_step_forward_nb(x, h, c, W, b):
        B, I = x.shape
        E = W.shape[0]
        H = h.shape[2]
        dt = x.dtype
        hn = np.empty((E, B, H), dtype=dt)
        cn = np.empty((E, B, H), dtype=dt)
        gates = np.empty((E, B, 4 * H), dtype=dt)
        for e in range(E):
            z = np.dot(x, np.ascontiguousarray(W[e, :I, :])) + np.dot(
                np.ascontiguousarray(h[e]), np.ascontiguousarray(W[e, I:, :])
            )
            for bb in range(B):
                for k in range(H):
                    ig = _sig(z[bb, k] + b[e, k])
                    fg = _sig(z[bb, H + k] + b[e, H + k])
                    gg = math.tanh(z[bb, 2 * H + k] + b[e, 2 * H + k])
                    og = _sig(z[bb, 3 * H + k] + b[e, 3 * H + k])
                    cv = fg * c[e, bb, k] + ig * gg
                    cn[e, bb, k] = cv
                    hn[e, bb, k] = og * math.tanh(cv)
                    gates[e, bb, k] = ig
                    gates[e, bb, H + k] = fg
                    gates[e, bb, 2 * H + k] = gg
                    gates[e, bb, 3 * H + k] = og
        return hn, cn, gates

    @njit(cache=True)
    def _lstm_step_backward_nb(dhn, dcn, x, h, c, W, cn, gates):
        B, I = x.shape
        E = W.shape[0]
        H = h.shape[2]
        dt = x.dtype
        dW = np.empty(W.shape, dtype=dt)
        db = np.zeros((E, 4 * H), dtype=dt)
        dx = np.zeros((B, I), dtype=dt)
        dh = np.empty((E, B, H), dtype=dt)
        dc = np.empty((E, B, H), dtype=dt)
        dz = np.empty((B, 4 * H), dtype=dt)
        for e in range(E):
            for bb in range(B):
                for k in range(H):
                    ig = gates[e, bb, k]
                    fg = gates[e, bb, H + k]
                    gg = gates[e, bb, 2 * H + k]
                    og = gates[e, bb, 3 * H + k]
                    tc = math.tanh(cn[e, bb, k])
                    dct = dcn[e, bb, k] + dhn[e, bb, k] * og * (1.0 - tc * tc)
                    dz[bb, k] = dct * gg * ig * (1.0 - ig)
                    dz[bb, H + k] = dct * c[e, bb, k] * fg * (1.0 - fg)
                    dz[bb, 2 * H + k] = dct * ig * (1.0 - gg * gg)
                    dz[bb, 3 * H + k] = dhn[e, bb, k] * tc * og * (1.0 - og)
                    dc[e, bb, k] = dct * fg
            dW[e, :I, :] = np.dot(x.T, dz)
            dW[e, I:, :] = np.dot(np.ascontiguousarray(h[e]).T, dz)
            for bb in range(B):
                for k in range(4 * H):
                    db[e, k] += dz[bb, k]
            dx += np.dot(dz, np.ascontiguousarray(W[e, :I, :]).T)
            dh[e] = np.dot(dz, np.ascontiguousarray(W[e, I:, :]).T)
        return dx, dh, dc, dW, db

    @njit(cache=True)
    def _scatter_add_rows_nb(out, ids, rows):
        for n in range(ids.shape[0]):
            r = ids[n]
            for k in range(rows.shape[1]):
                out[r, k] += rows[n, k]
        return out

    def lstm_seq_forward_nb(x, W, b, lengths, reverse):
        pos, active = _positions(lengths, x.shape[1], reverse)
        x = np.ascontiguousarray(x)
        W = np.ascontiguousarray(W)
        b = np.ascontiguousarray(b)
        out, gates, cprev, cnew, hprev = _lstm_seq_forward_nb(x, W, b, pos, active)
        return out, (gates, cprev, cnew, hprev)

    def lstm_seq_backward_nb(dout, x, W, lengths, reverse, cache):
        pos, active = _positions(lengths, x.shape[1], reverse)
        gates, cprev, cnew, hprev = cache
        return _lstm_seq_backward_nb(
            np.ascontiguousarray(dout),
            np.ascontiguousarray(x),
            np.ascontiguousarray(W),
            pos,
            active,
            gates,
            cprev,
            cnew,
            hprev,
        )

    def lstm_step_forward_nb(x, h, c, W, b):
        return _lstm_step_forward_nb(
            np.ascontiguousarray(x),
            np.ascontiguousarray(h),
            np.ascontiguousarray(c),
            np.ascontiguousarray(W),
            np.ascontiguousarray(b),
        )

    def lstm_step_backward_nb(dhn, dcn, x, h, c, W, cn, gates):
        return _lstm_step_backward_nb(
            np.ascontiguousarray(dhn),
            np.ascontiguousarray(dcn),
            np.ascontiguousarray(x),
            np.ascontiguousarray(h),
            np.ascontiguousarray(c),
            np.ascontiguousarray(W),
            cn,
            gates,
        )

    def scatter_add_rows_nb(out, ids, rows):
        return _scatter_add_rows_nb(out, np.ascontiguousarray(ids, dtype=np.int64), np.ascontiguousarray(rows))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_NAMES = (
    "lstm_seq_forward",
    "lstm_seq_backward",
    "lstm_step_forward",
    "lstm_step_backward",
    "scatter_add_rows",
)

_backend = "numpy"


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for all subsequent calls."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not importable")
    suffix = "_nb" if name == "numba" else "_np"
    g = globals()
    for n in _NAMES:
        g[n] = g[n + suffix]
    _backend = name


def get_backend() -> str:
    return _backend


def _default_backend() -> str:
    flag = os.environ.get("DFNET_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or not HAS_NUMBA:
        return "numpy"
    return "numba"


lstm_seq_forward = lstm_seq_forward_np
lstm_seq_backward = lstm_seq_backward_np
lstm_step_forward = lstm_step_forward_np
lstm_step_backward = lstm_step_backward_np
scatter_add_rows = scatter_add_rows_np

set_backend(_default_backend())
