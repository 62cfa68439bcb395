"""Recurrent cells, bidirectional encoder and additive attention.

Each building block comes in two forms:

* a *composed* version written with numcore primitives (``lstm_step``,
  ``gru_step``, ``mlp_attention``), readable and differentiated op by op;
* a *fused* version (``lstm_scan``, ``gru_cell``, ``additive_attention``)
  that records a single tape node with a hand-written backward.  The model
  uses the fused versions; tests hold them to the composed ones.

Gate layouts are fixed: LSTM rows are (input, forget, cell, output), GRU rows
are (reset, update, candidate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import InputError, ShapeError
from .numcore import Tensor, make_output


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    k = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-k, k, size=shape).astype(dtype)


@dataclass
class LstmCellParams:
    w_ih: Tensor  # [4h x d]
    w_hh: Tensor  # [4h x h]
    b: Tensor  # [4h]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_ih.shape[1]

    @classmethod
    def init(cls, rng, input_dim: int, hidden: int, dtype=np.float64) -> "LstmCellParams":
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden : 2 * hidden] = 1.0  # forget gate
        return cls(
            nc.parameter(uniform_init(rng, (4 * hidden, input_dim), input_dim, dtype)),
            nc.parameter(uniform_init(rng, (4 * hidden, hidden), hidden, dtype)),
            nc.parameter(b),
        )

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w_ih", self.w_ih), ("w_hh", self.w_hh), ("b", self.b)]


@dataclass
class GruCellParams:
    w_ih: Tensor  # [3h x d]
    w_hh: Tensor  # [3h x h]
    b: Tensor  # [3h]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_ih.shape[1]

    @classmethod
    def init(cls, rng, input_dim: int, hidden: int, dtype=np.float64) -> "GruCellParams":
        return cls(
            nc.parameter(uniform_init(rng, (3 * hidden, input_dim), input_dim, dtype)),
            nc.parameter(uniform_init(rng, (3 * hidden, hidden), hidden, dtype)),
            nc.parameter(np.zeros(3 * hidden, dtype=dtype)),
        )

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w_ih", self.w_ih), ("w_hh", self.w_hh), ("b", self.b)]


@dataclass
class AttentionParams:
    w_item: Tensor  # [a x e]
    w_query: Tensor  # [a x q]
    score: Tensor  # [a]

    @classmethod
    def init(cls, rng, item_dim: int, query_dim: int, att_dim: int, dtype=np.float64) -> "AttentionParams":
        if att_dim <= 0:
            raise ValueError("attention dimension must be positive")
        return cls(
            nc.parameter(uniform_init(rng, (att_dim, item_dim), item_dim, dtype)),
            nc.parameter(uniform_init(rng, (att_dim, query_dim), query_dim, dtype)),
            nc.parameter(uniform_init(rng, (att_dim,), att_dim, dtype)),
        )

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w_item", self.w_item), ("w_query", self.w_query), ("score", self.score)]


def _check_cell_input(x: Tensor, h: Tensor, input_dim: int, hidden: int, cell: str) -> None:
    if x.shape[-1] != input_dim or h.shape[-1] != hidden or x.shape[:-1] != h.shape[:-1]:
        raise ShapeError(
            f"{cell}: expected input [..x{input_dim}] and state [..x{hidden}], got {x.shape} and {h.shape}"
        )


# --- composed reference cells -------------------------------------------------


def lstm_step(params: LstmCellParams, x_t: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    h, c = state
    n = params.hidden
    _check_cell_input(x_t, h, params.input_dim, n, "lstm_step")
    pre = x_t @ params.w_ih.T + h @ params.w_hh.T + params.b
    i = nc.sigmoid(pre[..., 0:n])
    f = nc.sigmoid(pre[..., n : 2 * n])
    g = nc.tanh(pre[..., 2 * n : 3 * n])
    o = nc.sigmoid(pre[..., 3 * n : 4 * n])
    c_new = f * c + i * g
    return o * nc.tanh(c_new), c_new


def gru_step(params: GruCellParams, x_t: Tensor, h: Tensor) -> Tensor:
    n = params.hidden
    _check_cell_input(x_t, h, params.input_dim, n, "gru_step")
    a = x_t @ params.w_ih.T + params.b
    u = h @ params.w_hh.T
    r = nc.sigmoid(a[..., 0:n] + u[..., 0:n])
    z = nc.sigmoid(a[..., n : 2 * n] + u[..., n : 2 * n])
    cand = nc.tanh(a[..., 2 * n :] + r * u[..., 2 * n :])
    return (1.0 - z) * cand + z * h


def mlp_attention(params: AttentionParams, items: Tensor, query: Tensor) -> tuple[Tensor, Tensor]:
    """Additive attention of one query over ``items`` [n x e].

    Returns the context vector [e] and the weight vector [n].
    """
    if items.ndim != 2 or items.shape[0] == 0:
        raise InputError(f"mlp_attention needs at least one item, got items of shape {items.shape}")
    keys = items @ params.w_item.T  # [n x a]
    q = params.w_query @ query  # [a]
    scores = nc.reshape(nc.tanh(keys + q) @ params.score, (items.shape[0],))
    weights = nc.softmax(scores)
    context = nc.reshape(nc.reshape(weights, (1, -1)) @ items, (items.shape[1],))
    return context, weights


# --- fused fast paths -----------------------------------------------------------


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _gate_constants(n: int, dtype):
    # sigmoid(x) = 0.5 + 0.5 tanh(x / 2): one tanh call covers all four gates
    scale = np.full(4 * n, 0.5, dtype=dtype)
    scale[2 * n : 3 * n] = 1.0
    shift = np.full(4 * n, 0.5, dtype=dtype)
    shift[2 * n : 3 * n] = 0.0
    return scale, shift


def _time_major(a: np.ndarray, reverse: bool) -> np.ndarray:
    a = a.transpose(1, 0, 2)
    return a[::-1] if reverse else a


def _batch_major(a: np.ndarray, reverse: bool) -> np.ndarray:
    return (a[::-1] if reverse else a).transpose(1, 0, 2)


def _multi_scan(x: Tensor, cells: list, reverses: list, mask: np.ndarray | None) -> Tensor:
    """Scan several LSTMs over the same input in one loop.

    Direction k reads the sequence backwards when ``reverses[k]``.  Outputs
    are concatenated on the feature axis: [B x T x (D * h)].
    """
    xd = x.data
    B, T, d_in = xd.shape
    D = len(cells)
    n = cells[0].hidden
    for cell in cells:
        if cell.input_dim != d_in or cell.hidden != n:
            raise ShapeError(f"lstm scan: input dim {d_in} does not match cell shape {cell.w_ih.shape}")
    dt = xd.dtype
    scale, shift = _gate_constants(n, dt)
    x2 = xd.reshape(-1, d_in)
    Ws = [c.w_ih.data for c in cells]
    Us = [c.w_hh.data for c in cells]
    # step k of direction j works on time index k (forward) or T-1-k (reverse)
    xs = np.empty((T, D, B, 4 * n), dtype=dt)
    for j, (c, rev) in enumerate(zip(cells, reverses)):
        xw = (x2 @ c.w_ih.data.T + c.b.data) * scale
        xs[:, j] = _time_major(xw.reshape(B, T, 4 * n), rev)
    us_t = np.stack([np.ascontiguousarray((U * scale[:, None]).T) for U in Us])  # [D x h x 4h]
    u_stack = np.stack(Us)  # [D x 4h x h]
    mask_b = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    m = np.empty((T, D, B, 1), dtype=dt)
    for j, rev in enumerate(reverses):
        m[:, j, :, 0] = mask_b.T[::-1] if rev else mask_b.T
    full = m.reshape(T, -1).min(axis=1) > 0

    th = np.empty((T, D, B, 4 * n), dtype=dt)
    act = np.empty_like(th)
    tcs = np.empty((T, D, B, n), dtype=dt)
    h_prev = np.empty_like(tcs)
    c_prev = np.empty_like(tcs)
    out = np.empty_like(tcs)
    h = np.zeros((D, B, n), dtype=dt)
    c = np.zeros((D, B, n), dtype=dt)
    for k in range(T):
        h_prev[k] = h
        c_prev[k] = c
        np.tanh(xs[k] + h @ us_t, out=th[k])
        a = act[k]
        np.multiply(th[k], scale, out=a)
        a += shift
        c_new = a[..., n : 2 * n] * c
        c_new += a[..., :n] * a[..., 2 * n : 3 * n]
        tc = np.tanh(c_new, out=tcs[k])
        h_new = np.multiply(a[..., 3 * n :], tc, out=out[k])
        if full[k]:
            c, h = c_new, h_new.copy()
        else:
            mk = m[k]
            c = mk * c_new + (1.0 - mk) * c
            h = mk * h_new + (1.0 - mk) * h
            h_new *= mk

    def bw(gout):
        g_t = np.empty((T, D, B, n), dtype=dt)
        for j, rev in enumerate(reverses):
            g_t[:, j] = _time_major(gout[:, :, j * n : (j + 1) * n], rev)
        deriv = (1.0 - th * th) * (scale * scale)
        dpre = np.empty_like(th)
        dh_next = np.zeros((D, B, n), dtype=dt)
        dc_next = np.zeros((D, B, n), dtype=dt)
        for k in range(T - 1, -1, -1):
            a = act[k]
            tc = tcs[k]
            if full[k]:
                dh = g_t[k] + dh_next
                dc = dh * a[..., 3 * n :] * (1.0 - tc * tc) + dc_next
            else:
                mk = m[k]
                dh = mk * (g_t[k] + dh_next)
                dc = dh * a[..., 3 * n :] * (1.0 - tc * tc) + mk * dc_next
            dk = dpre[k]
            np.multiply(dc, a[..., 2 * n : 3 * n], out=dk[..., :n])
            np.multiply(dc, c_prev[k], out=dk[..., n : 2 * n])
            np.multiply(dc, a[..., :n], out=dk[..., 2 * n : 3 * n])
            np.multiply(dh, tc, out=dk[..., 3 * n :])
            dk *= deriv[k]
            if full[k]:
                dh_next = dk @ u_stack
                dc_next = dc * a[..., n : 2 * n]
            else:
                mk = m[k]
                dh_next = dk @ u_stack + (1.0 - mk) * dh_next
                dc_next = dc * a[..., n : 2 * n] + (1.0 - mk) * dc_next
        grads = [None]
        dx = np.zeros((B * T, d_in), dtype=dt)
        for j, rev in enumerate(reverses):
            flat_bt = np.ascontiguousarray(_batch_major(dpre[:, j], rev)).reshape(-1, 4 * n)
            dx += flat_bt @ Ws[j]
            dU = dpre[:, j].reshape(-1, 4 * n).T @ h_prev[:, j].reshape(-1, n)
            grads += [flat_bt.T @ x2, dU, flat_bt.sum(axis=0)]
        grads[0] = dx.reshape(xd.shape)
        return tuple(grads)

    pieces = [_batch_major(out[:, j], rev) for j, rev in enumerate(reverses)]
    result = np.ascontiguousarray(np.concatenate(pieces, axis=2))
    inputs = (x,) + tuple(t for c in cells for t in (c.w_ih, c.w_hh, c.b))
    return make_output("lstm_scan", result, inputs, bw)


def lstm_scan(x: Tensor, params: LstmCellParams, mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x`` [B x T x d] from a zero state.

    ``mask`` [B x T] marks valid frames; at invalid frames the state is
    carried unchanged and the output is zero.  With ``reverse`` the scan
    runs from the last frame to the first, so right-padding never leaks into
    valid positions.
    """
    return _multi_scan(x, [params], [reverse], mask)


def bilstm_scan(x: Tensor, fwd: LstmCellParams, bwd: LstmCellParams, mask: np.ndarray | None = None) -> Tensor:
    """Both directions of one bidirectional layer, outputs concatenated [fwd; bwd]."""
    return _multi_scan(x, [fwd, bwd], [False, True], mask)


def gru_cell(params: GruCellParams, x: Tensor, h: Tensor) -> Tensor:
    """Batched GRU update on [B x d] inputs; same math as :func:`gru_step`."""
    n = params.hidden
    _check_cell_input(x, h, params.input_dim, n, "gru_cell")
    W, U, b = params.w_ih.data, params.w_hh.data, params.b.data
    xd, hd = x.data, h.data
    a = xd @ W.T + b
    u = hd @ U.T
    r = _sig(a[:, :n] + u[:, :n])
    z = _sig(a[:, n : 2 * n] + u[:, n : 2 * n])
    un = u[:, 2 * n :]
    cand = np.tanh(a[:, 2 * n :] + r * un)
    out = (1.0 - z) * cand + z * hd

    def bw(g):
        dcand = g * (1.0 - z) * (1.0 - cand * cand)
        dz = g * (hd - cand) * z * (1.0 - z)
        dr = dcand * un * r * (1.0 - r)
        da = np.concatenate([dr, dz, dcand], axis=1)
        du = np.concatenate([dr, dz, dcand * r], axis=1)
        return (da @ W, g * z + du @ U, da.T @ xd, du.T @ hd, da.sum(axis=0))

    return make_output("gru_cell", out, (x, h, params.w_ih, params.w_hh, params.b), bw)


def additive_attention(
    keys: Tensor,
    items: Tensor,
    query: Tensor,
    params: AttentionParams,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Batched additive attention.

    ``keys`` [B x n x a] are the items already projected by ``params.w_item``
    (computed once per utterance for encoder states), ``items`` [B x n x e],
    ``query`` [B x q].  Invalid items (``mask`` False) get zero weight.
    Returns the context [B x e] and the weights [B x n] (not differentiable).
    """
    kd, vd, qd = keys.data, items.data, query.data
    Wq, sv = params.w_query.data, params.score.data
    t = np.tanh(kd + (qd @ Wq.T)[:, None, :])
    s = t @ sv
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    alpha = e / e.sum(axis=1, keepdims=True)
    ctx = np.einsum("bn,bne->be", alpha, vd)

    def bw(g):
        dalpha = np.einsum("be,bne->bn", g, vd)
        ditems = alpha[:, :, None] * g[:, None, :]
        ds = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        dscore = np.einsum("bna,bn->a", t, ds)
        dpre = ds[:, :, None] * sv * (1.0 - t * t)
        dq = dpre.sum(axis=1)
        return dpre, ditems, dq @ Wq, dq.T @ qd, dscore

    context = make_output("additive_attention", ctx, (keys, items, query, params.w_query, params.score), bw)
    return context, alpha


def subsample(x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Keep even-indexed timesteps (ceil semantics on length)."""
    return x[:, ::2], mask[:, ::2]


def bilstm_encoder(
    layers: list[tuple[LstmCellParams, LstmCellParams]],
    x: Tensor,
    subsample_layers=frozenset(),
    mask: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Stacked bidirectional LSTM.

    ``x`` is [T x d] or [B x T x d]; ``subsample_layers`` holds 1-based layer
    numbers after which every second timestep is dropped.  Returns the
    states [(B x) T' x 2h] and the [B x T'] validity mask.
    """
    if not layers:
        raise InputError("bilstm_encoder needs at least one layer")
    single = x.ndim == 2
    if single:
        x = nc.reshape(x, (1,) + x.shape)
    B, T, _ = x.shape
    n_sub = sum(1 for k in subsample_layers if 1 <= k <= len(layers))
    if n_sub and T < 2**n_sub:
        raise InputError(f"sequence of {T} frames is too short for {n_sub} subsampling layers (need >= {2**n_sub})")
    mask = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    h = x
    for k, (fwd, bwd) in enumerate(layers, start=1):
        h = bilstm_scan(h, fwd, bwd, mask)
        if k in subsample_layers:
            h, mask = subsample(h, mask)
    if single:
        h = nc.reshape(h, h.shape[1:])
    return h, mask
