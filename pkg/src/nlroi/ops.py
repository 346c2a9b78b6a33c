"""Primitive tensor operations and their vector-Jacobian products.

Tensors are C-contiguous float64 numpy arrays. Every operation is a pure
function of its inputs and is bit-reproducible: contractions accumulate in
ascending index order with explicit loops instead of BLAS (whose reduction
order depends on blocking and thread count), and softmax row normalization
accumulates its addends in ascending *value* order, which makes attention
outputs invariant under reordering of the rows being attended over.

Backward passes are exposed two ways: per-op ``*_vjp`` functions, and a
``vjp(op_id, saved_inputs, upstream)`` dispatcher keyed by op name.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateAttentionError, DimensionError


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _require_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{name} must have rank {rank}, got shape {x.shape}")


def sum_ascending_values(m: np.ndarray) -> np.ndarray:
    """Sum each row of a 2-D array with addends taken in ascending value order.

    The result depends only on the multiset of values in each row, so any
    permutation of the columns produces bit-identical sums.
    """
    rows, cols = m.shape
    if cols == 0:
        return np.zeros(rows)
    s = np.sort(m, axis=1)
    out = s[:, 0].copy()
    for j in range(1, cols):
        out += s[:, j]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """C[i,j] = sum_p A[i,p] * B[p,j], accumulated in ascending p."""
    a = _as_f64(a)
    b = _as_f64(b)
    _require_rank(a, 2, "matmul lhs")
    _require_rank(b, 2, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for p in range(k):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def matmul_vjp(a: np.ndarray, b: np.ndarray, d_out: np.ndarray):
    if d_out.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(
            f"matmul upstream gradient has shape {d_out.shape}, "
            f"expected {(a.shape[0], b.shape[1])}"
        )
    return matmul(d_out, b.T), matmul(a.T, d_out)


def conv2d_1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise convolution: out[n,o,h,w] = b[o] + sum_c W[o,c] * X[n,c,h,w]."""
    x = _as_f64(x)
    w = _as_f64(w)
    b = _as_f64(b)
    _require_rank(x, 4, "conv2d_1x1 input")
    _require_rank(w, 2, "conv2d_1x1 weight")
    _require_rank(b, 1, "conv2d_1x1 bias")
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    if w.shape[1] != cin:
        raise DimensionError(
            f"conv2d_1x1 channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    if b.shape[0] != cout:
        raise DimensionError(f"conv2d_1x1 bias {b.shape} vs weight {w.shape}")
    out = np.empty((n, cout, h, wd))
    out[:] = b[None, :, None, None]
    for c in range(cin):
        out += w[None, :, c, None, None] * x[:, c : c + 1, :, :]
    return out


def conv2d_1x1_vjp(x: np.ndarray, w: np.ndarray, b: np.ndarray, d_out: np.ndarray):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    if d_out.shape != (n, cout, h, wd):
        raise DimensionError(
            f"conv2d_1x1 upstream gradient {d_out.shape}, expected {(n, cout, h, wd)}"
        )
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for c in range(cin):
        dx[:, c, :, :] = np.sum(w[None, :, c, None, None] * d_out, axis=1)
        dw[:, c] = np.sum(d_out * x[:, c : c + 1, :, :], axis=(0, 2, 3))
    db = np.sum(d_out, axis=(0, 2, 3))
    return dx, dw, db


def conv2d_3x3_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved)."""
    x = _as_f64(x)
    w = _as_f64(w)
    b = _as_f64(b)
    _require_rank(x, 4, "conv2d_3x3 input")
    _require_rank(w, 4, "conv2d_3x3 weight")
    _require_rank(b, 1, "conv2d_3x3 bias")
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    if w.shape[1:] != (cin, 3, 3):
        raise DimensionError(
            f"conv2d_3x3 weight must be (Cout,{cin},3,3), got {w.shape} "
            f"for input {x.shape}"
        )
    if b.shape[0] != cout:
        raise DimensionError(f"conv2d_3x3 bias {b.shape} vs weight {w.shape}")
    xp = np.zeros((n, cin, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    out = np.empty((n, cout, h, wd))
    out[:] = b[None, :, None, None]
    for c in range(cin):
        for i in range(3):
            for j in range(3):
                out += (
                    w[:, c, i, j].reshape(1, cout, 1, 1)
                    * xp[:, c, i : i + h, j : j + wd][:, None, :, :]
                )
    return out


def conv2d_3x3_same_vjp(x: np.ndarray, w: np.ndarray, b: np.ndarray, d_out: np.ndarray):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    if d_out.shape != (n, cout, h, wd):
        raise DimensionError(
            f"conv2d_3x3 upstream gradient {d_out.shape}, expected {(n, cout, h, wd)}"
        )
    xp = np.zeros((n, cin, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for c in range(cin):
        for i in range(3):
            for j in range(3):
                patch = xp[:, c, i : i + h, j : j + wd]
                dw[:, c, i, j] = np.sum(d_out * patch[:, None, :, :], axis=(0, 2, 3))
                acc = np.zeros((n, h, wd))
                for o in range(cout):
                    acc += w[o, c, i, j] * d_out[:, o, :, :]
                dxp[:, c, i : i + h, j : j + wd] += acc
    db = np.sum(d_out, axis=(0, 2, 3))
    return dxp[:, :, 1:-1, 1:-1].copy(), dw, db


def softmax_rows(s: np.ndarray, mask_diagonal: bool = False) -> np.ndarray:
    """Row softmax with max subtraction; optionally zeroes the diagonal.

    With ``mask_diagonal`` the diagonal entries receive exactly zero weight
    and each row renormalizes over its off-diagonal entries (the masked
    scores are treated as -inf before exponentiation).
    """
    s = _as_f64(s)
    _require_rank(s, 2, "softmax input")
    n, m = s.shape
    if mask_diagonal:
        if n != m:
            raise DimensionError(f"diagonal masking needs a square matrix, got {s.shape}")
        if n == 1:
            raise DegenerateAttentionError(
                "a single masked row has no entries left to attend to"
            )
        work = s.copy()
        np.fill_diagonal(work, -np.inf)
    else:
        work = s
    if n == 0 or m == 0:
        return np.zeros((n, m))
    row_max = np.max(work, axis=1, keepdims=True)
    e = np.exp(work - row_max)
    totals = sum_ascending_values(e)
    return e / totals[:, None]


def softmax_rows_vjp(s: np.ndarray, mask_diagonal: bool, d_out: np.ndarray):
    if d_out.shape != s.shape:
        raise DimensionError(
            f"softmax upstream gradient {d_out.shape}, expected {s.shape}"
        )
    p = softmax_rows(s, mask_diagonal)
    return (softmax_vjp_from_probs(p, d_out),)


def softmax_vjp_from_probs(p: np.ndarray, d_p: np.ndarray) -> np.ndarray:
    """Softmax backward given the forward probabilities.

    dS[i,j] = P[i,j] * (dP[i,j] - sum_k dP[i,k] P[i,k]). Masked entries have
    P = 0, so their score gradient is exactly zero.
    """
    row_dot = np.sum(d_p * p, axis=1, keepdims=True)
    return p * (d_p - row_dot)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, _as_f64(x))


def relu_vjp(x: np.ndarray, d_out: np.ndarray):
    if d_out.shape != x.shape:
        raise DimensionError(f"relu upstream gradient {d_out.shape}, expected {x.shape}")
    # subgradient at exactly 0 is 0
    return (d_out * (x > 0.0),)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the two trailing spatial axes: (N,C,H,W) -> (N,C).

    Uses a running mean, m_k = m_{k-1} + (x_k - m_{k-1}) / k, over positions
    in ascending (h, w) order. On a constant map the increment is exactly
    zero at every step, so pooling inverts tile_spatial bit for bit (a
    summed-then-divided mean would round for counts like 3 or 15).
    """
    x = _as_f64(x)
    _require_rank(x, 4, "pool input")
    n, c, h, w = x.shape
    if h * w == 0:
        raise DimensionError(f"cannot pool over empty spatial extent {x.shape}")
    mean = x[:, :, 0, 0].copy()
    k = 1
    for i in range(h):
        for j in range(w):
            if i == 0 and j == 0:
                continue
            k += 1
            mean += (x[:, :, i, j] - mean) / k
    return mean


def global_avg_pool_vjp(x: np.ndarray, d_out: np.ndarray):
    n, c, h, w = x.shape
    if d_out.shape != (n, c):
        raise DimensionError(f"pool upstream gradient {d_out.shape}, expected {(n, c)}")
    spread = d_out / (h * w)
    return (np.broadcast_to(spread[:, :, None, None], x.shape).copy(),)


def tile_spatial(v: np.ndarray, h: int, w: int) -> np.ndarray:
    """Broadcast (N,C) to (N,C,H,W) by copying each value across positions."""
    v = _as_f64(v)
    _require_rank(v, 2, "tile input")
    if h < 1 or w < 1:
        raise DimensionError(f"tile extent must be positive, got ({h}, {w})")
    n, c = v.shape
    return np.broadcast_to(v[:, :, None, None], (n, c, h, w)).copy()


def tile_spatial_vjp(v: np.ndarray, h: int, w: int, d_out: np.ndarray):
    n, c = v.shape
    if d_out.shape != (n, c, h, w):
        raise DimensionError(
            f"tile upstream gradient {d_out.shape}, expected {(n, c, h, w)}"
        )
    acc = np.zeros((n, c))
    for i in range(h):
        for j in range(w):
            acc += d_out[:, :, i, j]
    return (acc,)


def concat_channels(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Append T's channels after X's: (N,D,H,W) + (N,Dg,H,W) -> (N,D+Dg,H,W)."""
    x = _as_f64(x)
    t = _as_f64(t)
    _require_rank(x, 4, "concat lhs")
    _require_rank(t, 4, "concat rhs")
    if x.shape[0] != t.shape[0] or x.shape[2:] != t.shape[2:]:
        raise DimensionError(f"concat shapes disagree outside channels: {x.shape} vs {t.shape}")
    return np.concatenate([x, t], axis=1)


def concat_channels_vjp(x: np.ndarray, t: np.ndarray, d_out: np.ndarray):
    d = x.shape[1]
    expected = (x.shape[0], d + t.shape[1], x.shape[2], x.shape[3])
    if d_out.shape != expected:
        raise DimensionError(
            f"concat upstream gradient {d_out.shape}, expected {expected}"
        )
    return d_out[:, :d].copy(), d_out[:, d:].copy()


_VJP_TABLE = {
    "matmul": lambda saved, g: matmul_vjp(*saved, g),
    "conv2d_1x1": lambda saved, g: conv2d_1x1_vjp(*saved, g),
    "conv2d_3x3_same": lambda saved, g: conv2d_3x3_same_vjp(*saved, g),
    "softmax_rows": lambda saved, g: softmax_rows_vjp(*saved, g),
    "relu": lambda saved, g: relu_vjp(*saved, g),
    "global_avg_pool": lambda saved, g: global_avg_pool_vjp(*saved, g),
    "tile_spatial": lambda saved, g: tile_spatial_vjp(*saved, g),
    "concat_channels": lambda saved, g: concat_channels_vjp(*saved, g),
}


def vjp(op_id: str, saved_inputs: tuple, upstream: np.ndarray) -> tuple:
    """Backward pass of a named primitive.

    ``saved_inputs`` are the op's forward arguments in declaration order;
    returns one gradient per differentiable input.
    """
    try:
        fn = _VJP_TABLE[op_id]
    except KeyError:
        raise ValueError(f"unknown op id {op_id!r}") from None
    return fn(saved_inputs, np.asarray(upstream, dtype=np.float64))
