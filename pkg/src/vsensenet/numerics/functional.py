"""Forward/backward kernels for the fixed layer set.

All kernels operate on batched arrays, ``(N, C, H, W)`` for images and
``(N, T, D)`` for sequences. Unbatched ``(C, H, W)`` inputs are accepted by the
image kernels and returned unbatched. Every kernel is dtype-preserving, so the
same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NonFiniteError, ParameterError


def check_finite(x: np.ndarray, where: str) -> None:
    # NaN/Inf propagate through a sum; only fall back to the full scan on overflow.
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.sum(x)
    if not np.isfinite(total) and not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values entering {where}")


def _batched(x: np.ndarray, name: str = "input") -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"{name}: expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------

def im2col(x: np.ndarray, k: int, stride: int, padding: int,
           out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Unfold ``x`` (N,C,H,W) into patches laid out as (N, C*k*k, Ho*Wo).

    Built from k*k shifted slice copies, so rows are ordered (c, ki, kj) to
    match ``kernels.reshape(C_out, -1)``.
    """
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if out_hw is None:
        out_hw = ((h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1)
    ho, wo = out_hw
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def col2im(cols: np.ndarray, out_hw: tuple[int, int], patch_hw: tuple[int, int], k: int,
           stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add (N, C*k*k, Ho*Wo) patches into (N,C,H,W)."""
    n = cols.shape[0]
    ho, wo = patch_hw
    c = cols.shape[1] // (k * k)
    h, w = out_hw
    hp, wp = h + 2 * padding, w + 2 * padding
    hp = max(hp, stride * (ho - 1) + k)
    wp = max(wp, stride * (wo - 1) + k)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out[:, :, padding:padding + h, padding:padding + w]


def _check_kernel(kernels: np.ndarray, bias: np.ndarray, stride: int, padding: int) -> int:
    if kernels.ndim != 4:
        raise DimensionError(f"kernels: expected 4 axes, got shape {kernels.shape}")
    k = kernels.shape[2]
    if kernels.shape[3] != k:
        raise DimensionError(f"kernels axis 3: width {kernels.shape[3]} != height {k}")
    if k % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {k}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")
    if bias.ndim != 1:
        raise DimensionError(f"bias: expected 1 axis, got shape {bias.shape}")
    return k


def conv_output_size(size: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"axis {axis}: ({size} + 2*{padding} - {k}) is not a non-negative multiple of stride {stride}")
    return span // stride + 1


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int = 1,
           padding: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding. ``kernels`` is (C_out, C_in, k, k)."""
    x, squeeze = _batched(x)
    k = _check_kernel(kernels, bias, stride, padding)
    c_out, c_in = kernels.shape[:2]
    if x.shape[1] != c_in:
        raise DimensionError(f"axis C_in: input has {x.shape[1]} channels, kernels expect {c_in}")
    if bias.shape[0] != c_out:
        raise DimensionError(f"axis C_out: bias has {bias.shape[0]} entries, kernels have {c_out}")
    n, _, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding, "H")
    wo = conv_output_size(w, k, stride, padding, "W")
    cols = im2col(x, k, stride, padding, (ho, wo))
    out = np.matmul(kernels.reshape(c_out, -1), cols).reshape(n, c_out, ho, wo)
    out += bias[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_backward(grad: np.ndarray, x: np.ndarray, kernels: np.ndarray, stride: int = 1,
                    padding: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (d_input, d_kernels, d_bias) for :func:`conv2d`."""
    grad, squeeze = _batched(grad, "grad")
    x, _ = _batched(x)
    c_out, c_in, k, _ = kernels.shape
    n, _, ho, wo = grad.shape
    g = grad.reshape(n, c_out, ho * wo)
    cols = im2col(x, k, stride, padding, (ho, wo))
    d_kernels = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
    d_bias = g.sum(axis=(0, 2))
    d_cols = np.matmul(kernels.reshape(c_out, -1).T, g)
    d_x = flush_subnormal(col2im(d_cols, x.shape[2:], (ho, wo), k, stride, padding))
    return (d_x[0] if squeeze else d_x), d_kernels, d_bias


def conv_transpose2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int = 1,
                     padding: int = 0) -> np.ndarray:
    """Transposed convolution, the adjoint of :func:`conv2d` in its input.

    ``kernels`` is (C_in, C_out, k, k): the same tensor a conv2d mapping C_out
    channels to C_in channels would use. Output size is
    ``(H - 1) * stride - 2 * padding + k``.
    """
    x, squeeze = _batched(x)
    k = _check_kernel(kernels, bias, stride, padding)
    c_in, c_out = kernels.shape[:2]
    if x.shape[1] != c_in:
        raise DimensionError(f"axis C_in: input has {x.shape[1]} channels, kernels expect {c_in}")
    if bias.shape[0] != c_out:
        raise DimensionError(f"axis C_out: bias has {bias.shape[0]} entries, kernels have {c_out}")
    n, _, h, w = x.shape
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise DimensionError(f"axis H/W: transposed output would be {ho}x{wo}")
    cols = np.matmul(kernels.reshape(c_in, -1).T, x.reshape(n, c_in, h * w))
    out = col2im(cols, (ho, wo), (h, w), k, stride, padding) + bias[None, :, None, None]
    return out[0] if squeeze else out


def conv_transpose2d_backward(grad: np.ndarray, x: np.ndarray, kernels: np.ndarray,
                              stride: int = 1, padding: int = 0
                              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (d_input, d_kernels, d_bias) for :func:`conv_transpose2d`."""
    grad, squeeze = _batched(grad, "grad")
    x, _ = _batched(x)
    c_in, c_out, k, _ = kernels.shape
    n, _, h, w = x.shape
    ho, wo = grad.shape[2:]
    d_bias = grad.sum(axis=(0, 2, 3))
    # The scatter canvas can overhang the padded output on the far edge.
    extra_h = max(0, stride * (h - 1) + k - (ho + 2 * padding))
    extra_w = max(0, stride * (w - 1) + k - (wo + 2 * padding))
    if extra_h or extra_w:
        grad = np.pad(grad, ((0, 0), (0, 0), (0, extra_h), (0, extra_w)))
    cols = im2col(grad, k, stride, padding, (h, w))
    d_kernels = np.matmul(x.reshape(n, c_in, h * w), cols.transpose(0, 2, 1)).sum(axis=0)
    d_x = flush_subnormal(np.matmul(kernels.reshape(c_in, -1), cols).reshape(n, c_in, h, w))
    return (d_x[0] if squeeze else d_x), d_kernels.reshape(kernels.shape), d_bias


# ---------------------------------------------------------------------------
# Pooling / upsampling
# ---------------------------------------------------------------------------

def maxpool2d(x: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling.

    Returns the pooled array and, per output cell, the flat (row-major) index of
    the winning element inside its window. Ties go to the first maximal index.
    """
    if window < 1:
        raise ParameterError(f"window must be >= 1, got {window}")
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if h % window:
        raise DimensionError(f"axis H: {h} not divisible by window {window}")
    if w % window:
        raise DimensionError(f"axis W: {w} not divisible by window {window}")
    views = [x[:, :, pos // window::window, pos % window::window] for pos in range(window * window)]
    out = views[0]
    for v in views[1:]:
        out = np.maximum(out, v)
    # Assign offsets from last to first so the first (row-major) maximum wins ties.
    idx = np.full(out.shape, window * window - 1, dtype=np.int8 if window * window < 128 else np.int32)
    for pos in range(window * window - 2, -1, -1):
        np.copyto(idx, pos, where=views[pos] == out)
    if squeeze:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(grad: np.ndarray, idx: np.ndarray, window: int) -> np.ndarray:
    grad, squeeze = _batched(grad, "grad")
    if squeeze:
        idx = idx[None]
    n, c, ho, wo = grad.shape
    out = np.zeros((n, c, ho * window, wo * window), dtype=grad.dtype)
    for pos in range(window * window):
        out[:, :, pos // window::window, pos % window::window] = grad * (idx == pos)
    return out[0] if squeeze else out


def avgpool2d(x: np.ndarray, window: int) -> np.ndarray:
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    out = x.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))
    return out[0] if squeeze else out


def upsample2d_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ParameterError(f"upsampling factor must be >= 1, got {factor}")
    return x.repeat(factor, axis=-2).repeat(factor, axis=-1)


def upsample2d_nearest_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    # Strided adds beat a multi-axis reduction by a wide margin here.
    out = None
    for i in range(factor):
        for j in range(factor):
            part = grad[..., i::factor, j::factor]
            out = part.copy() if out is None else out.__iadd__(part)
    return out


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``W @ x + b`` over the last axis. ``weights`` is (m, n)."""
    if weights.ndim != 2:
        raise DimensionError(f"weights: expected (m, n), got shape {weights.shape}")
    if x.shape[-1] != weights.shape[1]:
        raise DimensionError(f"axis n: input has {x.shape[-1]} features, weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"axis m: bias shape {bias.shape}, weights have {weights.shape[0]} rows")
    return x @ weights.T + bias


def dense_backward(grad: np.ndarray, x: np.ndarray, weights: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    g2 = grad.reshape(-1, weights.shape[0])
    x2 = x.reshape(-1, weights.shape[1])
    return grad @ weights, g2.T @ x2, g2.sum(axis=0)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Exact identity; overflow-free and much faster than exp-based forms in float32.
    half = x.dtype.type(0.5) if x.dtype.kind == "f" else 0.5
    return half * np.tanh(half * x) + half


def flush_subnormal(x: np.ndarray) -> np.ndarray:
    """Zero subnormal entries in place. Saturated activations produce them, and
    BLAS kernels run an order of magnitude slower on subnormal operands."""
    if x.dtype.kind == "f":
        x[np.abs(x) < np.finfo(x.dtype).tiny] = 0
    return x


def sigmoid_backward(grad: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``y`` is the forward output."""
    return flush_subnormal(grad * y * (1 - y))


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(grad: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``y`` is the forward output."""
    return flush_subnormal(grad * (1 - y * y))


# ---------------------------------------------------------------------------
# Dropout
# ---------------------------------------------------------------------------

def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None
            ) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns the output and the scaled keep-mask (None when inactive)."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    if rng is None:
        raise ParameterError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def lstm_forward(x: np.ndarray, w_x: np.ndarray, w_h: np.ndarray, b: np.ndarray,
                 h0: np.ndarray | None = None, c0: np.ndarray | None = None):
    """Run one LSTM layer over a batch of sequences.

    ``x`` is (N, T, D); ``w_x`` (4H, D), ``w_h`` (4H, H), ``b`` (4H,), gate order
    input, forget, candidate, output. Returns ``(hs, h_T, c_T, cache)`` where
    ``hs`` is the (N, T, H) hidden sequence.
    """
    if x.ndim != 3:
        raise DimensionError(f"input: expected (N, T, D), got shape {x.shape}")
    n, t_len, d = x.shape
    if t_len == 0:
        raise ParameterError("LSTM input sequence is empty")
    hid = w_h.shape[1]
    if w_x.shape != (4 * hid, d):
        raise DimensionError(f"axis D: w_x shape {w_x.shape}, expected {(4 * hid, d)}")
    h = np.zeros((n, hid), dtype=x.dtype) if h0 is None else h0
    c = np.zeros((n, hid), dtype=x.dtype) if c0 is None else c0
    zx = (x.reshape(-1, d) @ w_x.T + b).reshape(n, t_len, 4 * hid)
    hs = np.empty((n, t_len, hid), dtype=x.dtype)
    gates = np.empty((n, t_len, 4 * hid), dtype=x.dtype)
    cs = np.empty((n, t_len, hid), dtype=x.dtype)
    tcs = np.empty((n, t_len, hid), dtype=x.dtype)
    h_init, c_init = h, c
    w_h_t = np.ascontiguousarray(w_h.T)
    for t in range(t_len):
        z = zx[:, t] + h @ w_h_t
        s = sigmoid(z)
        gt = np.tanh(z[:, 2 * hid:3 * hid])
        i, f, o = s[:, :hid], s[:, hid:2 * hid], s[:, 3 * hid:]
        c = f * c + i * gt
        tc = np.tanh(c)
        h = o * tc
        gates[:, t, :hid], gates[:, t, hid:2 * hid] = i, f
        gates[:, t, 2 * hid:3 * hid], gates[:, t, 3 * hid:] = gt, o
        cs[:, t], tcs[:, t], hs[:, t] = c, tc, h
    cache = (x, w_x, w_h, h_init, c_init, gates, cs, tcs, hs)
    return hs, h, c, cache


def lstm_backward(d_hs: np.ndarray, cache, d_h_last: np.ndarray | None = None,
                  d_c_last: np.ndarray | None = None):
    """Backprop through time.

    ``d_hs`` is the gradient w.r.t. the (N, T, H) hidden sequence; may be None
    when only the final state is consumed. Returns
    ``(d_x, d_w_x, d_w_h, d_b, d_h0, d_c0)``.
    """
    x, w_x, w_h, h_init, c_init, gates, cs, tcs, hs = cache
    n, t_len, d = x.shape
    hid = w_h.shape[1]
    dh_next = np.zeros((n, hid), dtype=x.dtype) if d_h_last is None else d_h_last.copy()
    dc_next = np.zeros((n, hid), dtype=x.dtype) if d_c_last is None else d_c_last.copy()
    dz = np.empty((n, t_len, 4 * hid), dtype=x.dtype)
    for t in range(t_len - 1, -1, -1):
        dh = dh_next if d_hs is None else d_hs[:, t] + dh_next
        g = gates[:, t]
        i, f, gt, o = g[:, :hid], g[:, hid:2 * hid], g[:, 2 * hid:3 * hid], g[:, 3 * hid:]
        tc = tcs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else c_init
        dc = dh * o * (1 - tc * tc) + dc_next
        dzt = dz[:, t]
        dzt[:, :hid] = dc * gt * i * (1 - i)
        dzt[:, hid:2 * hid] = dc * c_prev * f * (1 - f)
        dzt[:, 2 * hid:3 * hid] = dc * i * (1 - gt * gt)
        dzt[:, 3 * hid:] = dh * tc * o * (1 - o)
        dh_next = dzt @ w_h
        dc_next = dc * f
    dz2 = dz.reshape(-1, 4 * hid)
    h_prev = np.concatenate([h_init[:, None], hs[:, :-1]], axis=1).reshape(-1, hid)
    d_w_h = dz2.T @ h_prev
    d_w_x = dz2.T @ x.reshape(-1, d)
    d_b = dz2.sum(axis=0)
    d_x = (dz2 @ w_x).reshape(n, t_len, d)
    return d_x, d_w_x, d_w_h, d_b, dh_next, dc_next
