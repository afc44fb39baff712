from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, as_tensor, make_result, storage_dtype

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
L2_EPS = 1e-8


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _cast(array: np.ndarray) -> np.ndarray:
    return np.asarray(array, dtype=storage_dtype())


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: object, b: object) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return make_result(_cast(ta.data + tb.data), "add", (ta, tb), _backward)


def sub(a: object, b: object) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return make_result(_cast(ta.data - tb.data), "sub", (ta, tb), _backward)


def mul(a: object, b: object) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)

    def _backward(g: np.ndarray):
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return make_result(_cast(ta.data * tb.data), "mul", (ta, tb), _backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def _backward(g: np.ndarray):
        return (g * factor,)

    return make_result(_cast(x.data * factor), "scale", (x,), _backward)


def abs_(x: Tensor) -> Tensor:
    def _backward(g: np.ndarray):
        return (g * np.sign(x.data),)

    return make_result(np.abs(x.data), "abs", (x,), _backward)


def sum_(x: Tensor) -> Tensor:
    total = np.sum(x.data, dtype=np.float64)

    def _backward(g: np.ndarray):
        return (np.full(x.shape, float(g.reshape(-1)[0]), dtype=x.data.dtype),)

    return make_result(_cast(np.asarray(total)), "sum", (x,), _backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def _backward(g: np.ndarray):
        return (g * positive,)

    return make_result(x.data * positive, "relu", (x,), _backward)


def _stable_sigmoid(values: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(values))
    return np.where(values >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _cast(_stable_sigmoid(x.data.astype(np.float64)))

    def _backward(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return make_result(out, "sigmoid", (x,), _backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    inverse = tuple(int(a) for a in np.argsort(axes))

    def _backward(g: np.ndarray):
        return (np.transpose(g, inverse),)

    return make_result(np.ascontiguousarray(np.transpose(x.data, axes)), "transpose", (x,), _backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(x) for x in xs]
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    head = tensors[0].shape
    for tensor in tensors[1:]:
        if tensor.ndim != 4 or (tensor.shape[0], tensor.shape[2], tensor.shape[3]) != (head[0], head[2], head[3]):
            raise ValueError("concat_channels inputs must agree on N, H, W")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def _backward(g: np.ndarray):
        return tuple(np.split(g, splits, axis=1))

    return make_result(np.concatenate([t.data for t in tensors], axis=1), "concat", tuple(tensors), _backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def _backward(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[:, start:stop]), "slice", (x,), _backward)


# ---------------------------------------------------------------------------
# convolution and normalisation
# ---------------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects N x C x H x W input and O x C x k x k weight")
    n, c, h, w = x.shape
    o, c_w, kh, kw = weight.shape
    if c != c_w:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {c_w}")
    if dilation < 1 or stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1, dilation >= 1, padding >= 0")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d output would be empty")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.data.dtype)
    row_span = stride * (ho - 1) + 1
    col_span = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, i, j] = padded[:, :, r0 : r0 + row_span : stride, c0 : c0 + col_span : stride]
    cols2 = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols2).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def _backward(g: np.ndarray):
        g2 = g.reshape(n, o, ho * wo)
        grad_w = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        grad_cols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                r0, c0 = i * dilation, j * dilation
                grad_padded[:, :, r0 : r0 + row_span : stride, c0 : c0 + col_span : stride] += grad_cols[:, :, i, j]
        grad_x = grad_padded[:, :, padding : padding + h, padding : padding + w]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(_cast(out), "conv2d", parents, _backward)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalisation; running statistics are updated in place in training mode."""
    if eps <= 0:
        raise ValueError("batchnorm eps must be positive")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ValueError("batchnorm gamma/beta length must equal the channel count")
    data = x.data.astype(np.float64)
    count = data.size // channels
    if training:
        mean = data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = data.var(axis=(0, 2, 3), dtype=np.float64)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (data - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)

    def _backward(g: np.ndarray):
        g64 = g.astype(np.float64)
        grad_gamma = (g64 * xhat).sum(axis=(0, 2, 3))
        grad_beta = g64.sum(axis=(0, 2, 3))
        gxhat = g64 * gamma.data.reshape(1, -1, 1, 1)
        if training:
            sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            grad_x = inv_std.reshape(1, -1, 1, 1) / count * (count * gxhat - sum_g - xhat * sum_gx)
        else:
            grad_x = gxhat * inv_std.reshape(1, -1, 1, 1)
        return grad_x, grad_gamma, grad_beta

    return make_result(_cast(out), "batchnorm", (x, gamma, beta), _backward)


def l2_normalize_channels(x: Tensor, eps: float = L2_EPS) -> Tensor:
    data = x.data.astype(np.float64)
    norm = np.sqrt(np.sum(data * data, axis=1, keepdims=True, dtype=np.float64))
    clamped = norm > eps
    denom = np.where(clamped, norm, eps)
    out = data / denom

    def _backward(g: np.ndarray):
        g64 = g.astype(np.float64)
        dot = np.sum(g64 * out, axis=1, keepdims=True)
        grad = np.where(clamped, (g64 - out * dot) / denom, g64 / eps)
        return (grad,)

    return make_result(_cast(out), "l2norm", (x,), _backward)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def interpolation_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (size_out, size_in)."""
    matrix = np.zeros((size_out, size_in), dtype=np.float64)
    if size_in == 1:
        matrix[:, 0] = 1.0
        return matrix
    positions = np.arange(size_out, dtype=np.float64) * (size_in - 1) / max(size_out - 1, 1)
    lower = np.minimum(np.floor(positions).astype(np.int64), size_in - 2)
    frac = positions - lower
    rows = np.arange(size_out)
    matrix[rows, lower] += 1.0 - frac
    matrix[rows, lower + 1] += frac
    return matrix


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    _, _, h, w = x.shape
    rows = interpolation_matrix(h, 2 * h)
    cols = interpolation_matrix(w, 2 * w)
    out = np.matmul(np.matmul(rows, x.data.astype(np.float64)), cols.T)

    def _backward(g: np.ndarray):
        return (np.matmul(np.matmul(rows.T, g.astype(np.float64)), cols),)

    return make_result(_cast(out), "upsample2x", (x,), _backward)


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of x (N,C,H,W) at grid (N,Ho,Wo,2) holding (u, v) in align-corners units.

    Samples outside the image read zeros.
    """
    n, c, h, w = x.shape
    if grid.ndim != 4 or grid.shape[0] != n or grid.shape[3] != 2:
        raise ValueError("grid must be N x Ho x Wo x 2 with the same batch size as x")
    _, ho, wo, _ = grid.shape
    points = ho * wo
    ix = (grid.data[..., 0].astype(np.float64).reshape(n, points) + 1.0) * 0.5 * (w - 1)
    iy = (grid.data[..., 1].astype(np.float64).reshape(n, points) + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    wx1 = ix - x0
    wy1 = iy - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    flat = x.data.astype(np.float64).reshape(n, c, h * w)
    batch_idx = np.arange(n)[:, None, None]
    chan_idx = np.arange(c)[None, :, None]

    corners = {}
    for name, cx, cy in (("00", x0, y0), ("10", x0 + 1, y0), ("01", x0, y0 + 1), ("11", x0 + 1, y0 + 1)):
        valid = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
        index = (np.clip(cy, 0, h - 1) * w + np.clip(cx, 0, w - 1)).astype(np.int64)
        values = flat[batch_idx, chan_idx, index[:, None, :]] * valid[:, None, :]
        corners[name] = (index, valid, values)

    weights = {"00": wx0 * wy0, "10": wx1 * wy0, "01": wx0 * wy1, "11": wx1 * wy1}
    out = sum(weights[key][:, None, :] * corners[key][2] for key in weights)

    def _backward(g: np.ndarray):
        g2 = g.astype(np.float64).reshape(n, c, points)
        grad_flat = np.zeros((n, c, h * w), dtype=np.float64)
        for key, weight in weights.items():
            index, valid, _ = corners[key]
            contribution = g2 * (weight * valid)[:, None, :]
            np.add.at(grad_flat, (batch_idx, chan_idx, index[:, None, :]), contribution)
        v00, v10, v01, v11 = (corners[key][2] for key in ("00", "10", "01", "11"))
        d_ix = np.sum(g2 * (wy0[:, None, :] * (v10 - v00) + wy1[:, None, :] * (v11 - v01)), axis=1)
        d_iy = np.sum(g2 * (wx0[:, None, :] * (v01 - v00) + wx1[:, None, :] * (v11 - v10)), axis=1)
        grad_grid = np.stack([d_ix * 0.5 * (w - 1), d_iy * 0.5 * (h - 1)], axis=-1).reshape(n, ho, wo, 2)
        return grad_flat.reshape(x.shape), grad_grid

    return make_result(_cast(out.reshape(n, c, ho, wo)), "grid_sample", (x, grid), _backward)


# ---------------------------------------------------------------------------
# correlation layers
# ---------------------------------------------------------------------------


def global_correlation(f_s: Tensor, f_t: Tensor, *, normalize: bool = True) -> Tensor:
    """All-pairs scalar products: channel k = i_t * W + j_t at source position (i, j)."""
    if f_s.shape != f_t.shape or f_s.ndim != 4:
        raise ValueError("global_correlation needs equally shaped N x C x H x W features")
    n, c, h, w = f_s.shape
    src = f_s.data.reshape(n, c, h * w)
    tgt = f_t.data.reshape(n, c, h * w)
    volume = np.matmul(tgt.transpose(0, 2, 1), src)

    def _backward(g: np.ndarray):
        g3 = g.reshape(n, h * w, h * w)
        grad_src = np.matmul(tgt, g3)
        grad_tgt = np.matmul(src, g3.transpose(0, 2, 1))
        return grad_src.reshape(f_s.shape), grad_tgt.reshape(f_t.shape)

    out = make_result(_cast(volume.reshape(n, h * w, h, w)), "global_corr", (f_s, f_t), _backward)
    return l2_normalize_channels(out) if normalize else out


def local_correlation(f_s: Tensor, f_t: Tensor, radius: int) -> Tensor:
    """Scalar products within a (2r+1)^2 displacement window; channel (dy + r) * (2r + 1) + (dx + r)."""
    if radius < 0:
        raise ValueError("local_correlation radius must be >= 0")
    if f_s.shape != f_t.shape or f_s.ndim != 4:
        raise ValueError("local_correlation needs equally shaped N x C x H x W features")
    n, _, h, w = f_s.shape
    size = 2 * radius + 1
    padded = np.pad(f_t.data, ((0, 0), (0, 0), (radius, radius), (radius, radius)))
    out = np.empty((n, size * size, h, w), dtype=np.float64)
    for dy in range(size):
        for dx in range(size):
            window = padded[:, :, dy : dy + h, dx : dx + w]
            out[:, dy * size + dx] = np.sum(f_s.data * window, axis=1, dtype=np.float64)

    def _backward(g: np.ndarray):
        grad_src = np.zeros(f_s.shape, dtype=np.float64)
        grad_padded = np.zeros(padded.shape, dtype=np.float64)
        for dy in range(size):
            for dx in range(size):
                gd = g[:, dy * size + dx : dy * size + dx + 1]
                grad_src += gd * padded[:, :, dy : dy + h, dx : dx + w]
                grad_padded[:, :, dy : dy + h, dx : dx + w] += gd * f_s.data
        grad_tgt = grad_padded[:, :, radius : radius + h, radius : radius + w]
        return grad_src, grad_tgt

    return make_result(_cast(out), "local_corr", (f_s, f_t), _backward)


# ---------------------------------------------------------------------------
# loss primitives
# ---------------------------------------------------------------------------


def bce_with_logits_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy in the log-sum-exp form: max(x,0) - x*y + log(1 + exp(-|x|))."""
    x = logits.data.astype(np.float64)
    y = np.broadcast_to(np.asarray(targets, dtype=np.float64), x.shape)
    count = x.size
    per_pixel = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    total = np.sum(per_pixel, dtype=np.float64) / count

    def _backward(g: np.ndarray):
        return ((_stable_sigmoid(x) - y) * float(g.reshape(-1)[0]) / count,)

    return make_result(_cast(np.asarray(total)), "bce_logits", (logits,), _backward)
