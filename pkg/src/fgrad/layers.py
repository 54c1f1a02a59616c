"""Layer primitives with forward, JVP and VJP evaluation.

Tensors are plain row-major ``numpy.ndarray`` objects (float32 by default,
float64 for oracle checks). Every layer exposes three evaluation routes:

* ``forward(x, mode)`` computes the output, updating batchnorm running
  statistics when ``mode == "train"`` and ``update_stats`` is true;
* ``jvp(x, x_dot, param_tangents, mode)`` returns ``(y, y_dot)``;
* ``vjp(x, cot, mode)`` returns ``(x_cot, param_cots)`` from the saved input.

Image tensors use the ``[N, C, H, W]`` layout, conv weights ``[O, C, k, k]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MODES = ("train", "eval")


class ShapeError(ValueError):
    """Input, tangent or cotangent shape incompatible with a layer."""


class NonFiniteError(ArithmeticError):
    """NaN or Inf produced where finite values are required."""


@dataclass
class DualTensor:
    """Primal/tangent pair carrying a forward-mode derivative."""

    primal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        if self.primal.shape != self.tangent.shape:
            raise ShapeError(
                f"primal shape {self.primal.shape} != tangent shape {self.tangent.shape}"
            )

    @property
    def shape(self):
        return self.primal.shape


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    # -- shape bookkeeping -------------------------------------------------
    def output_shape(self, in_shape: tuple) -> tuple:
        return tuple(in_shape)

    def macs(self, in_shape: tuple) -> int:
        """Multiply-accumulate count for one sample of shape ``in_shape``."""
        return 0

    def check_input(self, x: np.ndarray) -> None:
        pass

    # -- evaluation --------------------------------------------------------
    def forward(self, x, mode="train", update_stats=True):
        raise NotImplementedError

    def jvp(self, x, x_dot, param_tangents=None, mode="train"):
        raise NotImplementedError

    def vjp(self, x, cot, mode="train"):
        raise NotImplementedError

    def reinit(self, rng: np.random.Generator) -> None:
        pass

    def astype(self, dtype) -> "Layer":
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return self

    def _tangent(self, param_tangents, name):
        if not param_tangents or name not in param_tangents:
            return None
        t = param_tangents[name]
        if t.shape != self.params[name].shape:
            raise ShapeError(
                f"{self.kind}.{name}: tangent shape {t.shape} != param shape {self.params[name].shape}"
            )
        return t

    def __repr__(self):
        return f"{type(self).__name__}({self.describe()})"

    def describe(self) -> str:
        return ""


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(H, W, k, stride, padding):
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    return Ho, Wo


def _pad_rows(x: np.ndarray, padding: int, k: int):
    """Zero-padded NHWC copy of ``x`` flattened to rows of channels.

    A spatial shift by ``(i, j)`` of the padded image becomes a contiguous row
    offset ``i * Wp + j``; the extra tail rows keep every shifted slice in
    bounds. Rows that straddle image borders only feed output positions that
    are discarded afterwards.
    """
    B, C, H, W = x.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    n = B * Hp * Wp
    tail = (k - 1) * (Wp + 1)
    rows = np.zeros((n + tail, C), dtype=x.dtype)
    rows[:n].reshape(B, Hp, Wp, C)[:, padding:padding + H, padding:padding + W] = x.transpose(0, 2, 3, 1)
    return rows, Hp, Wp, n


def _out_index(B, Hp, Wp, Ho, Wo, stride):
    """Row of the padded grid at which each strided output window starts."""
    b = np.arange(B)[:, None, None] * (Hp * Wp)
    h = np.arange(Ho)[None, :, None] * (stride * Wp)
    w = np.arange(Wo)[None, None, :] * stride
    return (b + h + w).ravel()


def conv2d_raw(x, weight, stride, padding):
    B, C, H, W = x.shape
    O, _, k, _ = weight.shape
    Ho, Wo = _conv_geometry(H, W, k, stride, padding)
    rows, Hp, Wp, n = _pad_rows(x, padding, k)
    wt = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
    dtype = np.result_type(x, weight)
    if stride == 1:
        acc = np.zeros((n, O), dtype=dtype)
        for i in range(k):
            for j in range(k):
                off = i * Wp + j
                acc += rows[off:off + n] @ wt[i, j]
        out = acc.reshape(B, Hp, Wp, O)[:, :Ho, :Wo]
    else:
        # strided: gather only the window origins that produce outputs
        idx = _out_index(B, Hp, Wp, Ho, Wo, stride)
        acc = np.zeros((len(idx), O), dtype=dtype)
        for i in range(k):
            for j in range(k):
                acc += rows[idx + (i * Wp + j)] @ wt[i, j]
        out = acc.reshape(B, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_raw_vjp(x, weight, cot, stride, padding):
    """Returns (x_cot, weight_cot) for ``conv2d_raw``."""
    B, C, H, W = x.shape
    O, _, k, _ = weight.shape
    Ho, Wo = cot.shape[2], cot.shape[3]
    rows, Hp, Wp, n = _pad_rows(x, padding, k)
    wt = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
    drows = np.zeros_like(rows)
    dw = np.empty((k, k, C, O), dtype=weight.dtype)
    if stride == 1:
        grid = np.zeros((B, Hp, Wp, O), dtype=cot.dtype)
        grid[:, :Ho, :Wo] = cot.transpose(0, 2, 3, 1)
        g = grid.reshape(n, O)
        for i in range(k):
            for j in range(k):
                off = i * Wp + j
                dw[i, j] = rows[off:off + n].T @ g
                drows[off:off + n] += g @ wt[i, j].T
    else:
        idx = _out_index(B, Hp, Wp, Ho, Wo, stride)
        g = np.ascontiguousarray(cot.transpose(0, 2, 3, 1)).reshape(-1, O)
        for i in range(k):
            for j in range(k):
                sel = idx + (i * Wp + j)  # distinct rows for a fixed offset
                dw[i, j] = rows[sel].T @ g
                drows[sel] += g @ wt[i, j].T
    dx = drows[:n].reshape(B, Hp, Wp, C)[:, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), np.ascontiguousarray(dw.transpose(3, 2, 0, 1))


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.bias = stride, padding, bias
        self.params["weight"] = np.zeros((out_ch, in_ch, kernel, kernel), dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype)
        if rng is not None:
            self.reinit(rng)

    def describe(self):
        return f"{self.in_ch}->{self.out_ch}, k={self.kernel}, s={self.stride}, p={self.padding}"

    def reinit(self, rng):
        w = self.params["weight"]
        fan_in = self.in_ch * self.kernel * self.kernel
        self.params["weight"] = kaiming_uniform(rng, w.shape, fan_in, w.dtype)
        if self.bias:
            self.params["bias"] = np.zeros_like(self.params["bias"])

    def output_shape(self, in_shape):
        C, H, W = in_shape
        if C != self.in_ch:
            raise ShapeError(f"conv2d expects {self.in_ch} channels, got {C}")
        Ho, Wo = _conv_geometry(H, W, self.kernel, self.stride, self.padding)
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"conv2d output would be empty for input {in_shape}")
        return (self.out_ch, Ho, Wo)

    def macs(self, in_shape):
        _, Ho, Wo = self.output_shape(in_shape)
        return Ho * Wo * self.out_ch * self.in_ch * self.kernel * self.kernel

    def check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects [N,C,H,W], got shape {x.shape}")
        self.output_shape(x.shape[1:])

    def forward(self, x, mode="train", update_stats=True):
        self.check_input(x)
        y = conv2d_raw(x, self.params["weight"], self.stride, self.padding)
        if self.bias:
            y += self.params["bias"][None, :, None, None]
        return y

    def jvp(self, x, x_dot, param_tangents=None, mode="train"):
        y = self.forward(x, mode)
        w = self.params["weight"]
        y_dot = conv2d_raw(x_dot, w, self.stride, self.padding)
        w_dot = self._tangent(param_tangents, "weight")
        if w_dot is not None:
            y_dot += conv2d_raw(x, w_dot, self.stride, self.padding)
        b_dot = self._tangent(param_tangents, "bias") if self.bias else None
        if b_dot is not None:
            y_dot += b_dot[None, :, None, None]
        return y, y_dot

    def vjp(self, x, cot, mode="train"):
        self.check_input(x)
        expected = (x.shape[0],) + self.output_shape(x.shape[1:])
        if cot.shape != expected:
            raise ShapeError(f"conv2d cotangent shape {cot.shape} != output shape {expected}")
        dx, dw = conv2d_raw_vjp(x, self.params["weight"], cot, self.stride, self.padding)
        grads = {"weight": dw}
        if self.bias:
            grads["bias"] = cot.sum(axis=(0, 2, 3))
        return dx, grads


# ---------------------------------------------------------------------------
# dense


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_dim, out_dim, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        self.in_dim, self.out_dim, self.bias = in_dim, out_dim, bias
        self.params["weight"] = np.zeros((out_dim, in_dim), dtype)
        if bias:
            self.params["bias"] = np.zeros(out_dim, dtype)
        if rng is not None:
            self.reinit(rng)

    def describe(self):
        return f"{self.in_dim}->{self.out_dim}"

    def reinit(self, rng):
        w = self.params["weight"]
        self.params["weight"] = kaiming_uniform(rng, w.shape, self.in_dim, w.dtype)
        if self.bias:
            self.params["bias"] = np.zeros_like(self.params["bias"])

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"linear expects ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def macs(self, in_shape):
        return self.in_dim * self.out_dim

    def check_input(self, x):
        if x.ndim != 2:
            raise ShapeError(f"linear expects [N,D], got shape {x.shape}")
        self.output_shape(x.shape[1:])

    def forward(self, x, mode="train", update_stats=True):
        self.check_input(x)
        y = x @ self.params["weight"].T
        if self.bias:
            y = y + self.params["bias"]
        return y

    def jvp(self, x, x_dot, param_tangents=None, mode="train"):
        y = self.forward(x, mode)
        y_dot = x_dot @ self.params["weight"].T
        w_dot = self._tangent(param_tangents, "weight")
        if w_dot is not None:
            y_dot = y_dot + x @ w_dot.T
        b_dot = self._tangent(param_tangents, "bias") if self.bias else None
        if b_dot is not None:
            y_dot = y_dot + b_dot
        return y, y_dot

    def vjp(self, x, cot, mode="train"):
        self.check_input(x)
        if cot.shape != (x.shape[0], self.out_dim):
            raise ShapeError(f"linear cotangent shape {cot.shape} != {(x.shape[0], self.out_dim)}")
        grads = {"weight": cot.T @ x}
        if self.bias:
            grads["bias"] = cot.sum(axis=0)
        return cot @ self.params["weight"], grads


# ---------------------------------------------------------------------------
# batch normalization


class BatchNorm(Layer):
    """Batchnorm over the channel axis of ``[N, C]`` or ``[N, C, H, W]`` input.

    Train mode normalizes with batch statistics and differentiates through
    them; eval mode is the fixed affine map given by the running statistics.
    """

    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, momentum=0.1, affine=True, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum, self.affine = channels, eps, momentum, affine
        if affine:
            self.params["weight"] = np.ones(channels, dtype)
            self.params["bias"] = np.zeros(channels, dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype)
        self.buffers["running_var"] = np.ones(channels, dtype)

    def describe(self):
        return f"{self.channels}"

    def reinit(self, rng):
        dtype = self.buffers["running_mean"].dtype
        if self.affine:
            self.params["weight"] = np.ones(self.channels, dtype)
            self.params["bias"] = np.zeros(self.channels, dtype)
        self.buffers["running_mean"] = np.zeros(self.channels, dtype)
        self.buffers["running_var"] = np.ones(self.channels, dtype)

    def macs(self, in_shape):
        return int(np.prod(in_shape))

    def check_input(self, x):
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm({self.channels}) got input shape {x.shape}")

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, ndim):
        return v if ndim == 2 else v[None, :, None, None]

    def _gamma(self, ndim, dtype):
        if self.affine:
            return self._bcast(self.params["weight"], ndim)
        return np.ones((), dtype)

    def _stats(self, x, mode):
        axes = self._axes(x)
        if mode == "train":
            count = x.size // x.shape[1]
            if count < 2:
                raise ShapeError("batchnorm in train mode needs more than one value per channel")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        return mean, var

    def _normalize(self, x, mode):
        mean, var = self._stats(x, mode)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x.ndim)) * self._bcast(inv, x.ndim)
        return xhat.astype(x.dtype, copy=False), inv.astype(x.dtype, copy=False), mean, var

    def forward(self, x, mode="train", update_stats=True):
        _check_mode(mode)
        self.check_input(x)
        xhat, _, mean, var = self._normalize(x, mode)
        if mode == "train" and update_stats:
            m = self.momentum
            count = x.size // x.shape[1]
            unbiased = var * count / (count - 1)
            self.buffers["running_mean"] = ((1 - m) * self.buffers["running_mean"] + m * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - m) * self.buffers["running_var"] + m * unbiased).astype(x.dtype)
        if not self.affine:
            return xhat
        return xhat * self._gamma(x.ndim, x.dtype) + self._bcast(self.params["bias"], x.ndim)

    def jvp(self, x, x_dot, param_tangents=None, mode="train"):
        _check_mode(mode)
        self.check_input(x)
        xhat, inv, _, _ = self._normalize(x, mode)
        nd = x.ndim
        if mode == "train":
            axes = self._axes(x)
            centered = x_dot - x_dot.mean(axis=axes, keepdims=True)
            proj = (xhat * centered).mean(axis=axes, keepdims=True)
            xhat_dot = (centered - xhat * proj) * self._bcast(inv, nd)
        else:
            xhat_dot = x_dot * self._bcast(inv, nd)
        y = xhat
        y_dot = xhat_dot
        if self.affine:
            g = self._gamma(nd, x.dtype)
            y = xhat * g + self._bcast(self.params["bias"], nd)
            y_dot = xhat_dot * g
            g_dot = self._tangent(param_tangents, "weight")
            if g_dot is not None:
                y_dot = y_dot + xhat * self._bcast(g_dot, nd)
            b_dot = self._tangent(param_tangents, "bias")
            if b_dot is not None:
                y_dot = y_dot + self._bcast(b_dot, nd)
        return y, y_dot

    def vjp(self, x, cot, mode="train"):
        _check_mode(mode)
        self.check_input(x)
        if cot.shape != x.shape:
            raise ShapeError(f"batchnorm cotangent shape {cot.shape} != {x.shape}")
        xhat, inv, _, _ = self._normalize(x, mode)
        nd = x.ndim
        axes = self._axes(x)
        grads = {}
        if self.affine:
            grads["weight"] = (cot * xhat).sum(axis=axes)
            grads["bias"] = cot.sum(axis=axes)
        dxhat = cot * self._gamma(nd, x.dtype)
        if mode == "train":
            mean_d = dxhat.mean(axis=axes, keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
            dx = (dxhat - mean_d - xhat * mean_dx) * self._bcast(inv, nd)
        else:
            dx = dxhat * self._bcast(inv, nd)
        return dx, grads


# ---------------------------------------------------------------------------
# parameter-free layers


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, mode="train", update_stats=True):
        return np.maximum(x, 0)

    def jvp(self, x, x_dot, param_tangents=None, mode="train"):
        # derivative at exactly 0 is 0
        return np.maximum(x, 0), np.where(x > 0, x_dot, 0).astype(x_dot.dtype, copy=False)

    def vjp(self, x, cot, mode="train"):
        if cot.shape != x.shape:
            raise ShapeError(f"relu cotangent shape {cot.shape} != {x.shape}")
        return np.where(x > 0, cot, 0).astype(cot.dtype, copy=False), {}

    def macs(self, in_shape):
        return 0


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, mode="train", update_stats=True):
        return x.reshape(x.shape[0], -1)

    def jvp(self, x, x_dot, param_tangents=None, mode="train"):
        return self.forward(x), x_dot.reshape(x_dot.shape[0], -1)

    def vjp(self, x, cot, mode="train"):
        if cot.shape != (x.shape[0], int(np.prod(x.shape[1:]))):
            raise ShapeError(f"flatten cotangent shape {cot.shape} incompatible with {x.shape}")
        return cot.reshape(x.shape), {}


class AvgPool2d(Layer):
    """Non-overlapping ``kernel x kernel`` mean pooling (stride = kernel)."""

    kind = "avgpool2d"

    def __init__(self, kernel):
        super().__init__()
        self.kernel = kernel

    def describe(self):
        return f"k={self.kernel}"

    def output_shape(self, in_shape):
        C, H, W = in_shape
        k = self.kernel
        if H < k or W < k:
            raise ShapeError(f"avgpool2d kernel {k} larger than input {in_shape}")
        return (C, H // k, W // k)

    def macs(self, in_shape):
        C, H, W = in_shape
        return C * (H // self.kernel) * (W // self.kernel) * self.kernel ** 2

    def check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"avgpool2d expects [N,C,H,W], got {x.shape}")
        self.output_shape(x.shape[1:])

    def forward(self, x, mode="train", update_stats=True):
        self.check_input(x)
        B, C, H, W = x.shape
        k = self.kernel
        Ho, Wo = H // k, W // k
        v = x[:, :, :Ho * k, :Wo * k].reshape(B, C, Ho, k, Wo, k)
        return v.mean(axis=(3, 5))

    def jvp(self, x, x_dot, param_tangents=None, mode="train"):
        return self.forward(x), self.forward(x_dot)

    def vjp(self, x, cot, mode="train"):
        self.check_input(x)
        B, C, H, W = x.shape
        k = self.kernel
        Ho, Wo = H // k, W // k
        if cot.shape != (B, C, Ho, Wo):
            raise ShapeError(f"avgpool2d cotangent shape {cot.shape} != {(B, C, Ho, Wo)}")
        dx = np.zeros_like(x, dtype=cot.dtype)
        spread = np.repeat(np.repeat(cot, k, axis=2), k, axis=3) / (k * k)
        dx[:, :, :Ho * k, :Wo * k] = spread
        return dx, {}


def adaptive_bounds(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, ((i + 1) * size) // out) for i in range(out)]


class AdaptiveAvgPool2d(Layer):
    """Mean over ``out_h x out_w`` cells with floor-divided boundaries.

    Inputs smaller than the target grid are rejected rather than upsampled.
    """

    kind = "adaptive_avgpool2d"

    def __init__(self, out_h, out_w=None):
        super().__init__()
        self.out_h = out_h
        self.out_w = out_h if out_w is None else out_w

    def describe(self):
        return f"{self.out_h}x{self.out_w}"

    def output_shape(self, in_shape):
        C, H, W = in_shape
        if H < self.out_h or W < self.out_w:
            raise ShapeError(
                f"adaptive_avgpool2d to {self.out_h}x{self.out_w} needs at least that spatial size, got {H}x{W}"
            )
        return (C, self.out_h, self.out_w)

    def macs(self, in_shape):
        return int(np.prod(in_shape))

    def check_input(self, x):
        if x.ndim != 4:
            raise ShapeError(f"adaptive_avgpool2d expects [N,C,H,W], got {x.shape}")
        self.output_shape(x.shape[1:])

    def forward(self, x, mode="train", update_stats=True):
        self.check_input(x)
        B, C, H, W = x.shape
        out = np.empty((B, C, self.out_h, self.out_w), dtype=x.dtype)
        for i, (h0, h1) in enumerate(adaptive_bounds(H, self.out_h)):
            for j, (w0, w1) in enumerate(adaptive_bounds(W, self.out_w)):
                out[:, :, i, j] = x[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
        return out

    def jvp(self, x, x_dot, param_tangents=None, mode="train"):
        return self.forward(x), self.forward(x_dot)

    def vjp(self, x, cot, mode="train"):
        self.check_input(x)
        B, C, H, W = x.shape
        if cot.shape != (B, C, self.out_h, self.out_w):
            raise ShapeError(f"adaptive_avgpool2d cotangent shape {cot.shape} mismatch")
        dx = np.zeros(x.shape, dtype=cot.dtype)
        for i, (h0, h1) in enumerate(adaptive_bounds(H, self.out_h)):
            for j, (w0, w1) in enumerate(adaptive_bounds(W, self.out_w)):
                area = (h1 - h0) * (w1 - w0)
                dx[:, :, h0:h1, w0:w1] += (cot[:, :, i, j] / area)[:, :, None, None]
        return dx, {}


# ---------------------------------------------------------------------------
# functional entry points


def _check_finite(y, layer):
    if not np.isfinite(y).all():
        raise NonFiniteError(f"{layer.kind} produced non-finite output")


def layer_apply(layer: Layer, x: np.ndarray, mode: str = "train") -> np.ndarray:
    _check_mode(mode)
    y = layer.forward(x, mode)
    _check_finite(y, layer)
    return y


def layer_jvp(layer: Layer, x: DualTensor, param_tangents=None, mode: str = "train") -> DualTensor:
    _check_mode(mode)
    y, y_dot = layer.jvp(x.primal, x.tangent, param_tangents, mode)
    return DualTensor(y, y_dot)


def layer_vjp(layer: Layer, x: np.ndarray, cot: np.ndarray, mode: str = "train"):
    _check_mode(mode)
    return layer.vjp(x, cot, mode)


# ---------------------------------------------------------------------------
# loss


def log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over the batch."""
    lp = log_softmax(logits.astype(np.float64))
    return float(-lp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels):
    """Returns (loss, d loss / d logits) for the batch-mean loss."""
    lp = log_softmax(logits.astype(np.float64))
    n = len(labels)
    loss = float(-lp[np.arange(n), labels].mean())
    g = np.exp(lp)
    g[np.arange(n), labels] -= 1.0
    return loss, (g / n).astype(logits.dtype)


def cross_entropy_jvp(logits, logits_dot, labels):
    loss, g = cross_entropy_grad(logits, labels)
    return loss, float((g.astype(np.float64) * logits_dot).sum())
