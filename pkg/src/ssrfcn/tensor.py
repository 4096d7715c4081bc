"""Forward/backward kernels for the layers used by the FCN, plus Adam.

Tensors are plain numpy arrays in NHWC layout.  Every kernel preserves the
dtype of its inputs: float32 in the model, float64 when gradient-checking.
Reductions go through numpy's fixed-order pairwise summation and the
convolution GEMM through BLAS, so repeated calls with identical inputs on a
fixed thread count give identical bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateBatchError,
    TrainingDivergenceError,
    UsageError,
)

Mode = Literal["train", "infer"]


@dataclass
class ConvParams:
    weights: np.ndarray  # (kh, kw, cin, cout)
    bias: np.ndarray  # (cout,)
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ConfigurationError(f"conv weights must be rank 4, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[3],):
            raise ConfigurationError(
                f"conv bias shape {self.bias.shape} does not match cout={self.weights.shape[3]}"
            )
        if self.stride < 1:
            raise ConfigurationError(f"stride must be positive, got {self.stride}")

    @property
    def cin(self) -> int:
        return self.weights.shape[2]

    @property
    def cout(self) -> int:
        return self.weights.shape[3]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, momentum: float = 0.9, epsilon: float = 1e-5):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def same_padding(size: int, stride: int, kernel: int) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for TF-style "same" padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _check_conv(x: np.ndarray, params: ConvParams) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"conv input must be NHWC, got shape {x.shape}")
    if x.shape[3] != params.cin:
        raise ConfigurationError(
            f"conv input has {x.shape[3]} channels but kernel expects {params.cin}"
        )
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ConfigurationError(f"conv input has empty spatial dims {x.shape[1:3]}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    n, h, w, c = x.shape
    oh, pt, pb = same_padding(h, stride, kh)
    ow, pl, pr = same_padding(w, stride, kw)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
    return cols.reshape(n * oh * ow, kh * kw * c), (oh, ow, pt, pl, xp.shape)


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Zero-padded "same" convolution; output spatial dims are ``ceil(in / stride)``."""
    _check_conv(x, params)
    kh, kw, cin, cout = params.weights.shape
    cols, (oh, ow, _, _, _) = _im2col(x, kh, kw, params.stride)
    out = cols @ params.weights.reshape(kh * kw * cin, cout)
    out += params.bias
    return out.reshape(x.shape[0], oh, ow, cout)


def conv2d_backward(x: np.ndarray, params: ConvParams, upstream: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`."""
    _check_conv(x, params)
    n, h, w, c = x.shape
    kh, kw, cin, cout = params.weights.shape
    cols, (oh, ow, pt, pl, padded_shape) = _im2col(x, kh, kw, params.stride)
    if upstream.shape != (n, oh, ow, cout):
        raise ConfigurationError(
            f"upstream gradient shape {upstream.shape} != conv output shape {(n, oh, ow, cout)}"
        )
    s = params.stride
    dy = upstream.reshape(n * oh * ow, cout)
    grad_w = (cols.T @ dy).reshape(kh, kw, cin, cout)
    grad_b = upstream.sum(axis=(0, 1, 2))
    dcols = (dy @ params.weights.reshape(kh * kw * cin, cout).T).reshape(n, oh, ow, kh, kw, cin)
    dxp = np.zeros(padded_shape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + s * oh : s, j : j + s * ow : s, :] += dcols[:, :, :, i, j, :]
    grad_x = dxp[:, pt : pt + h, pl : pl + w, :]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batchnorm_forward(x: np.ndarray, params: BatchNormParams, mode: Mode = "train"):
    """Per-channel batch normalization over (n, h, w).

    Returns ``(output, cache)``.  ``cache`` is ``None`` in infer mode, which
    reads the running statistics and leaves ``params`` untouched.  Train mode
    normalizes with the biased batch variance and folds the batch statistics
    into the running ones with ``momentum``.
    """
    if x.shape[-1] != params.channels:
        raise ConfigurationError(
            f"batchnorm input has {x.shape[-1]} channels, params have {params.channels}"
        )
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(params.running_var + params.epsilon)
        return (x - params.running_mean) * inv_std * params.gamma + params.beta, None
    if mode != "train":
        raise ConfigurationError(f"unknown batchnorm mode {mode!r}")

    count = x.size // x.shape[-1]
    if count < 2:
        raise DegenerateBatchError(
            "train-mode batchnorm needs at least 2 values per channel, got 1"
        )
    mean = x.mean(axis=(0, 1, 2))
    centered = x - mean
    var = (centered * centered).mean(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = centered * inv_std
    m = params.momentum
    params.running_mean[...] = m * params.running_mean + (1.0 - m) * mean
    params.running_var[...] = m * params.running_var + (1.0 - m) * var
    return xhat * params.gamma + params.beta, BatchNormCache(xhat, inv_std, params.gamma.copy())


def batchnorm_backward(cache: BatchNormCache | None, upstream: np.ndarray):
    """Return ``(grad_input, grad_gamma, grad_beta)`` for a train-mode forward."""
    if cache is None:
        raise UsageError("batchnorm_backward needs the cache from a train-mode forward")
    xhat = cache.xhat
    if upstream.shape != xhat.shape:
        raise ConfigurationError(f"upstream shape {upstream.shape} != {xhat.shape}")
    count = xhat.size // xhat.shape[-1]
    grad_beta = upstream.sum(axis=(0, 1, 2))
    grad_gamma = (upstream * xhat).sum(axis=(0, 1, 2))
    dxhat = upstream * cache.gamma
    grad_x = (cache.inv_std / count) * (
        count * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
    )
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# activations, pooling, loss
# ---------------------------------------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(x > 0, upstream, np.zeros((), dtype=upstream.dtype))


def global_average_pool(score_map: np.ndarray) -> np.ndarray:
    """Mean of a (n, h, w, 1) score map over its spatial grid -> (n,) logits."""
    if score_map.ndim != 4 or score_map.shape[3] != 1:
        raise ConfigurationError(f"score map must be (n, h, w, 1), got {score_map.shape}")
    if score_map.shape[1] == 0 or score_map.shape[2] == 0:
        raise ConfigurationError("score map has empty spatial dims")
    # float64 accumulation, then a single rounding back to the input dtype
    return score_map.mean(axis=(1, 2, 3), dtype=np.float64).astype(score_map.dtype)


def global_average_pool_backward(shape: tuple[int, ...], upstream: np.ndarray) -> np.ndarray:
    n, h, w, _ = shape
    grad = np.empty(shape, dtype=upstream.dtype)
    grad[...] = (upstream / (h * w)).reshape(n, 1, 1, 1)
    return grad


def sigmoid(z):
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_bce_loss(logit, label):
    """Binary cross entropy on ``sigmoid(logit)`` in the fused logit form.

    Works on scalars or arrays.  Returns ``(loss, d loss / d logit)``; the
    gradient is ``sigmoid(logit) - label``.
    """
    s = np.asarray(logit)
    y = np.asarray(label, dtype=s.dtype if s.dtype.kind == "f" else np.float64)
    if np.any((y != 0) & (y != 1)):
        raise ConfigurationError("labels must be 0 or 1")
    loss = np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))
    grad = sigmoid(s) - y
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise ConfigurationError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ConfigurationError(
                f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name}")

    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
