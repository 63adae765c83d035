"""Dense tensor kernels for the simplified networks.

Tensors are float64 numpy arrays in (batch, channels, rows, cols) order and
kernels in (D, C, 3, 3) order. The convolution is a cross-correlation with
one pixel of zero padding on every border.

The convolution itself is delegated to a backend: the compiled Cython
extension when it was built, else an im2col/numpy implementation. Set
``RESEQUIV_BACKEND=python`` to force the fallback.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass

import numpy as np

from . import _conv_numpy
from .errors import InvalidArgument

try:
    from . import _conv as _conv_compiled
except ImportError:  # extension not built
    _conv_compiled = None

_BACKENDS = {"python": _conv_numpy}
if _conv_compiled is not None:
    _BACKENDS["compiled"] = _conv_compiled


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def _initial_backend() -> str:
    requested = os.environ.get("RESEQUIV_BACKEND")
    if requested:
        if requested not in _BACKENDS:
            raise ImportError(
                f"RESEQUIV_BACKEND={requested!r} is not available; have {available_backends()}"
            )
        return requested
    return "compiled" if "compiled" in _BACKENDS else "python"


_backend_name = _initial_backend()
_kernels = _BACKENDS[_backend_name]


def get_backend() -> str:
    return _backend_name


def set_backend(name: str) -> None:
    global _backend_name, _kernels
    if name not in _BACKENDS:
        raise InvalidArgument(f"unknown backend {name!r}; have {available_backends()}")
    _backend_name = name
    _kernels = _BACKENDS[name]


@contextlib.contextmanager
def use_backend(name: str):
    previous = _backend_name
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


@dataclass
class LayerGrad:
    grad_weights: np.ndarray
    grad_bias: np.ndarray
    grad_input: np.ndarray


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def _check_conv(x, weights, stride):
    if x.ndim != 4:
        raise InvalidArgument(f"conv input must be 4-D, got shape {x.shape}")
    if weights.ndim != 4 or weights.shape[2:] != (3, 3):
        raise InvalidArgument(f"conv kernels must be (D, C, 3, 3), got {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise InvalidArgument(
            f"input has {x.shape[1]} channels but kernels expect {weights.shape[1]}"
        )
    if stride not in (1, 2):
        raise InvalidArgument(f"stride must be 1 or 2, got {stride}")
    h, w = x.shape[2:]
    if h % stride or w % stride:
        raise InvalidArgument(f"spatial size {h}x{w} not divisible by stride {stride}")
    return x.shape[0], weights.shape[0], h // stride, w // stride


def _pad(x):
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def conv2d_forward(x, weights, bias, stride: int = 1) -> np.ndarray:
    """3x3 cross-correlation with zero padding 1; returns (B, D, H/s, W/s)."""
    x, weights, bias = _f64(x), _f64(weights), _f64(bias)
    b, d, ho, wo = _check_conv(x, weights, stride)
    if bias.shape != (d,):
        raise InvalidArgument(f"bias must have shape ({d},), got {bias.shape}")
    out = np.empty((b, d, ho, wo))
    _kernels.conv_forward(_pad(x), weights, bias, stride, out)
    return out


def _check_upstream(g, b, d, ho, wo):
    if g.shape != (b, d, ho, wo):
        raise InvalidArgument(f"upstream gradient shape {g.shape} != output shape {(b, d, ho, wo)}")


def conv2d_backward(x, weights, stride: int, upstream_grad) -> LayerGrad:
    """Exact gradients of ``sum(upstream_grad * conv2d_forward(x, weights, b, stride))``."""
    x, weights, g = _f64(x), _f64(weights), _f64(upstream_grad)
    b, d, ho, wo = _check_conv(x, weights, stride)
    _check_upstream(g, b, d, ho, wo)
    gw = np.zeros_like(weights)
    gb = np.zeros(d)
    gxpad = np.zeros((b, x.shape[1], x.shape[2] + 2, x.shape[3] + 2))
    _kernels.conv_backward(_pad(x), weights, g, stride, gw, gb, gxpad)
    return LayerGrad(gw, gb, np.ascontiguousarray(gxpad[:, :, 1:-1, 1:-1]))


def conv2d_backward_input(weights, stride: int, upstream_grad, input_shape) -> np.ndarray:
    """Input gradient only; cheaper than :func:`conv2d_backward` when weights are fixed."""
    weights, g = _f64(weights), _f64(upstream_grad)
    probe = np.empty((0,) + tuple(input_shape[1:]))
    _, d, ho, wo = _check_conv(probe, weights, stride)
    _check_upstream(g, input_shape[0], d, ho, wo)
    gxpad = np.zeros((input_shape[0], input_shape[1], input_shape[2] + 2, input_shape[3] + 2))
    _kernels.conv_backward_input(weights, g, stride, gxpad)
    return np.ascontiguousarray(gxpad[:, :, 1:-1, 1:-1])


def relu_forward(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    # derivative at exactly 0 is 0
    return np.where(np.asarray(x) > 0.0, upstream, 0.0)


def avgpool_forward(x, window: int) -> np.ndarray:
    """Global average pooling; ``window`` must equal the spatial extent."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[2] != window or x.shape[3] != window:
        raise InvalidArgument(f"pool window {window} must equal spatial extent of {x.shape}")
    return x.mean(axis=(2, 3))


def avgpool_backward(upstream, window: int) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim != 2:
        raise InvalidArgument(f"pool upstream must be (B, C), got {upstream.shape}")
    spread = upstream / (window * window)
    return np.broadcast_to(spread[:, :, None, None], upstream.shape + (window, window)).copy()


def dense_forward(x, weights, bias) -> np.ndarray:
    """Affine map ``x @ W.T + b`` for a batch (B, F) or a single vector (F,)."""
    x, weights, bias = np.asarray(x, float), np.asarray(weights, float), np.asarray(bias, float)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise InvalidArgument(
            f"dense shapes incompatible: x {x.shape}, W {weights.shape}, b {bias.shape}"
        )
    return x @ weights.T + bias


def dense_backward(x, weights, upstream) -> LayerGrad:
    x, weights, g = np.asarray(x, float), np.asarray(weights, float), np.asarray(upstream, float)
    if x.ndim == 1:
        x, g = x[None], g[None]
        squeeze = True
    else:
        squeeze = False
    if g.shape != (x.shape[0], weights.shape[0]) or x.shape[1] != weights.shape[1]:
        raise InvalidArgument(
            f"dense backward shapes incompatible: x {x.shape}, W {weights.shape}, g {g.shape}"
        )
    gx = g @ weights
    return LayerGrad(g.T @ x, g.sum(axis=0), gx[0] if squeeze else gx)


def _check_labels(z, labels):
    k = z.shape[1]
    if k < 2:
        raise InvalidArgument("softmax needs at least two classes")
    if labels.shape != (z.shape[0],):
        raise InvalidArgument(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InvalidArgument(f"label out of range [0, {k})")


def softmax_xent_per_sample(logits, labels):
    """Per-sample losses and per-sample logit gradients, no batch averaging."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    _check_labels(z, labels)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    grad = np.exp(shifted - lse[:, None])
    grad[rows, labels] -= 1.0
    return lse - shifted[rows, labels], grad


def softmax_xent(logits, label):
    """Cross-entropy of softmax(logits) against integer labels.

    For a single logit vector returns ``(loss, grad_logits)``. For a batch
    (B, K) the loss is the batch mean and the gradient is that of the mean.
    """
    single = np.ndim(logits) == 1
    losses, grad = softmax_xent_per_sample(logits, label)
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / losses.shape[0]
