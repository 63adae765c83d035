"""Forward and backward passes of the simplified plain, residual and dominant-only nets.

Every kind runs through one plain forward pass. A residual network with
parameters ``r`` is evaluated as the plain network with parameters ``T(r)``:
the skip connection lives in the ID entries of the kernels, which also
covers the channel-doubling blocks (there the "identity" becomes a stride-2,
zero-extended channel copy). Dominant-only kinds mask their non-diagonal
kernel slices before the transform.

:func:`reference_residual_forward` / :func:`reference_residual_backward`
implement the same residual net with an explicit ``x + conv(x)`` shortcut and
serve as an independent check of that construction.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import InvalidArgument
from .params import NetworkSpec, ParamVector
from .transform import INITIALIZERS, dominant_mask, make_dominant_kernels, transform_T


@dataclass
class ActivationTrace:
    """Activations of one forward pass.

    ``post[l-1]`` is a^(l), the ReLU output of conv layer l (l = 1 .. L-1),
    ``pre[l-1]`` the matching conv output, ``pooled`` the final
    sub-activation vector a^(L) and ``logits`` the dense output.
    """

    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    pooled: np.ndarray | None = None
    logits: np.ndarray | None = None

    def activation(self, layer: int) -> np.ndarray:
        if layer == len(self.post) + 1:
            return self.pooled
        if not 1 <= layer <= len(self.post):
            raise InvalidArgument(f"no activation for layer {layer}")
        return self.post[layer - 1]

    def layer_input(self, layer: int) -> np.ndarray:
        """x^(l-1): what feeds layer ``layer`` (the images for layer 1)."""
        if layer == 1:
            return self.inputs
        return self.activation(layer - 1)

    def sample(self, b: int) -> ActivationTrace:
        sl = slice(b, b + 1)
        return ActivationTrace(
            self.inputs[sl],
            [z[sl] for z in self.pre],
            [a[sl] for a in self.post],
            self.pooled[sl],
            self.logits[sl],
        )


class PassCounter:
    """Counts single-seed backward passes made through :func:`pullback`."""

    def __init__(self):
        self.count = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self.count += n

    def reset(self) -> None:
        with self._lock:
            self.count = 0


backward_passes = PassCounter()


def build(spec: NetworkSpec, seed, init: str = "kwi") -> ParamVector:
    try:
        initializer = INITIALIZERS[init.lower()]
    except KeyError:
        raise InvalidArgument(f"unknown initializer {init!r}; expected one of {sorted(INITIALIZERS)}")
    return initializer(spec, seed)


def effective_params(params: ParamVector, spec: NetworkSpec) -> ParamVector:
    """The plain-network parameters that realize ``params`` under ``spec.kind``."""
    params.check_compatible(spec)
    if spec.kind == "plain":
        return params
    if spec.kind == "residual":
        return transform_T(params)
    lower = spec.kind == "dominant_lower_dense"
    return transform_T(make_dominant_kernels(params.replace(spec=spec.with_kind("residual")), lower))


def _check_batch(spec: NetworkSpec, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    expected = (spec.in_channels, spec.image_size, spec.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise InvalidArgument(f"batch shape {x.shape} does not match (B,) + {expected}")
    return x


def plain_forward(eff: ParamVector, x: np.ndarray) -> ActivationTrace:
    trace = ActivationTrace(x)
    a = x
    for info in eff.spec.layout.conv_layers:
        z = engine.conv2d_forward(a, eff.weight(info.index), eff.bias(info.index), info.stride)
        a = engine.relu_forward(z)
        trace.pre.append(z)
        trace.post.append(a)
    trace.pooled = engine.avgpool_forward(a, eff.spec.final_size)
    L = eff.spec.depth
    trace.logits = engine.dense_forward(trace.pooled, eff.weight(L), eff.bias(L))
    return trace


def plain_backward(eff: ParamVector, trace: ActivationTrace, grad_logits) -> np.ndarray:
    """Flat gradient (layout order) of ``sum(grad_logits * logits)``."""
    spec = eff.spec
    L = spec.depth
    grad = np.zeros(spec.layout.size)
    dense = engine.dense_backward(trace.pooled, eff.weight(L), grad_logits)
    info = spec.layers[-1]
    grad[info.weight_offset:info.bias_offset] = dense.grad_weights.reshape(-1)
    grad[info.bias_offset:info.bias_offset + info.out_channels] = dense.grad_bias
    g = engine.avgpool_backward(dense.grad_input, spec.final_size)
    for info in reversed(spec.layout.conv_layers):
        gz = engine.relu_backward(trace.pre[info.index - 1], g)
        lg = engine.conv2d_backward(trace.layer_input(info.index), eff.weight(info.index),
                                    info.stride, gz)
        grad[info.weight_offset:info.bias_offset] = lg.grad_weights.reshape(-1)
        grad[info.bias_offset:info.bias_offset + info.out_channels] = lg.grad_bias
        g = lg.grad_input
    return grad


def forward(params: ParamVector, spec: NetworkSpec, batch) -> tuple[np.ndarray, ActivationTrace]:
    x = _check_batch(spec, batch)
    trace = plain_forward(effective_params(params, spec), x)
    return trace.logits, trace


def _labels(labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InvalidArgument(f"expected {n} labels, got shape {labels.shape}")
    return labels


def backward(params: ParamVector, spec: NetworkSpec, batch, labels) -> tuple[float, ParamVector]:
    """Mean cross-entropy over the batch and its exact gradient w.r.t. ``params``."""
    x = _check_batch(spec, batch)
    labels = _labels(labels, x.shape[0])
    eff = effective_params(params, spec)
    trace = plain_forward(eff, x)
    risk, grad_logits = engine.softmax_xent(trace.logits, labels)
    grad = plain_backward(eff, trace, grad_logits)
    if spec.kind.startswith("dominant"):
        grad = np.where(dominant_mask(spec, spec.kind == "dominant_lower_dense"), grad, 0.0)
    return risk, ParamVector(params.spec, grad)


def pullback(eff: ParamVector, trace: ActivationTrace, seed, from_layer: int, to_layer: int) -> np.ndarray:
    """Pull cotangents on a^(from_layer) back to a^(to_layer) with ReLU gates frozen.

    ``trace`` is a single-sample trace; ``seed`` holds S cotangent rows shaped
    like a^(from_layer) (``from_layer = L`` addresses the pooled vector).
    ``to_layer = 0`` means the network input. Biases do not enter. Each seed
    row counts as one backward pass in :data:`backward_passes`.
    """
    spec = eff.spec
    L = spec.depth
    if not 0 <= to_layer <= from_layer <= L:
        raise InvalidArgument(f"need 0 <= to_layer <= from_layer <= {L}, got {to_layer}, {from_layer}")
    g = np.asarray(seed, dtype=np.float64)
    backward_passes.add(g.shape[0])
    layer = from_layer
    if layer == L:
        if layer == to_layer:
            return g
        g = engine.avgpool_backward(g, spec.final_size)
        layer = L - 1
    # g is now a cotangent on a^(layer), post-ReLU
    while layer > to_layer:
        info = spec.layers[layer - 1]
        gz = engine.relu_backward(trace.pre[layer - 1], g)
        in_shape = (g.shape[0],) + trace.layer_input(layer).shape[1:]
        g = engine.conv2d_backward_input(eff.weight(layer), info.stride, gz, in_shape)
        layer -= 1
    return g


def sap_start(i: int, spec: NetworkSpec) -> int:
    """First layer 1 + g*N of sub-activation path i (1-based), g the first group wide enough."""
    base = spec.base_channels
    if not 1 <= i <= 4 * base:
        raise InvalidArgument(f"sub-activation index {i} out of range [1, {4 * base}]")
    g = 0 if i <= base else 1 if i <= 2 * base else 2
    return 1 + g * spec.blocks_per_group


# -- explicit-shortcut reference ------------------------------------------------


def _shortcut(x, out_channels, stride):
    y = x[:, :, ::stride, ::stride]
    if out_channels > x.shape[1]:
        pad = np.zeros((x.shape[0], out_channels - x.shape[1]) + y.shape[2:])
        y = np.concatenate([y, pad], axis=1)
    return y


def _shortcut_backward(g, in_channels, stride, in_shape):
    out = np.zeros(in_shape)
    out[:, :, ::stride, ::stride] = g[:, :in_channels]
    return out


def reference_residual_forward(r: ParamVector, batch) -> ActivationTrace:
    """Residual forward with each block computed as ``relu(shortcut(x) + conv(x; r))``."""
    spec = r.spec
    x = _check_batch(spec, batch)
    trace = ActivationTrace(x)
    a = x
    for info in spec.layout.conv_layers:
        z = engine.conv2d_forward(a, r.weight(info.index), r.bias(info.index), info.stride)
        if info.is_block:
            z = _shortcut(a, info.out_channels, info.stride) + z
        a = engine.relu_forward(z)
        trace.pre.append(z)
        trace.post.append(a)
    trace.pooled = engine.avgpool_forward(a, spec.final_size)
    L = spec.depth
    trace.logits = engine.dense_forward(trace.pooled, r.weight(L), r.bias(L))
    return trace


def reference_residual_backward(r: ParamVector, batch, labels) -> tuple[float, ParamVector]:
    spec = r.spec
    trace = reference_residual_forward(r, batch)
    labels = _labels(labels, trace.inputs.shape[0])
    risk, grad_logits = engine.softmax_xent(trace.logits, labels)
    L = spec.depth
    grad = np.zeros(spec.layout.size)
    dense = engine.dense_backward(trace.pooled, r.weight(L), grad_logits)
    info = spec.layers[-1]
    grad[info.weight_offset:info.bias_offset] = dense.grad_weights.reshape(-1)
    grad[info.bias_offset:] = dense.grad_bias
    g = engine.avgpool_backward(dense.grad_input, spec.final_size)
    for info in reversed(spec.layout.conv_layers):
        gz = engine.relu_backward(trace.pre[info.index - 1], g)
        x_in = trace.layer_input(info.index)
        lg = engine.conv2d_backward(x_in, r.weight(info.index), info.stride, gz)
        grad[info.weight_offset:info.bias_offset] = lg.grad_weights.reshape(-1)
        grad[info.bias_offset:info.bias_offset + info.out_channels] = lg.grad_bias
        g = lg.grad_input
        if info.is_block:
            g = g + _shortcut_backward(gz, info.in_channels, info.stride, x_in.shape)
    return risk, ParamVector(spec, grad)
