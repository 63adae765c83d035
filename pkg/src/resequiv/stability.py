"""Noise-stability measurements: per-sample layer cushions and interlayer cushions.

Per-sample layer cushion::

    mu(x) = ||A x|| / (||A||_F * ||x||)

with A the linear operator of one convolution (bias excluded), read as a
matrix from the zero-padded input to the output map. Every row of that
matrix holds the full kernel once, so ``||A||_F^2 = Ho * Wo * ||W||_F^2``.
For residual-kind networks ``A x`` runs the full kernel including the ID
entries, while ``||A||_F`` is taken with them removed, so the norm only sees
the learned change.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import engine, network
from .errors import EmptyReportError, InvalidArgument, SizeLimitError
from .params import RESIDUAL_KINDS, NetworkSpec, ParamVector
from .transform import make_dominant_kernels

DENSE_ORACLE_LIMIT = 100_000


@dataclass
class CushionReport:
    layer: tuple  # (l,) for a layer cushion, (i, j) for an interlayer cushion
    values: np.ndarray
    sample_index: np.ndarray
    skipped: int = 0
    id_removed: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return int(self.values.size)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        return float(self.values.std())

    @property
    def min(self) -> float:
        return float(self.values.min())

    header = ("sample_index", "mu")

    def rows(self):
        """Per-sample rows, then one summary row ``mean=..;std=..;...`` in the mu column."""
        out = [(int(i), float(v)) for i, v in zip(self.sample_index, self.values)]
        summary = (
            f"mean={self.mean!r};std={self.std!r};min={self.min!r};"
            f"count={self.count};skipped={self.skipped};id_removed={int(self.id_removed)}"
        )
        out.append(("summary", summary))
        return out


def cushion_values(ax_norm, a_frob: float, x_norm, index=None):
    """Per-sample ``||Ax|| / (||A||_F ||x||)``; zero-norm inputs are skipped.

    Returns ``(values, kept_indices, skipped_count)``.
    """
    ax_norm = np.asarray(ax_norm, dtype=np.float64)
    x_norm = np.asarray(x_norm, dtype=np.float64)
    if a_frob <= 0:
        raise InvalidArgument("operator has zero Frobenius norm")
    index = np.arange(x_norm.size) if index is None else np.asarray(index)
    keep = x_norm > 0
    if not keep.any():
        raise EmptyReportError("every sample has a zero-norm input; cushion is undefined")
    return ax_norm[keep] / (a_frob * x_norm[keep]), index[keep], int((~keep).sum())


def matrix_cushion(A, X) -> CushionReport:
    """Layer cushion of an explicit matrix ``A`` over sample rows of ``X``."""
    A = np.asarray(A, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != A.shape[1]:
        raise InvalidArgument(f"samples of width {X.shape[1]} do not fit a {A.shape} matrix")
    vals, idx, skipped = cushion_values(
        np.linalg.norm(X @ A.T, axis=1), float(np.linalg.norm(A)), np.linalg.norm(X, axis=1)
    )
    return CushionReport((0,), vals, idx, skipped)


@dataclass
class LayerMatrixView:
    """One convolution as a linear operator on (C, H, W) inputs."""

    weight: np.ndarray  # full kernel used for A x
    stride: int
    in_shape: tuple  # (C, H, W)
    norm_weight: np.ndarray  # kernel whose norm defines ||A||_F
    id_removed: bool

    @property
    def out_hw(self) -> tuple:
        return self.in_shape[1] // self.stride, self.in_shape[2] // self.stride

    @property
    def frobenius(self) -> float:
        ho, wo = self.out_hw
        return float(np.sqrt(ho * wo) * np.linalg.norm(self.norm_weight))

    def apply(self, x) -> np.ndarray:
        zeros = np.zeros(self.weight.shape[0])
        return engine.conv2d_forward(x, self.weight, zeros, self.stride)

    def dense(self, which: str = "full") -> np.ndarray:
        """Matricized operator from the flattened padded input to the flattened output."""
        w = self.weight if which == "full" else self.norm_weight
        d, c, u, v = w.shape
        _, h, wd = self.in_shape
        ho, wo = self.out_hw
        hp, wp = h + u - 1, wd + v - 1
        if d * ho * wo * c * hp * wp > DENSE_ORACLE_LIMIT:
            raise SizeLimitError("layer too large for a dense matricization")
        A = np.zeros((d, ho, wo, c, hp, wp))
        for i in range(ho):
            for j in range(wo):
                r, s = i * self.stride, j * self.stride
                A[:, i, j, :, r:r + u, s:s + v] = w
        return A.reshape(d * ho * wo, c * hp * wp)


def _remove_id(weight: np.ndarray) -> np.ndarray:
    w = weight.copy()
    n = min(w.shape[0], w.shape[1])
    idx = np.arange(n)
    w[idx, idx, w.shape[2] // 2, w.shape[3] // 2] -= 1.0
    return w


def layer_view(params: ParamVector, spec: NetworkSpec, layer: int, id_removed: bool | None = None):
    """Operator of conv layer ``layer``; ``id_removed=None`` removes ID entries iff the kind is residual."""
    info = params.layer(layer)
    if info.kind != "conv":
        raise InvalidArgument(f"layer {layer} is not a convolution")
    eff = network.effective_params(params, spec)
    weight = eff.weight(layer)
    residual = spec.kind in RESIDUAL_KINDS
    if id_removed is None:
        id_removed = residual
    id_removed = bool(id_removed and info.is_block)
    if not id_removed:
        norm_weight = weight
    elif spec.kind == "residual":
        # the residual coordinates themselves, so no (r + 1) - 1 rounding
        norm_weight = params.weight(layer)
    elif residual:
        lower = spec.kind == "dominant_lower_dense"
        base = params.replace(spec=spec.with_kind("residual"))
        norm_weight = make_dominant_kernels(base, lower).weight(layer)
    else:
        norm_weight = _remove_id(weight)
    in_shape = (info.in_channels, info.in_size, info.in_size)
    return LayerMatrixView(weight, info.stride, in_shape, norm_weight, id_removed)


def layer_cushion(params: ParamVector, spec: NetworkSpec, layer: int, batch,
                  id_removed: bool | None = None, trace=None) -> CushionReport:
    """Per-sample cushion of conv layer ``layer`` on the activations that feed it."""
    view = layer_view(params, spec, layer, id_removed)
    if trace is None:
        _, trace = network.forward(params, spec, batch)
    x = trace.layer_input(layer)
    ax = view.apply(x)
    vals, idx, skipped = cushion_values(
        np.linalg.norm(ax.reshape(len(ax), -1), axis=1),
        view.frobenius,
        np.linalg.norm(x.reshape(len(x), -1), axis=1),
    )
    return CushionReport((layer,), vals, idx, skipped, view.id_removed, {"samples": len(x)})


def all_layer_cushions(params: ParamVector, spec: NetworkSpec, batch) -> dict:
    """Layer cushion report for every conv layer, sharing one forward pass."""
    _, trace = network.forward(params, spec, batch)
    return {
        info.index: layer_cushion(params, spec, info.index, batch, trace=trace)
        for info in spec.layout.conv_layers
    }


def subnetwork_jacobian(eff: ParamVector, trace, i: int, j: int) -> np.ndarray:
    """Jacobian of a^(j) w.r.t. x^(i-1) for one sample, one pullback per output coordinate."""
    out = trace.activation(j)
    m = out[0].size
    seed = np.eye(m).reshape((m,) + out.shape[1:])
    rows = network.pullback(eff, trace, seed, from_layer=j, to_layer=i - 1)
    return rows.reshape(m, -1)


def interlayer_cushion(params: ParamVector, spec: NetworkSpec, i: int, j: int, batch,
                       cap: int = 4096, threads: int = 1) -> CushionReport:
    """``sqrt(n_i) ||J x|| / (||J||_F ||x||)`` for the layers i..j, gates frozen at x.

    ``x`` is the input x^(i-1) of layer i and J the Jacobian of a^(j) with
    respect to it. The Jacobian keeps the identity contribution of residual
    kernels; no ID removal applies here.
    """
    L = spec.depth
    if not 1 <= i <= j <= L:
        raise InvalidArgument(f"need 1 <= i <= j <= {L}, got i={i}, j={j}")
    eff = network.effective_params(params, spec)
    _, trace = network.forward(params, spec, batch)
    out_size = trace.activation(j)[0].size
    if out_size > cap:
        raise SizeLimitError(f"subnetwork output has {out_size} coordinates, cap is {cap}")
    x = trace.layer_input(i)
    n = x[0].size

    def one(b):
        J = subnetwork_jacobian(eff, trace.sample(b), i, j)
        xb = x[b].reshape(-1)
        return np.linalg.norm(J @ xb), np.linalg.norm(J), np.linalg.norm(xb)

    samples = range(len(x))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, samples))
    else:
        parts = [one(b) for b in samples]
    jx, jf, xn = (np.array(col) for col in zip(*parts))
    keep = (xn > 0) & (jf > 0)
    if not keep.any():
        raise EmptyReportError("no sample has a nonzero input and Jacobian")
    vals = np.sqrt(n) * jx[keep] / (jf[keep] * xn[keep])
    return CushionReport((i, j), vals, np.flatnonzero(keep), int((~keep).sum()), False,
                         {"samples": len(x), "n_input": n})
