"""Dominant gradient flows in the simplified networks.

For one sample and a layer l < L, ``theta[i, j, p]`` is the part of
dL/da^(l)_{ip} mediated by final sub-activation j::

    theta[i, j, p] = d a^(L)_j / d a^(l)_{ip} * V_j,   V = dL/da^(L)

with ReLU gates frozen at their forward values. ``r_i`` averages
``|theta[i, i, p]| / |sum_{j != i} theta[i, j, p]|`` over the positions p,
and sigma is the fraction of channels with ``r_i > 1``. Channels are matched
by raw index, also across width-doubling groups.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import engine, network
from .errors import InvalidArgument
from .params import NetworkSpec, ParamVector


@dataclass
class ThetaSlice:
    layer: int
    theta: np.ndarray  # (C_l, 4*base, P)
    v: np.ndarray  # dL/da^(L) for this sample

    @property
    def channels(self) -> int:
        return self.theta.shape[0]


@dataclass
class DgfEntry:
    layer: int
    sigma: np.ndarray  # per-sample fractions
    ratios: np.ndarray  # (B, C_l); nan where every position was 0/0
    degenerate_count: int  # 0/0 positions skipped, summed over the batch

    @property
    def sigma_mean(self) -> float:
        return float(self.sigma.mean())

    @property
    def sigma_std(self) -> float:
        return float(self.sigma.std())

    def row(self):
        return (self.layer, self.sigma_mean, self.sigma_std, self.degenerate_count)


DGF_COLUMNS = ("layer", "sigma_mean", "sigma_std", "degenerate_count")


def _single(spec, sample):
    x = np.asarray(sample, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise InvalidArgument("compute_theta takes exactly one sample")
    return network._check_batch(spec, x)


def _final_grad(eff: ParamVector, trace, label) -> np.ndarray:
    L = eff.spec.depth
    _, g = engine.softmax_xent(trace.logits[0], int(label))
    return eff.weight(L).T @ g


def theta_from_trace(eff: ParamVector, trace, v, layer: int) -> ThetaSlice:
    """Theta for a single-sample trace; costs 4*base pullbacks."""
    L = eff.spec.depth
    if not 1 <= layer < L:
        raise InvalidArgument(f"theta needs 1 <= layer < {L}, got {layer}")
    m = eff.spec.final_channels
    jac = network.pullback(eff, trace, np.eye(m), from_layer=L, to_layer=layer)
    # jac[j, i, h, w] = d a^(L)_j / d a^(layer)_{i,h,w}
    theta = jac.reshape(m, jac.shape[1], -1).transpose(1, 0, 2) * v[None, :, None]
    return ThetaSlice(layer, theta, np.asarray(v))


def compute_theta(params: ParamVector, spec: NetworkSpec, sample, label, layer: int) -> ThetaSlice:
    eff = network.effective_params(params, spec)
    trace = network.plain_forward(eff, _single(spec, sample))
    return theta_from_trace(eff, trace, _final_grad(eff, trace, label), layer)


def ratio_details(theta: ThetaSlice, i: int) -> tuple[float, int]:
    """``(r_i, skipped)`` for 0-based channel ``i``.

    0/0 positions are skipped; x/0 with x != 0 gives inf. When every
    position is 0/0 the ratio is nan.
    """
    if not 0 <= i < min(theta.channels, theta.theta.shape[1]):
        raise InvalidArgument(f"channel {i} is not present at both layers")
    t = theta.theta[i]
    diag = np.abs(t[i])
    off = np.abs(np.delete(t, i, axis=0).sum(axis=0))
    degenerate = (diag == 0) & (off == 0)
    used = ~degenerate
    if not used.any():
        return float("nan"), int(degenerate.sum())
    with np.errstate(divide="ignore"):
        q = diag[used] / off[used]
    return float(q.mean()), int(degenerate.sum())


def ratio_r(theta: ThetaSlice, i: int) -> float:
    return ratio_details(theta, i)[0]


def _channel_ratios(theta: ThetaSlice):
    out = np.empty(theta.channels)
    skipped = 0
    for i in range(theta.channels):
        out[i], s = ratio_details(theta, i)
        skipped += s
    return out, skipped


def sigma_of_ratios(ratios) -> float:
    """Fraction of channels with r > 1 (inf counts, nan does not)."""
    ratios = np.asarray(ratios)
    return float(np.count_nonzero(ratios > 1) / ratios.size)


def sigma_fraction(params: ParamVector, spec: NetworkSpec, batch, labels, layer: int,
                   threads: int = 1) -> DgfEntry:
    """Per-sample sigma at ``layer``, batch-averaged by :attr:`DgfEntry.sigma_mean`."""
    x = network._check_batch(spec, batch)
    labels = network._labels(labels, x.shape[0])
    if not 1 <= layer < spec.depth:
        raise InvalidArgument(f"sigma needs 1 <= layer < {spec.depth}, got {layer}")
    eff = network.effective_params(params, spec)
    full = network.plain_forward(eff, x)

    def one(b):
        tr = full.sample(b)
        th = theta_from_trace(eff, tr, _final_grad(eff, tr, labels[b]), layer)
        return _channel_ratios(th)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, range(len(x))))
    else:
        parts = [one(b) for b in range(len(x))]
    ratios = np.stack([p[0] for p in parts])
    sigma = np.array([sigma_of_ratios(r) for r in ratios])
    return DgfEntry(layer, sigma, ratios, int(sum(p[1] for p in parts)))


def dgf_report(params: ParamVector, spec: NetworkSpec, batch, labels, layers=None,
               threads: int = 1) -> list[DgfEntry]:
    layers = range(1, spec.depth) if layers is None else layers
    return [sigma_fraction(params, spec, batch, labels, l, threads) for l in layers]


def final_grad_stats(params: ParamVector, spec: NetworkSpec, batches) -> tuple[float, float]:
    """Mean and std of dR/da^(L) entries, R the mini-batch mean risk, over ``(x, y)`` batches."""
    eff = network.effective_params(params, spec)
    L = spec.depth
    chunks = []
    for x, y in batches:
        x = network._check_batch(spec, x)
        trace = network.plain_forward(eff, x)
        _, g = engine.softmax_xent(trace.logits, network._labels(y, x.shape[0]))
        chunks.append((g @ eff.weight(L)).reshape(-1))
    if not chunks:
        return 0.0, 0.0
    v = np.concatenate(chunks)
    return float(v.mean()), float(v.std())
