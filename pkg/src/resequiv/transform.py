"""Initializers, the plain/residual parameter bijection, and weight statistics."""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidArgument
from .params import RESIDUAL_KINDS, NetworkSpec, ParamVector


def _fan_in(info) -> int:
    # C*U*V for kernels, input width for the dense layer
    return int(np.prod(info.weight_shape[1:]))


def kwi_sigma(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


def hmwi_sigma(fan_in: int) -> float:
    return 1.0 / fan_in


def _gaussian_init(spec: NetworkSpec, seed, sigma_of) -> ParamVector:
    # One standard-normal draw per weight in layout order, so equal seeds give
    # scale-coupled vectors across initializers.
    rng = np.random.default_rng(seed)
    data = np.zeros(spec.layout.size)
    for info in spec.layers:
        z = rng.standard_normal(info.weight_size)
        data[info.weight_offset:info.bias_offset] = sigma_of(_fan_in(info)) * z
    return ParamVector(spec, data)


def kwi_init(spec: NetworkSpec, seed) -> ParamVector:
    """Kaiming init: weights ~ N(0, 2/S) with S = C*U*V (fan-in for dense), zero biases."""
    return _gaussian_init(spec, seed, kwi_sigma)


def hmwi_init(spec: NetworkSpec, seed) -> ParamVector:
    """Small residual init: weights ~ N(0, (1/S)^2), zero biases."""
    return _gaussian_init(spec, seed, hmwi_sigma)


INITIALIZERS = {"kwi": kwi_init, "hmwi": hmwi_init}


def id_entries(spec: NetworkSpec) -> list[tuple[int, int]]:
    """(layer, channel) pairs, both 1-based, addressing kernel entry (c, c, 0, 0)."""
    out = []
    for info in spec.layers:
        if info.is_block:
            out.extend((info.index, c + 1) for c in range(min(info.in_channels, info.out_channels)))
    return out


def _check_shape(v: ParamVector) -> None:
    if not isinstance(v, ParamVector):
        raise InvalidArgument(f"expected a ParamVector, got {type(v).__name__}")


def transform_T(r: ParamVector) -> ParamVector:
    """Residual -> plain: add 1 at every ID entry. Biases and non-block layers are untouched."""
    _check_shape(r)
    data = r.flatten()
    data[r.spec.layout.id_index] += 1.0
    return ParamVector(r.spec.with_kind("plain"), data)


def transform_T_inv(p: ParamVector) -> ParamVector:
    """Plain -> residual: subtract 1 at every ID entry."""
    _check_shape(p)
    data = p.flatten()
    data[p.spec.layout.id_index] -= 1.0
    return ParamVector(p.spec.with_kind("residual"), data)


@dataclass(frozen=True)
class WeightStats:
    mean: float
    std: float
    mass_all: float
    mass_ge_threshold: float
    mass_id: float
    count_gt_0_7: int
    # same masses restricted to the 3N block layers
    mass_all_blocks: float
    mass_ge_threshold_blocks: float
    threshold: float

    def as_dict(self) -> dict:
        return asdict(self)


def weight_stats(v: ParamVector, threshold: float = 0.25) -> WeightStats:
    """Mean, spread and L1 masses over weights (biases excluded)."""
    layout = v.spec.layout
    w = v.data[layout.weight_mask]
    block_mask = np.zeros(layout.size, dtype=bool)
    for info in v.layers:
        if info.is_block:
            block_mask[info.weight_offset:info.bias_offset] = True
    wb = v.data[block_mask]
    aw, ab = np.abs(w), np.abs(wb)
    return WeightStats(
        mean=float(w.mean()) if w.size else 0.0,
        std=float(w.std()) if w.size else 0.0,
        mass_all=float(aw.sum()),
        mass_ge_threshold=float(aw[aw >= threshold].sum()),
        mass_id=float(np.abs(v.data[layout.id_index]).sum()),
        count_gt_0_7=int((aw > 0.7).sum()),
        mass_all_blocks=float(ab.sum()),
        mass_ge_threshold_blocks=float(ab[ab >= threshold].sum()),
        threshold=threshold,
    )


def dominant_mask(spec: NetworkSpec, lower_dense: bool = False) -> np.ndarray:
    """Flat boolean mask of entries kept in a dominant-only network.

    Square block kernels keep slices (d, c) with d == c. Channel-doubling
    kernels keep d == c and d == c + C, or the whole lower half when
    ``lower_dense``. Biases, the first convolution and the dense layer are
    kept in full.
    """
    return _dominant_mask(spec.architecture, bool(lower_dense))


@functools.lru_cache(maxsize=None)
def _dominant_mask(arch: tuple, lower_dense: bool) -> np.ndarray:
    spec = NetworkSpec(*(("plain",) + arch))
    mask = np.ones(spec.layout.size, dtype=bool)
    for info in spec.layers:
        if not info.is_block:
            continue
        c_in, d_out = info.in_channels, info.out_channels
        keep = np.zeros((d_out, c_in), dtype=bool)
        diag = np.arange(min(c_in, d_out))
        keep[diag, diag] = True
        if d_out == 2 * c_in:
            if lower_dense:
                keep[c_in:, :] = True
            else:
                keep[diag + c_in, diag] = True
        kernel_keep = np.broadcast_to(keep[:, :, None, None], info.weight_shape)
        mask[info.weight_offset:info.bias_offset] = kernel_keep.reshape(-1)
    mask.setflags(write=False)
    return mask


def make_dominant_kernels(params: ParamVector, lower_dense: bool = False) -> ParamVector:
    """Zero every non-dominant kernel slice of a residual parameter vector."""
    if params.spec.kind not in RESIDUAL_KINDS:
        raise InvalidArgument(
            f"dominant-only kernels are defined on residual parameters, got kind {params.spec.kind!r}"
        )
    data = np.where(dominant_mask(params.spec, lower_dense), params.data, 0.0)
    kind = "dominant_lower_dense" if lower_dense else "dominant_only"
    return ParamVector(params.spec.with_kind(kind), data)
