"""Network descriptors and the flat parameter vector.

Layer numbering follows the architecture: layer 1 is the first convolution
(3 -> base channels), layers 2 .. 3N+1 are the 3N block convolutions in
groups of N (widths base, 2*base, 4*base), and layer L = 3N+2 is the dense
classifier. The first block of groups 1 and 2 has stride 2 and doubles the
channel count.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

KINDS = ("plain", "residual", "dominant_only", "dominant_lower_dense")
RESIDUAL_KINDS = ("residual", "dominant_only", "dominant_lower_dense")


@dataclass(frozen=True)
class NetworkSpec:
    kind: str = "plain"
    blocks_per_group: int = 1
    base_channels: int = 16
    image_size: int = 32
    in_channels: int = 3
    classes: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown network kind {self.kind!r}; expected one of {KINDS}")
        if self.blocks_per_group < 1:
            raise InvalidArgument("blocks_per_group must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1:
            raise InvalidArgument("channel counts must be positive")
        s = self.image_size
        if s < 8 or s & (s - 1):
            raise InvalidArgument(f"image_size must be a power of two >= 8, got {s}")
        if self.classes < 2:
            raise InvalidArgument("need at least two classes")

    @classmethod
    def from_depth(cls, depth: int, **kwargs) -> NetworkSpec:
        if depth < 5 or (depth - 2) % 3:
            raise InvalidArgument(
                f"depth must be 3N+2 for integer N >= 1 (5, 8, 11, 14, 17, 20, ..., 32, 44), got {depth}"
            )
        return cls(blocks_per_group=(depth - 2) // 3, **kwargs)

    @property
    def depth(self) -> int:
        return 3 * self.blocks_per_group + 2

    @property
    def final_size(self) -> int:
        return self.image_size // 4

    @property
    def final_channels(self) -> int:
        return 4 * self.base_channels

    @property
    def architecture(self) -> tuple:
        """Everything except ``kind``: two specs with equal architecture share a layout."""
        return (self.blocks_per_group, self.base_channels, self.image_size,
                self.in_channels, self.classes)

    @property
    def layout(self) -> Layout:
        return _layout(self.architecture)

    @property
    def layers(self) -> tuple[LayerInfo, ...]:
        return self.layout.layers

    def with_kind(self, kind: str) -> NetworkSpec:
        return dataclasses.replace(self, kind=kind)


@dataclass(frozen=True)
class LayerInfo:
    index: int  # 1-based layer number
    kind: str  # "conv" or "dense"
    group: int | None  # 0, 1, 2 for block layers
    in_channels: int
    out_channels: int
    stride: int
    weight_shape: tuple
    weight_offset: int
    bias_offset: int
    in_size: int  # input spatial extent (conv layers)

    @property
    def is_block(self) -> bool:
        return self.group is not None

    @property
    def weight_size(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def out_size(self) -> int:
        return self.in_size // self.stride


@dataclass(frozen=True, eq=False)
class Layout:
    layers: tuple[LayerInfo, ...]
    size: int
    weight_mask: np.ndarray  # True on weights, False on biases
    id_index: np.ndarray  # flat positions of every ID entry, block layers only

    @property
    def conv_layers(self) -> tuple[LayerInfo, ...]:
        return self.layers[:-1]


@functools.lru_cache(maxsize=None)
def _layout(arch: tuple) -> Layout:
    n, base, image, cin, classes = arch
    infos = []
    offset = 0
    size = image

    def add(index, kind, group, c, d, stride, shape, in_size):
        nonlocal offset
        w_off = offset
        offset += int(np.prod(shape))
        b_off = offset
        offset += d
        infos.append(LayerInfo(index, kind, group, c, d, stride, shape, w_off, b_off, in_size))

    add(1, "conv", None, cin, base, 1, (base, cin, 3, 3), size)
    c = base
    for k in range(3 * n):
        g = k // n
        d = base * 2**g
        stride = 2 if (g > 0 and k % n == 0) else 1
        add(2 + k, "conv", g, c, d, stride, (d, c, 3, 3), size)
        size //= stride
        c = d
    add(3 * n + 2, "dense", None, c, classes, 1, (classes, c), size)

    weight_mask = np.zeros(offset, dtype=bool)
    ids = []
    for info in infos:
        weight_mask[info.weight_offset:info.bias_offset] = True
        if info.is_block:
            cc, dd = info.in_channels, info.out_channels
            for ch in range(min(cc, dd)):
                # kernel position (c, c, 0, 0) is the centre tap [c, c, 1, 1]
                ids.append(info.weight_offset + ((ch * cc + ch) * 3 + 1) * 3 + 1)
    weight_mask.setflags(write=False)
    id_index = np.asarray(ids, dtype=np.intp)
    id_index.setflags(write=False)
    return Layout(tuple(infos), offset, weight_mask, id_index)


class ParamVector:
    """All kernels and biases of one network, stored as one read-only flat array.

    Records are laid out in layer order, each as its weights (D, C, U, V
    row-major) followed by its biases. ``spec`` records the network the
    vector was made for; its ``kind`` tells the transforms which
    parameterization the numbers are in.
    """

    __slots__ = ("spec", "data")

    def __init__(self, spec: NetworkSpec, data):
        data = np.array(data, dtype=np.float64, copy=True).reshape(-1)
        if data.shape != (spec.layout.size,):
            raise InvalidArgument(
                f"parameter vector of length {data.size} does not fit layout of size {spec.layout.size}"
            )
        data.setflags(write=False)
        self.spec = spec
        self.data = data

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> ParamVector:
        return cls(spec, np.zeros(spec.layout.size))

    @classmethod
    def unflatten(cls, spec: NetworkSpec, vector) -> ParamVector:
        return cls(spec, vector)

    def flatten(self) -> np.ndarray:
        return self.data.copy()

    def replace(self, data=None, spec: NetworkSpec | None = None) -> ParamVector:
        return ParamVector(spec or self.spec, self.data if data is None else data)

    @property
    def layers(self) -> tuple[LayerInfo, ...]:
        return self.spec.layers

    def layer(self, index: int) -> LayerInfo:
        if not 1 <= index <= self.spec.depth:
            raise InvalidArgument(f"layer {index} out of range [1, {self.spec.depth}]")
        return self.spec.layers[index - 1]

    def weight(self, index: int) -> np.ndarray:
        info = self.layer(index)
        return self.data[info.weight_offset:info.bias_offset].reshape(info.weight_shape)

    def bias(self, index: int) -> np.ndarray:
        info = self.layer(index)
        return self.data[info.bias_offset:info.bias_offset + info.out_channels]

    def weights_only(self) -> np.ndarray:
        return self.data[self.spec.layout.weight_mask]

    def check_compatible(self, spec: NetworkSpec) -> None:
        if self.spec.architecture != spec.architecture:
            raise InvalidArgument(
                f"parameters built for architecture {self.spec.architecture}, "
                f"network expects {spec.architecture}"
            )

    def __len__(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"ParamVector(kind={self.spec.kind!r}, depth={self.spec.depth}, size={self.data.size})"
