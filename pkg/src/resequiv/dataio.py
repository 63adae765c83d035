"""Datasets, the weight container format, and CSV emission.

Weight container layout (all integers little-endian)::

    b"RNEQ1"                          magic
    u8   kind code (index into KINDS)
    u32  N, base, image_size, in_channels, classes
    u32  layer count
    per layer, in parameter-vector order:
        u32 ndim, u32 dims[ndim]      weight shape (D, C, U, V) or (K, F)
        f64 weights                   row-major: D, then C, then row, then col
        f64 biases[D]
    u32  CRC-32 of every byte between the magic and the checksum
"""

from __future__ import annotations

import csv
import io
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument
from .params import KINDS, NetworkSpec, ParamVector

CIFAR_RECORD = 3073
CIFAR_CLASSES = 10
MAGIC = b"RNEQ1"


@dataclass
class Dataset:
    images: np.ndarray  # (B, 3, H, W) in [0, 1]
    labels: np.ndarray  # int64 class indices
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise InvalidArgument(
                f"images {self.images.shape} and labels {self.labels.shape} disagree"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, count: int) -> Dataset:
        return Dataset(self.images[:count], self.labels[:count], self.split)


# -- CIFAR-10 -------------------------------------------------------------------


def read_cifar10(path, split: str = "train") -> Dataset:
    """Read one CIFAR-10 binary batch: records of 1 label byte + 3072 planar RGB bytes."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise FormatError(
            f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
            f"(file length {len(raw)} is not a multiple of {CIFAR_RECORD})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise FormatError(
            f"{path}: label {labels[bad[0]]} >= {CIFAR_CLASSES} at byte offset {bad[0] * CIFAR_RECORD}"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, split)


def read_cifar10_dir(directory, split: str = "train", limit: int | None = None) -> Dataset:
    """Concatenate ``data_batch_*.bin`` (train) or ``test_batch.bin`` (test) from a directory."""
    directory = Path(directory)
    names = sorted(directory.glob("data_batch_*.bin")) if split == "train" else [directory / "test_batch.bin"]
    if not names or not all(p.exists() for p in names):
        raise FormatError(f"no CIFAR-10 {split} batches found in {directory}")
    parts = [read_cifar10(p, split) for p in names]
    ds = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), split)
    return ds.subset(limit) if limit is not None else ds


def write_cifar10(dataset: Dataset, path) -> None:
    """Write images in [0, 1] back to the binary record format (rounded to bytes)."""
    n = len(dataset)
    if dataset.images.shape[1:] != (3, 32, 32):
        raise InvalidArgument("CIFAR-10 records hold 3x32x32 images")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(n, -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


# -- synthetic data ---------------------------------------------------------------

_SPLIT_IDS = {"train": 0, "test": 1}


def synth_dataset(seed: int, count: int, size: int = 8, classes: int = 10,
                  split: str = "train", noise: float = 0.25) -> Dataset:
    """Class-conditioned oriented bars with a colour cue and additive noise.

    Class k draws a bar at angle pi*k/K (plus jitter) through a random point
    near the centre, tinted with a class colour mixed with a random colour.
    Classes are balanced; ``split`` feeds the seed so train and test
    draws never share a random stream.
    """
    if size < 8 or size & (size - 1):
        raise InvalidArgument(f"size must be a power of two >= 8, got {size}")
    if classes < 2:
        raise InvalidArgument("need at least two classes")
    rng = np.random.default_rng([seed, _SPLIT_IDS[split]])
    labels = rng.permutation(np.arange(count) % classes)

    hue = np.arange(classes) / classes
    palette = 0.5 + 0.5 * np.stack(
        [np.cos(2 * np.pi * (hue + s)) for s in (0.0, 1 / 3, 2 / 3)], axis=1
    )

    coords = (np.arange(size) - (size - 1) / 2) / (size / 2)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    angle = np.pi * labels / classes + rng.normal(0.0, 0.12, count)
    shift = rng.uniform(-0.35, 0.35, (count, 2))
    width = rng.uniform(0.12, 0.3, count)
    # signed distance to the bar's centre line
    dist = (
        (xx[None] - shift[:, 0, None, None]) * np.sin(angle)[:, None, None]
        - (yy[None] - shift[:, 1, None, None]) * np.cos(angle)[:, None, None]
    )
    bar = np.exp(-0.5 * (dist / width[:, None, None]) ** 2)
    mix = rng.uniform(0.4, 0.8, count)[:, None]
    colour = mix * palette[labels] + (1 - mix) * rng.uniform(0, 1, (count, 3))
    background = rng.uniform(0.0, 0.3, (count, 1, 1, 1))
    images = background + bar[:, None] * colour[:, :, None, None]
    images += noise * rng.standard_normal(images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), split)


# -- weight container ----------------------------------------------------------------


def _encode(params: ParamVector) -> bytes:
    spec = params.spec
    out = io.BytesIO()
    out.write(struct.pack("<B5I", KINDS.index(spec.kind), spec.blocks_per_group, spec.base_channels,
                          spec.image_size, spec.in_channels, spec.classes))
    out.write(struct.pack("<I", len(spec.layers)))
    for info in spec.layers:
        out.write(struct.pack(f"<I{len(info.weight_shape)}I", len(info.weight_shape), *info.weight_shape))
        out.write(params.weight(info.index).astype("<f8").tobytes())
        out.write(params.bias(info.index).astype("<f8").tobytes())
    return out.getvalue()


def save_weights(params: ParamVector, path, spec: NetworkSpec | None = None) -> None:
    if spec is not None:
        params.check_compatible(spec)
        params = params.replace(spec=spec)
    payload = _encode(params)
    Path(path).write_bytes(MAGIC + payload + struct.pack("<I", zlib.crc32(payload)))


def load_weights(path) -> tuple[ParamVector, NetworkSpec]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    if len(raw) < len(MAGIC) + 4:
        raise FormatError(f"{path}: file too short")
    payload, (crc,) = raw[len(MAGIC):-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    try:
        return _decode(payload)
    except (struct.error, IndexError, InvalidArgument) as exc:
        raise FormatError(f"{path}: inconsistent container ({exc})") from exc


def _decode(payload: bytes) -> tuple[ParamVector, NetworkSpec]:
    kind, n, base, image, cin, classes = struct.unpack_from("<B5I", payload, 0)
    pos = struct.calcsize("<B5I")
    spec = NetworkSpec(KINDS[kind], n, base, image, cin, classes)
    (count,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    if count != len(spec.layers):
        raise InvalidArgument(f"{count} layer records, spec needs {len(spec.layers)}")
    data = np.empty(spec.layout.size)
    for info in spec.layers:
        (ndim,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", payload, pos)
        pos += 4 * ndim
        if tuple(shape) != info.weight_shape:
            raise InvalidArgument(f"layer {info.index} has shape {shape}, expected {info.weight_shape}")
        nw = info.weight_size + info.out_channels
        chunk = payload[pos:pos + 8 * nw]
        if len(chunk) != 8 * nw:
            raise InvalidArgument(f"layer {info.index} record truncated")
        data[info.weight_offset:info.weight_offset + nw] = np.frombuffer(chunk, dtype="<f8")
        pos += 8 * nw
    if pos != len(payload):
        raise InvalidArgument(f"{len(payload) - pos} trailing bytes after the last layer")
    return ParamVector(spec, data), spec


# -- CSV ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(rows, header, path=None) -> str:
    """Write rows with a header line; ``path=None`` returns the text instead.

    Floats use ``repr`` so the output is locale-independent and round-trips.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    if path is not None and path != "-":
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
