"""Regenerate the golden files in this directory (byte layouts written out by hand)."""

import struct
import zlib
from pathlib import Path

HERE = Path(__file__).parent


def cifar_records():
    out = bytearray()
    for label in (7, 0, 9):
        out.append(label)
        # planar R, G, B; pixel values cycle so every byte is predictable
        out.extend(((label * 31 + k) * 7) % 256 for k in range(3072))
    out[1] = 255  # first record, first pixel
    return bytes(out)


def weight_container():
    # plain, N=1, base=1, 8x8 input, 3 input channels, 2 classes
    n, base, image, cin, classes = 1, 1, 8, 3, 2
    shapes = [(1, 3, 3, 3), (1, 1, 3, 3), (2, 1, 3, 3), (4, 2, 3, 3), (2, 4)]
    payload = struct.pack("<B5I", 0, n, base, image, cin, classes) + struct.pack("<I", len(shapes))
    value = 0
    for shape in shapes:
        payload += struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
        count = 1
        for s in shape:
            count *= s
        for _ in range(count + shape[0]):  # weights then biases
            payload += struct.pack("<d", value * 0.125 - 3.0)
            value += 1
    return b"RNEQ1" + payload + struct.pack("<I", zlib.crc32(payload))


if __name__ == "__main__":
    (HERE / "cifar_three.bin").write_bytes(cifar_records())
    (HERE / "tiny_plain.rneq").write_bytes(weight_container())
