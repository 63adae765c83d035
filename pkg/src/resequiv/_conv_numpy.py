"""Pure-numpy 3x3 convolution kernels (im2col + matmul).

Same calling convention as the compiled ``_conv`` module: padded inputs,
caller-allocated outputs that are written (forward) or accumulated into
(backward).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _columns(xpad, stride, ho, wo):
    # (B, C, Hp-2, Wp-2, 3, 3) window view -> (B*Ho*Wo, C*9) patch matrix
    win = sliding_window_view(xpad, (3, 3), axis=(2, 3))
    win = win[:, :, : ho * stride : stride, : wo * stride : stride]
    b, c = xpad.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * 9)


def conv_forward(xpad, w, b, stride, out):
    bsz, d, ho, wo = out.shape
    cols = _columns(xpad, stride, ho, wo)
    res = cols @ w.reshape(d, -1).T
    res += b
    out[...] = res.reshape(bsz, ho, wo, d).transpose(0, 3, 1, 2)


def _scatter_cols(gcols, stride, gxpad):
    bsz, ho, wo, c = gcols.shape[:4]
    for u in range(3):
        for v in range(3):
            gxpad[:, :, u : u + ho * stride : stride, v : v + wo * stride : stride] += (
                gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            )


def conv_backward(xpad, w, g, stride, gw, gb, gxpad):
    bsz, d, ho, wo = g.shape
    c = w.shape[1]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, d)
    cols = _columns(xpad, stride, ho, wo)
    gw += (g2.T @ cols).reshape(w.shape)
    gb += g2.sum(axis=0)
    gcols = (g2 @ w.reshape(d, -1)).reshape(bsz, ho, wo, c, 3, 3)
    _scatter_cols(gcols, stride, gxpad)


def conv_backward_input(w, g, stride, gxpad):
    bsz, d, ho, wo = g.shape
    c = w.shape[1]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, d)
    gcols = (g2 @ w.reshape(d, -1)).reshape(bsz, ho, wo, c, 3, 3)
    _scatter_cols(gcols, stride, gxpad)
