"""Spatial samplers: the diagonal pair downsampler and pixel-shuffle PD_s.

Images here are ``H x W x C`` numpy arrays.  Odd sizes are reflect-padded
on the bottom/right edge before sampling; the pixel-shuffle inverse crops
the padding off again so the round trip is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = [
    "DIAG_KERNELS",
    "ShuffleLayout",
    "pad_to_multiple",
    "pair_downsample",
    "pair_downsample_t",
    "pd_down",
    "pd_up",
]

# stride-2 diagonal averaging kernels for D1 and D2
DIAG_KERNELS = (
    np.array([[0.5, 0.0], [0.0, 0.5]]),
    np.array([[0.0, 0.5], [0.5, 0.0]]),
)


def _as_image(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[:, :, None]
    if y.ndim != 3:
        raise ShapeError(f"expected an H x W x C image, got shape {y.shape}")
    return y


def pad_to_multiple(y: np.ndarray, m: int) -> np.ndarray:
    """Reflect-pad bottom/right so both spatial dims are multiples of ``m``."""
    h, w = y.shape[:2]
    ph, pw = (-h) % m, (-w) % m
    if ph == 0 and pw == 0:
        return y
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (y.ndim - 2)
    return np.pad(y, pad, mode="reflect")


def pair_downsample(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return the two half-resolution diagonal views ``(D1(y), D2(y))``."""
    y = _as_image(y)
    h, w = y.shape[:2]
    if h < 2 or w < 2:
        raise ShapeError(f"pair_downsample needs H, W >= 2, got {h}x{w}")
    y = pad_to_multiple(y, 2)
    half = y.dtype.type(0.5)
    d1 = (y[0::2, 0::2] + y[1::2, 1::2]) * half
    d2 = (y[0::2, 1::2] + y[1::2, 0::2]) * half
    return d1, d2


def _reflect_pad_rows_backward(g: np.ndarray, axis: int, orig: int) -> np.ndarray:
    # padded row `orig` is a copy of row `orig - 2`
    g = np.moveaxis(g, axis, 0)
    out = g[:orig].copy()
    out[orig - 2] += g[orig]
    return np.moveaxis(out, 0, axis)


def pair_downsample_t(x: Tensor, swap: bool = False) -> Tensor:
    """Differentiable pair downsampler on an N x C x H x W tensor.

    The result stacks the views along the batch axis as ``[D1(x), D2(x)]``,
    or ``[D2(x), D1(x)]`` when ``swap`` is set.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"pair_downsample_t expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"pair_downsample needs H, W >= 2, got {h}x{w}")
    xd = x.data
    ph, pw = h % 2, w % 2
    if ph or pw:
        xd = np.pad(xd, [(0, 0), (0, 0), (0, ph), (0, pw)], mode="reflect")
    half = xd.dtype.type(0.5)
    d1 = (xd[:, :, 0::2, 0::2] + xd[:, :, 1::2, 1::2]) * half
    d2 = (xd[:, :, 0::2, 1::2] + xd[:, :, 1::2, 0::2]) * half
    out = np.concatenate([d2, d1] if swap else [d1, d2], axis=0)

    def backward(g):
        g1, g2 = g[:n], g[n:]
        if swap:
            g1, g2 = g2, g1
        gx = np.zeros(xd.shape, dtype=g.dtype)
        g1 = g1 * half
        g2 = g2 * half
        gx[:, :, 0::2, 0::2] = g1
        gx[:, :, 1::2, 1::2] = g1
        gx[:, :, 0::2, 1::2] = g2
        gx[:, :, 1::2, 0::2] = g2
        if ph:
            gx = _reflect_pad_rows_backward(gx, 2, h)
        if pw:
            gx = _reflect_pad_rows_backward(gx, 3, w)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


@dataclass(frozen=True)
class ShuffleLayout:
    """Everything needed to invert :func:`pd_down`.

    Sub-image ``i`` holds the pixels at row offset ``offsets[i][0]`` and
    column offset ``offsets[i][1]`` of every ``stride x stride`` cell.
    """

    stride: int
    height: int
    width: int
    padded_height: int
    padded_width: int

    @property
    def offsets(self) -> list[tuple[int, int]]:
        s = self.stride
        return [(dr, dc) for dr in range(s) for dc in range(s)]

    @property
    def sub_shape(self) -> tuple[int, int]:
        return self.padded_height // self.stride, self.padded_width // self.stride


def pd_down(y: np.ndarray, s: int) -> tuple[np.ndarray, ShuffleLayout]:
    """Pixel-shuffle downsample into a ``(s*s, H'/s, W'/s, C)`` stack."""
    y = _as_image(y)
    s = int(s)
    h, w, c = y.shape
    if s < 2:
        raise ValueError(f"shuffle stride must be >= 2, got {s}")
    if s > min(h, w):
        raise ValueError(f"shuffle stride {s} exceeds image size {h}x{w}")
    yp = pad_to_multiple(y, s)
    hp, wp = yp.shape[:2]
    stack = yp.reshape(hp // s, s, wp // s, s, c).transpose(1, 3, 0, 2, 4).reshape(s * s, hp // s, wp // s, c)
    return np.ascontiguousarray(stack), ShuffleLayout(s, h, w, hp, wp)


def pd_up(subs: np.ndarray, layout: ShuffleLayout) -> np.ndarray:
    """Reassemble a sub-image stack into the original ``H x W x C`` image."""
    subs = np.asarray(subs)
    s = layout.stride
    sh, sw = layout.sub_shape
    if subs.ndim != 4 or subs.shape[:3] != (s * s, sh, sw):
        raise ShapeError(
            f"sub-image stack of shape {subs.shape} does not match layout "
            f"(expected ({s * s}, {sh}, {sw}, C))"
        )
    c = subs.shape[3]
    full = subs.reshape(s, s, sh, sw, c).transpose(2, 0, 3, 1, 4).reshape(layout.padded_height, layout.padded_width, c)
    return np.ascontiguousarray(full[: layout.height, : layout.width])
