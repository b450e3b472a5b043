"""Minimal dense tensors with reverse-mode differentiation.

Only the handful of operations the denoising network needs are provided:
2-D convolution, ReLU, elementwise add/subtract/scale, mean-squared error and
an Adam update.  Every op records a backward closure on its output; calling
``backward()`` on a scalar replays those closures in reverse topological
order (a tape rebuilt per forward pass).

Tensors are logically ``N x C x H x W``.  Convolution outputs are stored
channels-last in memory (the ``data`` attribute is a transposed view), which
lets every 3x3 convolution run as nine in-place accumulating GEMM calls over
contiguous row blocks of a zero-padded buffer.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.linalg.blas import get_blas_funcs

__all__ = [
    "AdamState",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "conv2d",
    "conv_stack",
    "grad_enabled",
    "mse",
    "no_grad",
    "relu",
    "scale",
    "sub",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when a NaN or Inf shows up where finite values are required."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An array plus an optional gradient buffer and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: BackwardFn | None = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1 or self.data.ndim != 0:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("tensor does not depend on any parameter requiring grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return Tensor._from_op(a.data * f, (a,), lambda g: (g * f,))


def relu(x: Tensor) -> Tensor:
    data = x.data
    out = np.maximum(data, 0)

    def backward(g):
        return (g * (data > 0),)

    return Tensor._from_op(out, (x,), backward)


def mse(a: Tensor, b: Tensor, acc_dtype=None) -> Tensor:
    """Mean of squared differences, returned as a 0-d tensor.

    ``acc_dtype=np.float64`` accumulates the reduction in double precision.
    """
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    value = np.mean(np.square(diff), dtype=acc_dtype)
    out = np.asarray(value, dtype=a.dtype)

    def backward(g):
        ga = diff * (a.dtype.type(2.0 / n) * g.astype(a.dtype))
        return ga, -ga

    return Tensor._from_op(out, (a, b), backward)


# ---------------------------------------------------------------------------
# convolution


def _resolve_padding(padding, k: int) -> int:
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel size, got {k}")
        return (k - 1) // 2
    p = int(padding)
    if p < 0:
        raise ShapeError(f"padding must be non-negative, got {p}")
    return p


def _gemm(dtype):
    return get_blas_funcs("gemm", dtype=dtype)


def _gemm_acc(gemm, a, b, c, trans_a: int = 0, beta: float = 1.0) -> None:
    # c = op(a) @ b + beta * c, in place; all operands Fortran-contiguous
    r = gemm(1.0, a, b, beta=beta, c=c, trans_a=trans_a, overwrite_c=1)
    if r.ctypes.data != c.ctypes.data:
        c[...] = r


def _to_nhwc(t: Tensor) -> np.ndarray:
    return t.data.transpose(0, 2, 3, 1)


def _from_nhwc(arr: np.ndarray) -> np.ndarray:
    return arr.transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlate ``x`` (N,Cin,H,W) with ``weight`` (Cout,Cin,k,k).

    ``padding`` is a non-negative int (zero padding on every side) or
    ``"same"`` for odd kernels.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be N x C x H x W, got shape {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be Cout x Cin x k x k, got shape {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, _ = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin} (weight shape {weight.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    stride = int(stride)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    p = _resolve_padding(padding, k)
    if h + 2 * p < k or w + 2 * p < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")
    if x.dtype != weight.dtype:
        raise ShapeError(f"conv2d: dtype mismatch {x.dtype} vs {weight.dtype}")

    # wk[dh*k + dw] is the (Cin, Cout) matrix for kernel tap (dh, dw)
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0).reshape(k * k, cin, cout))
    if stride == 1 and k > 1 and cin * k * k <= _IM2COL_MAX_COLS:
        out, backward = _conv_shifted(x, wk, bias, k, p, im2col=True)
    elif stride == 1:
        out, backward = _conv_shifted(x, wk, bias, k, p)
    else:
        out, backward = _conv_strided(x, wk, bias, k, p, stride)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def full_backward(g):
        gx, gw, gb = backward(g)
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return Tensor._from_op(out, parents, full_backward)


# below this many im2col columns one wide GEMM beats k*k skinny ones
_IM2COL_MAX_COLS = 128


def _wk_to_weight(gwk: np.ndarray, k: int) -> np.ndarray:
    _, cin, cout = gwk.shape
    return gwk.reshape(k, k, cin, cout).transpose(3, 2, 0, 1)


def _conv_shifted(x: Tensor, wk: np.ndarray, bias: Tensor | None, k: int, p: int, im2col: bool = False):
    """Stride-1 convolution on a flattened padded grid.

    For output pixel q = ho*Wp + wo of the padded-width grid, tap (dh, dw)
    reads flat index q + dh*Wp + dw, so each tap is one contiguous row block
    and the whole convolution is k*k accumulating GEMMs.  Positions with
    wo >= Wo are junk and get discarded.  With few input channels the row
    blocks are gathered side by side first (im2col) and multiplied once.
    """
    n, cin, h, w = x.shape
    cout = wk.shape[2]
    dtype = x.dtype
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = hp - k + 1, wp - k + 1
    plane = hp * wp
    xin = _to_nhwc(x)
    if p == 0 and xin.flags.c_contiguous:
        xp = xin
    else:
        xp = np.zeros((n, hp, wp, cin), dtype=dtype)
        xp[:, p:p + h, p:p + w] = xin
    flat = xp.reshape(n * plane, cin)
    span = (n - 1) * plane + (ho - 1) * wp + wo
    offsets = [dh * wp + dw for dh in range(k) for dw in range(k)]
    gemm = _gemm(dtype)

    y = np.empty((n * plane, cout), dtype=dtype)
    y[span:] = 0
    cols = None
    if im2col:
        cols = np.empty((span, k * k * cin), dtype=dtype)
        for tap, off in enumerate(offsets):
            cols[:, tap * cin:(tap + 1) * cin] = flat[off:off + span]
        np.matmul(cols, wk.reshape(k * k * cin, cout), out=y[:span])
        if bias is not None:
            y[:span] += bias.data
    else:
        if bias is None:
            y[:span] = 0
        else:
            y[:span] = bias.data
        yt = y[:span].T
        for tap, off in enumerate(offsets):
            _gemm_acc(gemm, wk[tap].T, flat[off:off + span].T, yt)
    out = _from_nhwc(y.reshape(n, hp, wp, cout)[:, :ho, :wo])

    def backward(g):
        gp = np.zeros((n * plane, cout), dtype=dtype)
        gp.reshape(n, hp, wp, cout)[:, :ho, :wo] = g.transpose(0, 2, 3, 1)
        gpt = gp[:span].T
        if cols is not None:
            gwk = (cols.T @ gp[:span]).reshape(wk.shape)
        else:
            gwk = np.empty_like(wk)
            for tap, off in enumerate(offsets):
                gwk[tap] = gemm(1.0, flat[off:off + span].T, gpt, trans_b=1)
        gw = _wk_to_weight(gwk, k)
        gb = None
        if bias is not None:
            gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxp = np.zeros((n * plane, cin), dtype=dtype)
            for tap, off in enumerate(offsets):
                _gemm_acc(gemm, wk[tap].T, gpt, gxp[off:off + span].T, trans_a=1)
            gx = _from_nhwc(gxp.reshape(n, hp, wp, cin)[:, p:p + h, p:p + w])
        return gx, gw, gb

    return out, backward


def _conv_strided(x: Tensor, wk: np.ndarray, bias: Tensor | None, k: int, p: int, s: int):
    n, cin, h, w = x.shape
    cout = wk.shape[2]
    dtype = x.dtype
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    xp = np.zeros((n, hp, wp, cin), dtype=dtype)
    xp[:, p:p + h, p:p + w] = _to_nhwc(x)

    def window(arr, dh, dw):
        return arr[:, dh:dh + s * (ho - 1) + 1:s, dw:dw + s * (wo - 1) + 1:s]

    y = np.zeros((n, ho, wo, cout), dtype=dtype)
    if bias is not None:
        y += bias.data
    for dh in range(k):
        for dw in range(k):
            y += window(xp, dh, dw) @ wk[dh * k + dw]
    out = _from_nhwc(y)

    def backward(g):
        gn = g.transpose(0, 2, 3, 1)
        gwk = np.empty_like(wk)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for dh in range(k):
            for dw in range(k):
                tap = dh * k + dw
                gwk[tap] = np.tensordot(window(xp, dh, dw), gn, axes=([0, 1, 2], [0, 1, 2]))
                if gxp is not None:
                    window(gxp, dh, dw)[...] += gn @ wk[tap].T
        gx = None if gxp is None else _from_nhwc(gxp[:, p:p + h, p:p + w])
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return gx, _wk_to_weight(gwk, k), gb

    return out, backward


def conv_stack(x: Tensor, layers: Sequence[tuple[Tensor, Tensor | None, bool]]) -> Tensor:
    """Fused chain of stride-1 ``"same"`` convolutions, each optionally followed by ReLU.

    ``layers`` holds ``(weight, bias, relu)`` triples with odd kernels.
    Equivalent to nesting :func:`conv2d` and :func:`relu`, but every
    activation lives on one shared zero-padded grid, so a layer's GEMMs
    write straight into the next layer's padded input and ReLU runs in place.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv_stack: input must be N x C x H x W, got shape {x.shape}")
    if not layers:
        raise ShapeError("conv_stack: needs at least one layer")
    n, c, h, w = x.shape
    dtype = x.dtype
    kernels = []
    for i, (weight, bias, _) in enumerate(layers):
        cout, cin, k, k2 = weight.shape
        if k != k2 or k % 2 == 0:
            raise ShapeError(f"conv_stack: layer {i} needs an odd square kernel, got {weight.shape}")
        if cin != c:
            raise ShapeError(f"conv_stack: layer {i} expects {cin} channels, gets {c}")
        if bias is not None and bias.shape != (cout,):
            raise ShapeError(f"conv_stack: layer {i} bias shape {bias.shape} does not match {cout} outputs")
        if weight.dtype != dtype:
            raise ShapeError(f"conv_stack: dtype mismatch {dtype} vs {weight.dtype} in layer {i}")
        kernels.append(k)
        c = cout
    P = max(kernels) // 2
    hp, wp = h + 2 * P, w + 2 * P
    plane = hp * wp
    # grid rows r0..r1 cover every interior pixel; pad rows inside that range are junk until zeroed
    r0 = P * wp + P
    r1 = (n - 1) * plane + (P + h - 1) * wp + P + w
    gemm = _gemm(dtype)

    def grid(channels):
        return np.empty((n * plane, channels), dtype=dtype)

    def zero_pads(buf):
        b4 = buf.reshape(n, hp, wp, -1)
        b4[:, :P] = 0
        b4[:, P + h:] = 0
        b4[:, :, :P] = 0
        b4[:, :, P + w:] = 0

    def taps(k):
        p = k // 2
        return [(dh - p) * wp + (dw - p) for dh in range(k) for dw in range(k)]

    a = grid(x.shape[1])
    zero_pads(a)
    a.reshape(n, hp, wp, -1)[:, P:P + h, P:P + w] = _to_nhwc(x)
    acts = [a]
    wks = []
    cols_cache = []
    for (weight, bias, use_relu), k in zip(layers, kernels):
        cout, cin = weight.shape[:2]
        wk = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0).reshape(k * k, cin, cout))
        wks.append(wk)
        src = acts[-1]
        out = grid(cout)
        dst = out[r0:r1]
        cols = None
        if k > 1 and cin * k * k <= _IM2COL_MAX_COLS:
            cols = np.empty((r1 - r0, k * k * cin), dtype=dtype)
            for t, d in enumerate(taps(k)):
                cols[:, t * cin:(t + 1) * cin] = src[r0 + d:r1 + d]
            np.matmul(cols, wk.reshape(k * k * cin, cout), out=dst)
            if bias is not None:
                dst += bias.data
        else:
            dst[...] = 0 if bias is None else bias.data
            dt = dst.T
            for t, d in enumerate(taps(k)):
                _gemm_acc(gemm, wk[t].T, src[r0 + d:r1 + d].T, dt)
        cols_cache.append(cols)
        zero_pads(out)
        if use_relu:
            np.maximum(out, 0, out=out)
        acts.append(out)

    result = _from_nhwc(acts[-1].reshape(n, hp, wp, -1)[:, P:P + h, P:P + w])
    parents: list[Tensor] = [x]
    for weight, bias, _ in layers:
        parents.append(weight)
        if bias is not None:
            parents.append(bias)

    def backward(g):
        grads_out: list[np.ndarray | None] = []
        gb_grid = grid(g.shape[1])
        zero_pads(gb_grid)
        gb_grid.reshape(n, hp, wp, -1)[:, P:P + h, P:P + w] = g.transpose(0, 2, 3, 1)
        for i in range(len(layers) - 1, -1, -1):
            weight, bias, _ = layers[i]
            k, wk, src, cols = kernels[i], wks[i], acts[i], cols_cache[i]
            gy = gb_grid[r0:r1]
            offsets = taps(k)
            if cols is not None:
                gwk = (cols.T @ gy).reshape(wk.shape)
            else:
                gwk = np.empty_like(wk)
                for t, d in enumerate(offsets):
                    np.matmul(src[r0 + d:r1 + d].T, gy, out=gwk[t])
            layer_grads = [_wk_to_weight(gwk, k)]
            if bias is not None:
                layer_grads.append(np.ones(len(gy), dtype=dtype) @ gy)
            grads_out = layer_grads + grads_out
            if i == 0 and not x.requires_grad:
                grads_out.insert(0, None)
                break
            # the centre tap covers rows r0..r1 exactly and overwrites them; other taps spill past both ends
            gsrc = np.empty_like(src)
            gsrc[:r0] = 0
            gsrc[r1:] = 0
            gyt = gy.T
            centre = len(offsets) // 2
            _gemm_acc(gemm, wk[centre].T, gyt, gsrc[r0:r1].T, trans_a=1, beta=0.0)
            for t, d in enumerate(offsets):
                if t != centre:
                    _gemm_acc(gemm, wk[t].T, gyt, gsrc[r0 + d:r1 + d].T, trans_a=1)
            if i == 0:
                grads_out.insert(0, _from_nhwc(gsrc.reshape(n, hp, wp, -1)[:, P:P + h, P:P + w]))
                break
            if layers[i - 1][2]:
                # pads of a post-ReLU activation are zero, so the mask also clears pad gradients
                np.multiply(gsrc, src > 0, out=gsrc)
            else:
                zero_pads(gsrc)
            gb_grid = gsrc
        return tuple(grads_out)

    return Tensor._from_op(result, tuple(parents), backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Moment buffers and step counter for :func:`adam_step`."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    names: list[str] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], names: Sequence[str] = (), **kw) -> AdamState:
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            names=list(names),
            **kw,
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers"
        )
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        label = state.names[i] if i < len(state.names) else f"#{i}"
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: parameter {label} shape {p.shape}, grad {g.shape}, state {m.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteError(
                f"adam_step: gradient of parameter {label} has {bad} non-finite entries at step {state.t + 1}"
            )

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2) + state.eps
        p -= (lr / bc1) * m / denom
