"""Raw NCHW numeric kernels: convolution, pooling, concat, flips, and their gradients.

All functions take and return plain ``np.ndarray`` in (batch, channel, height,
width) layout, dtype float32 or float64. Every kernel validates that its output
is finite; a NaN/Inf is a contract violation and raises :class:`NumericsError`.

Padding convention: "same" output size is ceil(size / stride); when the total
pad is odd the extra row/column goes to the bottom/right. Gradient functions
are pure (they recompute the unfolded view) so forward results never need to
be retained by callers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError

_FLOAT_DTYPES = (np.float32, np.float64)


@dataclass(frozen=True)
class ConvSpec:
    """Shape-level description of a convolution (kernel, stride, padding, width)."""

    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: str = "same"
    out_channels: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        if kh not in (1, 3) or kw not in (1, 3):
            raise ConfigError(f"conv kernels are restricted to 1x1 and 3x3, got {kh}x{kw}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ConfigError(f"stride entries must be >= 1, got {self.stride}")
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")


def require_nchw(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ConfigError(f"{name} must be a rank-4 NCHW array, got "
                          f"{getattr(x, 'shape', type(x))}")
    if x.dtype.type not in _FLOAT_DTYPES:
        raise ConfigError(f"{name} dtype must be float32 or float64, got {x.dtype}")
    return x


def ensure_finite(x: np.ndarray, op: str) -> np.ndarray:
    """Raise NumericsError if *x* contains NaN or Inf.

    Uses min/max reductions (NaN poisons both, infinities surface in one of
    them) to avoid allocating a full boolean mask on every kernel call.
    """
    if x.size and not (math.isfinite(x.min()) and math.isfinite(x.max())):
        raise NumericsError(f"non-finite values in output of {op}")
    return x


def _pad_amount(size: int, k: int, s: int, padding: str, op: str) -> tuple[int, int, int]:
    """Return (pad_before, pad_after, out_size) for one spatial axis."""
    if padding == "same":
        out = -(-size // s)  # ceil division
        total = max((out - 1) * s + k - size, 0)
        return total // 2, total - total // 2, out
    out = (size - k) // s + 1
    if out < 1:
        raise ConfigError(f"{op}: output size < 1 for input {size}, kernel {k}, "
                          f"stride {s}, valid padding")
    return 0, 0, out


def _pad2d(x: np.ndarray, pads: tuple[int, int, int, int], value: float = 0.0) -> np.ndarray:
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=value)


def _tap(xp: np.ndarray, u: int, v: int, oh: int, ow: int,
         stride: tuple[int, int]) -> np.ndarray:
    """View of the padded input seen by kernel tap (u, v): (n, c, oh, ow)."""
    sh, sw = stride
    return xp[:, :, u:u + sh * oh:sh, v:v + sw * ow:sw]


def _conv_geometry(x, w, spec, op):
    n, ci, h, wd = x.shape
    co, wci, kh, kw = w.shape
    if (kh, kw) != tuple(spec.kernel) or co != spec.out_channels:
        raise ConfigError(f"{op}: weight shape {w.shape} inconsistent with spec "
                          f"kernel={spec.kernel} out_channels={spec.out_channels}")
    if wci != ci:
        raise ConfigError(f"{op}: input has {ci} channels (shape {x.shape}) but weight "
                          f"expects {wci} (shape {w.shape})")
    pt, pb, oh = _pad_amount(h, kh, spec.stride[0], spec.padding, op)
    pl, pr, ow = _pad_amount(wd, kw, spec.stride[1], spec.padding, op)
    return (pt, pb, pl, pr), (oh, ow)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Cross-correlate *x* (n,ci,h,w) with kernels *w* (co,ci,kh,kw) plus bias.

    Machine-learning convention: no kernel flip. Same padding with stride 1
    preserves spatial dims. Computed as one small GEMM per kernel tap, which
    beats an explicit im2col gather at these channel counts; the tap loop
    fixes the summation order.
    """
    require_nchw(x, "conv2d input")
    pads, (oh, ow) = _conv_geometry(x, w, spec, "conv2d")
    n, ci = x.shape[:2]
    co, _, kh, kw = w.shape
    xp = _pad2d(x, pads)
    acc = np.zeros((co, n, oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            acc += np.tensordot(w[:, :, u, v], _tap(xp, u, v, oh, ow, spec.stride),
                                axes=([1], [1]))
    y = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    if b is not None:
        if b.shape != (co,):
            raise ConfigError(f"conv2d: bias shape {b.shape} != ({co},)")
        y += b[:, None, None]
    return ensure_finite(y, "conv2d")


def conv2d_grad(x: np.ndarray, w: np.ndarray, spec: ConvSpec,
                grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoints of :func:`conv2d`: (grad wrt x, grad wrt w, grad wrt bias)."""
    require_nchw(x, "conv2d_grad input")
    pads, (oh, ow) = _conv_geometry(x, w, spec, "conv2d_grad")
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    if grad_out.shape != (n, co, oh, ow):
        raise ConfigError(f"conv2d_grad: grad_out shape {grad_out.shape} != expected "
                          f"{(n, co, oh, ow)}")
    pt, pb, pl, pr = pads

    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.empty_like(w)
    xp = _pad2d(x, pads)
    # grad wrt x accumulates channels-first to avoid a transpose per tap
    gxp = np.zeros((ci, n) + xp.shape[2:], dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = _tap(xp, u, v, oh, ow, spec.stride)
            grad_w[:, :, u, v] = np.tensordot(grad_out, xs, axes=([0, 2, 3], [0, 2, 3]))
            _tap(gxp, u, v, oh, ow, spec.stride)[...] += np.tensordot(
                w[:, :, u, v], grad_out, axes=([0], [1]))
    grad_x = np.ascontiguousarray(
        gxp[:, :, pt:pt + h, pl:pl + wd].transpose(1, 0, 2, 3))

    for g, nm in ((grad_x, "conv2d_grad/x"), (grad_w, "conv2d_grad/w"), (grad_b, "conv2d_grad/b")):
        ensure_finite(g, nm)
    return grad_x, grad_w, grad_b


def _check_pool_args(window, stride, op):
    if tuple(window) != (3, 3):
        raise ConfigError(f"{op}: window must be 3x3, got {window}")
    if tuple(stride) not in ((1, 1), (2, 2)):
        raise ConfigError(f"{op}: stride must be 1x1 or 2x2, got {stride}")


def _avg_counts(h, w, pads, oh, ow, stride, dtype):
    """Per-window count of in-bounds elements (padding excluded)."""
    pt, _, pl, _ = pads
    sh, sw = stride
    rows = np.arange(oh) * sh - pt
    cols = np.arange(ow) * sw - pl
    rcnt = np.minimum(rows + 3, h) - np.maximum(rows, 0)
    ccnt = np.minimum(cols + 3, w) - np.maximum(cols, 0)
    return (rcnt[:, None] * ccnt[None, :]).astype(dtype)


def pool2d(x: np.ndarray, mode: str, window: tuple[int, int] = (3, 3),
           stride: tuple[int, int] = (1, 1), padding: str = "same") -> np.ndarray:
    """3x3 max or average pooling.

    Average pooling divides by the count of in-bounds elements only, so a
    constant input stays constant even at the borders. Max pooling pads with
    -inf; padded positions can never win.
    """
    require_nchw(x, "pool2d input")
    _check_pool_args(window, stride, "pool2d")
    if mode not in ("max", "avg"):
        raise ConfigError(f"pool2d: mode must be 'max' or 'avg', got {mode!r}")
    n, c, h, w = x.shape
    pt, pb, oh = _pad_amount(h, 3, stride[0], padding, "pool2d")
    pl, pr, ow = _pad_amount(w, 3, stride[1], padding, "pool2d")
    pads = (pt, pb, pl, pr)
    if mode == "max":
        xp = _pad2d(x, pads, value=-np.inf)
        y = None
        for u in range(3):
            for v in range(3):
                s = _tap(xp, u, v, oh, ow, stride)
                y = s.copy() if y is None else np.maximum(y, s, out=y)
    else:
        xp = _pad2d(x, pads, value=0.0)
        y = np.zeros((n, c, oh, ow), dtype=x.dtype)
        for u in range(3):
            for v in range(3):
                y += _tap(xp, u, v, oh, ow, stride)
        y /= _avg_counts(h, w, pads, oh, ow, stride, x.dtype)
    return ensure_finite(y, "pool2d")


def pool2d_grad(x: np.ndarray, mode: str, grad_out: np.ndarray,
                window: tuple[int, int] = (3, 3), stride: tuple[int, int] = (1, 1),
                padding: str = "same") -> np.ndarray:
    """Gradient of :func:`pool2d` wrt its input.

    Max mode routes each window gradient to the first (row-major) maximum;
    avg mode spreads grad/count over the in-bounds window positions.
    """
    require_nchw(x, "pool2d_grad input")
    _check_pool_args(window, stride, "pool2d_grad")
    n, c, h, w = x.shape
    sh, sw = stride
    pt, pb, oh = _pad_amount(h, 3, sh, padding, "pool2d_grad")
    pl, pr, ow = _pad_amount(w, 3, sw, padding, "pool2d_grad")
    pads = (pt, pb, pl, pr)
    if grad_out.shape != (n, c, oh, ow):
        raise ConfigError(f"pool2d_grad: grad_out shape {grad_out.shape} != expected "
                          f"{(n, c, oh, ow)}")
    gxp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=x.dtype)
    if mode == "max":
        xp = _pad2d(x, pads, value=-np.inf)
        vmax = pool2d(x, "max", window, stride, padding)
        claimed = np.zeros((n, c, oh, ow), dtype=bool)
        for u in range(3):
            for v in range(3):
                # first (row-major) window position equal to the max wins
                sel = (_tap(xp, u, v, oh, ow, stride) == vmax) & ~claimed
                _tap(gxp, u, v, oh, ow, stride)[...] += grad_out * sel
                claimed |= sel
    elif mode == "avg":
        per = grad_out / _avg_counts(h, w, pads, oh, ow, stride, x.dtype)
        for u in range(3):
            for v in range(3):
                _tap(gxp, u, v, oh, ow, stride)[...] += per
    else:
        raise ConfigError(f"pool2d_grad: mode must be 'max' or 'avg', got {mode!r}")
    # slicing off the pad region discards contributions to out-of-bounds positions
    grad_x = gxp[:, :, pt:pt + h, pl:pl + w]
    return ensure_finite(np.ascontiguousarray(grad_x), "pool2d_grad")


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Spatial mean per (batch, channel): (n,c,h,w) -> (n,c,1,1)."""
    require_nchw(x, "global_avg_pool input")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ConfigError(f"global_avg_pool: empty spatial dims in {x.shape}")
    return ensure_finite(x.mean(axis=(2, 3), keepdims=True), "global_avg_pool")


def global_avg_pool_grad(x_shape: tuple[int, int, int, int], grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x_shape
    if grad_out.shape != (n, c, 1, 1):
        raise ConfigError(f"global_avg_pool_grad: grad_out shape {grad_out.shape} != "
                          f"{(n, c, 1, 1)}")
    g = np.broadcast_to(grad_out / (h * w), x_shape)
    return ensure_finite(np.ascontiguousarray(g), "global_avg_pool_grad")


def concat_channels(parts: list[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis, order preserved."""
    if not parts:
        raise ConfigError("concat_channels: need at least one part")
    for p in parts:
        require_nchw(p, "concat_channels part")
    base = parts[0]
    for p in parts[1:]:
        if p.shape[0] != base.shape[0] or p.shape[2:] != base.shape[2:]:
            raise ConfigError(f"concat_channels: incompatible part shapes {base.shape} "
                              f"vs {p.shape}")
    return ensure_finite(np.concatenate(parts, axis=1), "concat_channels")


def split_channels(grad_out: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Gradient of concat_channels: partition grad_out back into the parts."""
    require_nchw(grad_out, "split_channels input")
    if sum(sizes) != grad_out.shape[1]:
        raise ConfigError(f"split_channels: sizes {sizes} do not sum to channel count "
                          f"{grad_out.shape[1]}")
    out, start = [], 0
    for s in sizes:
        out.append(np.ascontiguousarray(grad_out[:, start:start + s]))
        start += s
    return out


def flip_horizontal(x: np.ndarray) -> np.ndarray:
    """Reverse the width axis only."""
    require_nchw(x, "flip_horizontal input")
    return np.ascontiguousarray(x[:, :, :, ::-1])
