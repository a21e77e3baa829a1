"""Reference tensor operations on dense [N, C, H, W] arrays.

Everything here is a direct loop over kernel taps, vectorized only across the
batch, output-channel and spatial axes, so every output element is accumulated
in the same order on every run.  These kernels are the oracle the fused
inference path is checked against; there are no im2col or FFT shortcuts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

Pair = Tuple[int, int]

PRECISIONS = {"single": np.float32, "double": np.float64}


class ShapeError(ValueError):
    """Raised when tensor or parameter shapes disagree.

    ``axis`` names the offending axis (``"N"``, ``"C"``, ``"H"``, ``"W"``, or a
    parameter name) so callers can report something better than a traceback.
    """

    def __init__(self, message: str, axis: Optional[str] = None):
        super().__init__(message)
        self.axis = axis


def dtype_for(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise ValueError(
            f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}"
        ) from None


def _pair(value) -> Pair:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    a, b = value
    return int(a), int(b)


def check_tensor(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D [N, C, H, W] array, got {np.shape(x)}")
    return x


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        n = len(self.gamma)
        for name in ("beta", "mu", "var"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"BN {name} has length {len(getattr(self, name))}, expected {n}", axis=name)
        if np.any(np.asarray(self.var) < 0):
            raise ValueError("BN variance must be non-negative")
        if np.any(np.sqrt(np.asarray(self.var) + self.epsilon) <= 0):
            raise ValueError("sqrt(var + epsilon) must be positive")

    @property
    def channels(self) -> int:
        return len(self.gamma)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.var + self.epsilon)

    @classmethod
    def identity(cls, channels: int, dtype=np.float64, epsilon: float = 0.0) -> "BNParams":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            mu=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
        )

    def astype(self, dtype) -> "BNParams":
        return BNParams(
            self.gamma.astype(dtype),
            self.beta.astype(dtype),
            self.mu.astype(dtype),
            self.var.astype(dtype),
            self.epsilon,
        )


@dataclass
class ConvSpec:
    """Convolution hyperparameters together with weight [Cout, Cin, kh, kw] and optional bias."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    dilation: Pair = (1, 1)
    pad_value: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        self.dilation = _pair(self.dilation)
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got shape {self.weight.shape}", axis="weight")
        if min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise ValueError(
                f"invalid conv geometry stride={self.stride} padding={self.padding} dilation={self.dilation}"
            )
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_channels={self.out_channels}", axis="bias"
            )
        if self.pad_value is not None and np.shape(self.pad_value) != (self.in_channels,):
            raise ShapeError(
                f"pad_value shape {np.shape(self.pad_value)} does not match in_channels={self.in_channels}",
                axis="pad_value",
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> Pair:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def extent(self) -> Pair:
        """Receptive field of the (possibly dilated) kernel."""
        (kh, kw), (dh, dw) = self.kernel, self.dilation
        return 1 + (kh - 1) * dh, 1 + (kw - 1) * dw

    @property
    def num_params(self) -> int:
        return int(self.weight.size + (0 if self.bias is None else self.bias.size))

    def output_hw(self, h: int, w: int) -> Pair:
        return _out_size(h, self.extent[0], self.stride[0], self.padding[0]), _out_size(
            w, self.extent[1], self.stride[1], self.padding[1]
        )


def _out_size(n: int, extent: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - extent) // stride + 1


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    return out


def pad_constant(x: np.ndarray, padding: Pair, pad_value: Optional[np.ndarray] = None) -> np.ndarray:
    """Pad H and W of ``x``; the border is filled per channel with ``pad_value`` (zeros by default)."""
    ph, pw = padding
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    if pad_value is not None:
        out[...] = np.asarray(pad_value, dtype=x.dtype)[None, :, None, None]
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Direct cross-correlation of ``x`` with ``spec``.

    Each output element accumulates its taps with input channel innermost,
    then kernel row, then kernel column outermost; the bias is added last.
    """
    check_tensor(x)
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, conv expects {spec.in_channels}", axis="C")
    (kh, kw), (sh, sw), (dh, dw) = spec.kernel, spec.stride, spec.dilation
    ho, wo = spec.output_hw(h, w)
    if ho < 1:
        raise ShapeError(
            f"kernel extent {spec.extent[0]} exceeds padded height {h + 2 * spec.padding[0]}", axis="H"
        )
    if wo < 1:
        raise ShapeError(
            f"kernel extent {spec.extent[1]} exceeds padded width {w + 2 * spec.padding[1]}", axis="W"
        )

    dtype = np.result_type(x.dtype, spec.weight.dtype)
    xp = pad_constant(x.astype(dtype, copy=False), spec.padding, spec.pad_value)
    wt = spec.weight.astype(dtype, copy=False)
    out = np.zeros((n, spec.out_channels, ho, wo), dtype=dtype)
    h_span = sh * (ho - 1) + 1
    w_span = sw * (wo - 1) + 1
    for v in range(kw):
        c0 = v * dw
        for u in range(kh):
            r0 = u * dh
            window = xp[:, :, r0 : r0 + h_span : sh, c0 : c0 + w_span : sw]
            for ci in range(c):
                out += wt[None, :, ci, u, v, None, None] * window[:, ci : ci + 1]
    if spec.bias is not None:
        out += spec.bias.astype(dtype, copy=False)[None, :, None, None]
    return _finite(out, "conv2d")


def batchnorm_forward(x: np.ndarray, bn: BNParams) -> np.ndarray:
    check_tensor(x)
    if x.shape[1] != bn.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, BN has {bn.channels}", axis="C")
    dt = x.dtype
    gamma, beta, mu = (np.asarray(a, dtype=dt)[None, :, None, None] for a in (bn.gamma, bn.beta, bn.mu))
    sigma = np.sqrt(np.asarray(bn.var, dtype=dt) + dt.type(bn.epsilon))[None, :, None, None]
    return _finite(gamma * (x - mu) / sigma + beta, "batchnorm_forward")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def avgpool2d(
    x: np.ndarray,
    k: Pair,
    stride: Pair = (1, 1),
    padding: Pair = (0, 0),
    pad_value: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Average pooling where padded cells are filled (zeros by default) and always counted.

    Accumulates ``x * (1 / (kh * kw))`` in the same tap order as :func:`conv2d`,
    which makes it bit-identical to a convolution with the averaging kernel.
    """
    check_tensor(x)
    (kh, kw), (sh, sw), (ph, pw) = _pair(k), _pair(stride), _pair(padding)
    if min(kh, kw, sh, sw) < 1 or min(ph, pw) < 0:
        raise ValueError(f"invalid pooling geometry k={(kh, kw)} stride={(sh, sw)} padding={(ph, pw)}")
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pooling window {(kh, kw)} does not fit padded input {(h + 2 * ph, w + 2 * pw)}", axis="H" if ho < 1 else "W")
    xp = pad_constant(x, (ph, pw), pad_value)
    scale = x.dtype.type(1.0) / x.dtype.type(kh * kw)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for v in range(kw):
        for u in range(kh):
            out += scale * xp[:, :, u : u + sh * (ho - 1) + 1 : sh, v : v + sw * (wo - 1) + 1 : sw]
    return out


def add(inputs: Sequence[np.ndarray]) -> np.ndarray:
    if not inputs:
        raise ValueError("add() needs at least one tensor")
    out = np.array(inputs[0], copy=True)
    for i, t in enumerate(inputs[1:], start=1):
        if t.shape != out.shape:
            axis = next((ax for ax, a, b in zip("NCHW", out.shape, t.shape) if a != b), None)
            raise ShapeError(f"tensor {i} has shape {t.shape}, expected {out.shape}", axis=axis)
        out += t
    return out


def max_rel_error(reference: np.ndarray, other: np.ndarray) -> float:
    """max|reference - other| / max|reference| (absolute error when the reference is all zero)."""
    reference = np.asarray(reference, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    err = float(np.max(np.abs(reference - other))) if reference.size else 0.0
    scale = float(np.max(np.abs(reference))) if reference.size else 0.0
    return err / scale if scale > 0 else err
