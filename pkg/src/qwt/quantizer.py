"""Uniform affine quantization: observers, quantize/dequantize, fake-quant.

The integer grid is ``[0, 2**bits - 1]``. Rounding is half away from zero.
Weights may be quantized per output channel (axis 0); activations are always
per tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DomainError, ShapeError

SUPPORTED_BITS = (2, 3, 4, 6, 8)
# A bit-width of 32 means "leave this tensor in floating point".
DISABLED_BITS = 32
DEFAULT_PERCENTILE = 0.999


def round_half_away(v: np.ndarray) -> np.ndarray:
    a = np.abs(v)
    f = np.floor(a)
    r = f + (a - f >= 0.5)
    return np.copysign(r, v)


def round_half_away_t(v: torch.Tensor) -> torch.Tensor:
    a = v.abs()
    f = a.floor()
    r = f + (a - f >= 0.5).to(v.dtype)
    return torch.copysign(r, v)


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero-point and bit-width for one tensor or its channel slices.

    ``scale`` and ``zero_point`` are 0-d for per-tensor params and 1-d for
    per-channel params along ``axis``.
    """

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    axis: int | None = None

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64)
        zp = np.asarray(self.zero_point, dtype=np.int64)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if scale.shape != zp.shape:
            raise ShapeError("scale and zero_point shapes differ")
        if scale.ndim > 1 or (scale.ndim == 1) != (self.axis is not None):
            raise ShapeError("per-channel params need a 1-d scale and an axis")
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise DomainError("scale must be finite and positive")
        if np.any(zp < 0) or np.any(zp > self.qmax):
            raise DomainError(f"zero_point outside [0, {self.qmax}]")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1

    @property
    def channels(self) -> int:
        return int(self.scale.size)

    def _bcast(self, ndim: int):
        if self.axis is None:
            return self.scale, self.zero_point
        shape = [1] * ndim
        shape[self.axis] = -1
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def equals(self, other: "QuantParams") -> bool:
        return (
            self.bits == other.bits
            and self.axis == other.axis
            and np.array_equal(self.scale, other.scale)
            and np.array_equal(self.zero_point, other.zero_point)
        )


def _params_from_range(lo: np.ndarray, hi: np.ndarray, bits: int, axis) -> QuantParams:
    qmax = (1 << bits) - 1
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(over="ignore"):
        span = (hi - lo) / qmax
    if not np.all(np.isfinite(span)):
        raise DomainError("value range overflows float64")
    # a range too narrow for a normal float64 scale counts as constant
    degenerate = span < np.finfo(np.float64).tiny
    scale = np.where(degenerate, 1.0, span)
    zp = np.clip(round_half_away(-lo / scale), 0, qmax).astype(np.int64)
    return QuantParams(scale, zp, bits, axis)


def _check_bits(bits: int):
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")


def _reduce_axes(x: np.ndarray, axis):
    if axis is None:
        return None
    if x.ndim < 1:
        raise ShapeError("per-channel fit needs at least a 1-d tensor")
    return tuple(d for d in range(x.ndim) if d != axis)


def _as_finite(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("cannot fit quantization params on an empty tensor")
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot fit quantization params on non-finite values")
    return x


def fit_minmax(x, bits: int, axis: int | None = None) -> QuantParams:
    _check_bits(bits)
    x = _as_finite(x)
    red = _reduce_axes(x, axis)
    return _params_from_range(np.min(x, axis=red), np.max(x, axis=red), bits, axis)


def fit_percentile(x, bits: int, q: float = DEFAULT_PERCENTILE, axis: int | None = None) -> QuantParams:
    """Clip the range to the ``(1-q, q)`` quantiles before applying MinMax rules.

    Quantiles interpolate linearly between adjacent order statistics, so
    ``q == 1`` gives exactly the MinMax params.
    """
    _check_bits(bits)
    if not 0.5 < q <= 1.0:
        raise ConfigError(f"percentile q must lie in (0.5, 1], got {q}")
    x = _as_finite(x)
    red = _reduce_axes(x, axis)
    if q == 1.0:
        return _params_from_range(np.min(x, axis=red), np.max(x, axis=red), bits, axis)
    lo, hi = np.quantile(x, [1.0 - q, q], axis=red, method="linear")
    return _params_from_range(lo, hi, bits, axis)


def quantize(x, p: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s, z = p._bcast(x.ndim)
    q = np.clip(round_half_away(x / s) + z, 0, p.qmax)
    return q.astype(np.int64)


def dequantize(xz, p: QuantParams) -> np.ndarray:
    xz = np.asarray(xz)
    if not np.issubdtype(xz.dtype, np.integer):
        raise DomainError("dequantize expects integer codes")
    if xz.size and (xz.min() < 0 or xz.max() > p.qmax):
        raise DomainError(f"integer codes outside [0, {p.qmax}]")
    s, z = p._bcast(xz.ndim)
    return s * (xz.astype(np.float64) - z)


def fake_quant(x, p: QuantParams) -> np.ndarray:
    return dequantize(quantize(x, p), p)


def fake_quant_t(x: torch.Tensor, p: QuantParams, ste: bool = False) -> torch.Tensor:
    """Torch fake-quant, bitwise equal to :func:`fake_quant` on float64 input.

    With ``ste`` the backward pass treats the op as identity
    (straight-through estimator); otherwise rounding has zero derivative and
    clipping passes gradient only inside the grid.
    """
    s_np, z_np = p._bcast(x.dim())
    s = torch.as_tensor(s_np, dtype=x.dtype)
    z = torch.as_tensor(z_np, dtype=x.dtype)
    if ste:
        with torch.no_grad():
            q = torch.clamp(round_half_away_t(x / s) + z, 0, p.qmax)
            out = s * (q - z)
        return x + (out - x).detach()
    q = torch.clamp(round_half_away_t(x / s) + z, 0, p.qmax)
    return s * (q - z)


@dataclass(frozen=True)
class QuantScheme:
    """How a network is quantized. ``32`` bits disables a side entirely."""

    weight_bits: int = 8
    act_bits: int = 8
    observer: str = "minmax"
    q: float = DEFAULT_PERCENTILE
    granularity: str = "per_tensor"

    def __post_init__(self):
        for name, b in (("weight_bits", self.weight_bits), ("act_bits", self.act_bits)):
            if b not in SUPPORTED_BITS and b != DISABLED_BITS:
                raise ConfigError(f"{name} must be one of {SUPPORTED_BITS} or {DISABLED_BITS}")
        if self.observer not in ("minmax", "percentile"):
            raise ConfigError(f"unknown observer {self.observer!r}")
        if not 0.5 < self.q <= 1.0:
            raise ConfigError(f"percentile q must lie in (0.5, 1], got {self.q}")
        if self.granularity not in ("per_tensor", "per_output_channel"):
            raise ConfigError(f"unknown granularity {self.granularity!r}")

    def fit(self, x, bits: int, axis: int | None = None) -> QuantParams:
        if self.observer == "minmax":
            return fit_minmax(x, bits, axis)
        return fit_percentile(x, bits, self.q, axis)

    def fit_weight(self, w) -> QuantParams:
        axis = 0 if self.granularity == "per_output_channel" else None
        return self.fit(w, self.weight_bits, axis)

    def fit_activation(self, x) -> QuantParams:
        # per_output_channel never applies to activations
        return self.fit(x, self.act_bits, None)

    @property
    def method_name(self) -> str:
        return {"minmax": "MinMax", "percentile": "Percentile"}[self.observer]


@dataclass
class RangeRecorder:
    """Collects activation samples per quantization point during calibration."""

    chunks: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def record(self, name: str, x: torch.Tensor):
        self.chunks.setdefault(name, []).append(x.detach().reshape(-1).numpy().copy())

    def values(self, name: str) -> np.ndarray:
        return np.concatenate(self.chunks[name])

    def names(self) -> list[str]:
        return list(self.chunks)
