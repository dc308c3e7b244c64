"""Per-tensor uniform affine quantization and the error-to-bit-width mappings."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError

ALLOWED_BITS = (2, 3, 4, 8)
FULL_PRECISION = 32
EPS_Q = 1e-12
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class QuantParams:
    step: float
    zero_point: int
    bits: int
    # constant tensors: every code dequantizes to this value exactly
    constant: float | None = None

    @property
    def levels(self) -> int:
        return 2 ** self.bits - 1

    def to_dict(self) -> dict:
        return {"step": self.step, "zero_point": self.zero_point, "bits": self.bits,
                "constant": self.constant}

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuantParams":
        return cls(float(d["step"]), int(d["zero_point"]), int(d["bits"]), d.get("constant"))


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams
    shape: tuple[int, ...]


@dataclass(frozen=True)
class QuantError:
    rms: float
    mse: float
    max_abs: float


def _check_bits(bits, allowed):
    if allowed is not None and bits not in allowed:
        raise ConfigurationError(f"bit width {bits} not in allowed set {tuple(allowed)}")
    if bits < 2:
        raise ConfigurationError("bit width must be >= 2")


def quant_params(W, bits: int, allowed: Sequence[int] | None = ALLOWED_BITS) -> QuantParams:
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        raise ConfigurationError("cannot quantize an empty tensor")
    _check_bits(bits, allowed)
    lo, hi = float(W.min()), float(W.max())
    if hi == lo:
        return QuantParams(EPS_Q, 0, bits, constant=lo)
    step = (hi - lo) / (2 ** bits - 1)
    # np.rint rounds half to even
    zero = -int(np.rint(lo / step))
    return QuantParams(step, zero, bits)


def quantize(W, qp: QuantParams) -> QuantizedTensor:
    W = np.asarray(W, dtype=np.float64)
    if qp.constant is not None:
        codes = np.zeros(W.shape, dtype=np.int64)
    else:
        codes = np.clip(np.rint(W / qp.step) + qp.zero_point, 0, qp.levels).astype(np.int64)
    return QuantizedTensor(codes, qp, W.shape)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    qp = qt.params
    if qp.constant is not None:
        return np.full(qt.shape, qp.constant)
    return qp.step * (qt.codes.astype(np.float64) - qp.zero_point)


def fake_quant(W, bits: int, allowed: Sequence[int] | None = None) -> np.ndarray:
    """Quantize-dequantize round trip with the tensor's own range."""
    if bits == FULL_PRECISION:
        return np.array(W, dtype=np.float64)
    return dequantize(quantize(W, quant_params(W, bits, allowed)))


def quant_error(W, bits: int, allowed: Sequence[int] | None = None) -> QuantError:
    W = np.asarray(W, dtype=np.float64)
    e = W - fake_quant(W, bits, allowed)
    mse = float(np.mean(e ** 2))
    return QuantError(math.sqrt(mse), mse, float(np.max(np.abs(e))))


def bits_from_delta(per_layer_rms: float, alpha: float = 1e-6) -> float:
    """Fractional bit width ``log2(1 / (rms + alpha))``; differentiable in ``rms``."""
    if per_layer_rms < 0 or alpha <= 0:
        raise ConfigurationError("need rms >= 0 and alpha > 0")
    return -math.log2(per_layer_rms + alpha)


def snap_bits(fractional: float, allowed: Sequence[int] = ALLOWED_BITS) -> int:
    """Round, then move up to the nearest allowed width (capped at the largest)."""
    allowed = sorted(allowed)
    r = int(np.rint(fractional))
    for b in allowed:
        if b >= r:
            return b
    return allowed[-1]


def bits_from_error_mapping(W, budget_rms: float, allowed: Sequence[int] = ALLOWED_BITS) -> int:
    """Smallest allowed width whose actual quantization RMS fits the budget."""
    if budget_rms < 0:
        raise ConfigurationError("budget must be non-negative")
    allowed = sorted(allowed)
    for b in allowed:
        if quant_error(W, b).rms <= budget_rms:
            return b
    return allowed[-1]


def reduce_delta(segment: np.ndarray, reduction: str = "rms") -> float:
    """Scalar error size of one layer's slice of the perturbation."""
    if segment.size == 0:
        return 0.0
    if reduction == "rms":
        return float(np.sqrt(np.mean(segment ** 2)))
    if reduction == "mean_abs":
        return float(np.mean(np.abs(segment)))
    raise ConfigurationError(f"unknown reduction {reduction!r}")


@dataclass(frozen=True)
class LayerBits:
    layer_id: str
    bits: int
    size: int
    delta_rms_budget: float | None = None
    achieved_quant_rms: float | None = None
    mapping_used: str = "manual"
    fractional_bits: float | None = None

    def to_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "bits": self.bits,
            "size": self.size,
            "delta_rms_budget": self.delta_rms_budget,
            "achieved_quant_rms": self.achieved_quant_rms,
            "mapping_used": self.mapping_used,
            "fractional_bits": self.fractional_bits,
        }


@dataclass(frozen=True)
class BitPlan:
    layers: tuple[LayerBits, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        ids = [l.layer_id for l in self.layers]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("a layer appears twice in the bit plan")

    @classmethod
    def from_bits(cls, bits: Mapping[str, int], sizes: Mapping[str, int], mapping_used="manual", **meta):
        return cls(tuple(LayerBits(l, int(bits[l]), int(sizes[l]), mapping_used=mapping_used) for l in sizes),
                   dict(meta))

    @property
    def bits(self) -> dict[str, int]:
        return {l.layer_id: l.bits for l in self.layers}

    @property
    def sizes(self) -> dict[str, int]:
        return {l.layer_id: l.size for l in self.layers}

    @property
    def num_weights(self) -> int:
        return sum(l.size for l in self.layers)

    @property
    def total_bits(self) -> int:
        return sum(l.size * l.bits for l in self.layers)

    @property
    def average_bits(self) -> float:
        return self.total_bits / self.num_weights

    @property
    def compression_ratio(self) -> float:
        return FULL_PRECISION * self.num_weights / self.total_bits

    def covers(self, layer_ids: Iterable[str]) -> bool:
        return set(layer_ids) == set(self.bits)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "layers": [l.to_dict() for l in self.layers],
            "total_bits": self.total_bits,
            "compression_ratio": self.compression_ratio,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "BitPlan":
        layers = tuple(
            LayerBits(
                l["layer_id"], int(l["bits"]), int(l["size"]), l.get("delta_rms_budget"),
                l.get("achieved_quant_rms"), l.get("mapping_used", "manual"), l.get("fractional_bits"),
            )
            for l in d["layers"]
        )
        return cls(layers, dict(d.get("meta", {})))


def map_budgets_to_bits(
    weights: Mapping[str, np.ndarray],
    budgets: Mapping[str, float],
    allowed: Sequence[int] = ALLOWED_BITS,
    alpha: float = 1e-6,
    fallback_ratio: float = 1.25,
    mode: str = "combined",
) -> BitPlan:
    """Turn per-layer error budgets into a BitPlan.

    ``combined`` takes the closed-form width and falls back to the error
    mapping for layers whose real quantization error at that width overshoots
    the budget by more than ``fallback_ratio``.
    """
    if mode not in ("combined", "formula", "error_mapping"):
        raise ConfigurationError(f"unknown mapping mode {mode!r}")
    out = []
    for lid, W in weights.items():
        budget = float(budgets[lid])
        frac = bits_from_delta(budget, alpha)
        if mode == "error_mapping":
            b, used = bits_from_error_mapping(W, budget, allowed), "error_mapping"
        else:
            b, used = snap_bits(frac, allowed), "formula"
            if mode == "combined" and quant_error(W, b).rms > fallback_ratio * budget:
                b, used = bits_from_error_mapping(W, budget, allowed), "error_mapping"
        out.append(LayerBits(lid, b, int(np.size(W)), budget, quant_error(W, b).rms, used, frac))
    return BitPlan(tuple(out), {"allowed_bits": list(allowed), "alpha": alpha,
                                "fallback_ratio": fallback_ratio, "mapping_mode": mode})
