"""Second-order loss-change model and its validity checks.

The loss change caused by a weight perturbation ``delta`` is modelled as
``g.delta + 0.5 * delta' H delta``.  The higher-order remainder is never
computed; ``taylor_gap`` measures it directly against real loss evaluations.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalError
from .model import Dataset, ModelSpec, Objective, ParameterVector

log = logging.getLogger(__name__)

GAP_THRESHOLD = 1e-3
DEFAULT_SCALES = tuple(float(s) for s in np.logspace(-4, -1, 10))


def _objective(spec, batch, objective):
    return objective if objective is not None else Objective(spec, batch)


def quadratic_term(spec, params, batch, delta, objective=None) -> float:
    """``0.5 * delta' H delta`` from a single exact HVP."""
    obj = _objective(spec, batch, objective)
    return 0.5 * float(delta.values @ obj.hvp_array(params, delta))


def predicted_delta_loss(
    spec: ModelSpec,
    params: ParameterVector,
    batch: Dataset,
    delta: ParameterVector,
    include_first_order: bool = True,
    objective: Objective | None = None,
) -> float:
    obj = _objective(spec, batch, objective)
    if not np.any(delta.values):
        return 0.0
    out = quadratic_term(spec, params, batch, delta, obj)
    if include_first_order:
        out += float(obj.gradient_array(params) @ delta.values)
    if not np.isfinite(out):
        raise NumericalError("predicted loss change is not finite")
    return out


@dataclass(frozen=True)
class GapEvaluation:
    gap: float
    actual_plus: float
    actual_minus: float
    first_order: float
    second_order: float

    @property
    def predicted_plus(self) -> float:
        return self.first_order + self.second_order

    @property
    def symmetric_actual(self) -> float:
        """Mean of the two-sided changes; the first-order term cancels."""
        return 0.5 * (self.actual_plus + self.actual_minus)


def evaluate_gap(spec, params, batch, delta, objective=None, base_loss=None) -> GapEvaluation:
    obj = _objective(spec, batch, objective)
    f0 = obj.loss(params) if base_loss is None else base_loss
    if not np.any(delta.values):
        return GapEvaluation(0.0, 0.0, 0.0, 0.0, 0.0)
    lin = float(obj.gradient_array(params) @ delta.values)
    quad = 0.5 * float(delta.values @ obj.hvp_array(params, delta))
    up = obj.loss(params + delta) - f0
    down = obj.loss(params - delta) - f0
    gap = max(abs(up - (lin + quad)), abs(down - (-lin + quad)))
    return GapEvaluation(gap, up, down, lin, quad)


def taylor_gap(spec, params, batch, delta, objective=None) -> float:
    """Worst of the two one-sided gaps between actual and predicted loss change."""
    return evaluate_gap(spec, params, batch, delta, objective).gap


@dataclass(frozen=True)
class GapProbeResult:
    layer_id: str
    scale: float
    gap: float
    actual_delta_loss: float
    predicted_delta_loss: float
    passed: bool


@dataclass(frozen=True)
class ToleranceProfile:
    admissible_rms: dict[str, float]
    scale_grid: tuple[float, ...]
    threshold: float
    probes: tuple[GapProbeResult, ...] = ()
    warnings: dict[str, str] = field(default_factory=dict)

    def gaps(self, layer_id: str) -> list[float]:
        return [p.gap for p in self.probes if p.layer_id == layer_id]

    def to_dict(self) -> dict:
        return {
            "admissible_rms": self.admissible_rms,
            "scale_grid": list(self.scale_grid),
            "threshold": self.threshold,
            "warnings": self.warnings,
            "probes": [
                {"layer_id": p.layer_id, "scale": p.scale, "gap": p.gap,
                 "actual": p.actual_delta_loss, "predicted": p.predicted_delta_loss, "pass": p.passed}
                for p in self.probes
            ],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer_id", "scale", "gap", "pass"])
            for p in self.probes:
                w.writerow([p.layer_id, repr(p.scale), repr(p.gap), int(p.passed)])


def layer_direction(params: ParameterVector, layer_id: str, rms: float, rng) -> ParameterVector:
    """Random perturbation confined to one layer, scaled to the exact target RMS."""
    o, n = params.segments[layer_id]
    vals = np.zeros(len(params))
    if n:
        d = rng.standard_normal(n)
        vals[o:o + n] = d * (rms / np.sqrt(np.mean(d ** 2)))
    return params.like(vals)


def tolerance_profile(
    spec: ModelSpec,
    params: ParameterVector,
    batch: Dataset,
    scale_grid: Sequence[float] = DEFAULT_SCALES,
    threshold: float = GAP_THRESHOLD,
    directions: int = 8,
    seed: int = 0,
    objective: Objective | None = None,
) -> ToleranceProfile:
    grid = tuple(float(s) for s in scale_grid)
    if not grid or any(s <= 0 for s in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("scale grid must be positive and strictly ascending")
    obj = _objective(spec, batch, objective)
    f0 = obj.loss(params)
    g = obj.gradient_array(params)
    rng = np.random.default_rng(seed)
    probes, admissible, warnings = [], {}, {}
    for lid in params.layer_ids:
        best = 0.0
        for s in grid:
            worst = None
            for _ in range(directions):
                d = layer_direction(params, lid, s, rng)
                quad = 0.5 * float(d.values @ obj.hvp_array(params, d))
                lin = float(g @ d.values)
                up = obj.loss(params + d) - f0
                down = obj.loss(params - d) - f0
                gap = max(abs(up - (lin + quad)), abs(down - (quad - lin)))
                if worst is None or gap > worst[0]:
                    worst = (gap, up, lin + quad)
            passed = worst[0] < threshold
            probes.append(GapProbeResult(lid, s, worst[0], worst[1], worst[2], passed))
            if passed:
                best = s
        if best == 0.0:
            warnings[lid] = "no probed scale kept the Taylor gap below threshold"
            log.warning("tolerance profile: %s has no admissible scale", lid)
        admissible[lid] = best
    return ToleranceProfile(admissible, grid, threshold, tuple(probes), warnings)


@dataclass(frozen=True)
class FirstOrderReport:
    grad_inf_norm: float
    fraction_below: float
    small_threshold: float = 1e-5

    def to_dict(self) -> dict:
        return {"grad_inf_norm": self.grad_inf_norm, "fraction_below": self.fraction_below,
                "small_threshold": self.small_threshold}


def first_order_check(spec, params, batch, small=1e-5, objective=None) -> FirstOrderReport:
    g = _objective(spec, batch, objective).gradient_array(params)
    return FirstOrderReport(float(np.max(np.abs(g))), float(np.mean(np.abs(g) < small)), small)
