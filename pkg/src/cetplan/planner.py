"""End-to-end bit-width planning.

Stage order: first-order check and tolerance profile (validity of the
quadratic model), Hessian spectrum, random initialization, canonical
coordinates and short-axis solve, bit mapping, output.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CetError, ConfigurationError, ContractViolation
from .io import Checkpoint, load_spectrum, save_spectrum, spectrum_cache_key
from .model import Dataset, Objective
from .quantizer import ALLOWED_BITS, BitPlan, map_budgets_to_bits
from .spectral import LanczosConfig, Spectrum, lanczos
from .subspace import (
    PerturbationSolution,
    SolverConfig,
    classify_geometry,
    project_out_short,
    select_short_axes,
    solve_delta,
)
from .taylor import DEFAULT_SCALES, GAP_THRESHOLD, evaluate_gap, first_order_check, tolerance_profile

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PlannerConfig:
    lanczos: LanczosConfig = LanczosConfig(num_eigenpairs_requested=100, max_restarts=0)
    solver: SolverConfig = SolverConfig()
    target_bits_per_weight: float = 4.0
    taylor_threshold: float = GAP_THRESHOLD
    scale_grid: tuple[float, ...] = DEFAULT_SCALES
    probe_directions: int = 8
    allowed_bits: tuple[int, ...] = ALLOWED_BITS
    alpha: float = 1e-6
    restarts: int = 5
    aggregation: str = "best_j"
    mapping_mode: str = "combined"
    fallback_ratio: float = 1.25
    init_fraction: float = 0.1
    first_order_cutoff: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if self.aggregation not in ("best_j", "median_budget"):
            raise ConfigurationError(f"unknown aggregation rule {self.aggregation!r}")
        if self.restarts < 1:
            raise ConfigurationError("need at least one restart")
        if self.target_bits_per_weight <= 0:
            raise ConfigurationError("target bits must be positive")

    def to_dict(self) -> dict:
        return {
            "lanczos": self.lanczos.to_dict(),
            "solver": self.solver.to_dict(),
            "target_bits_per_weight": self.target_bits_per_weight,
            "taylor_threshold": self.taylor_threshold,
            "scale_grid": list(self.scale_grid),
            "probe_directions": self.probe_directions,
            "allowed_bits": list(self.allowed_bits),
            "alpha": self.alpha,
            "restarts": self.restarts,
            "aggregation": self.aggregation,
            "mapping_mode": self.mapping_mode,
            "fallback_ratio": self.fallback_ratio,
            "init_fraction": self.init_fraction,
            "first_order_cutoff": self.first_order_cutoff,
            "seed": self.seed,
        }


@dataclass(frozen=True, eq=False)
class PlanReport:
    geometry: dict
    spectrum: dict
    first_order: dict
    tolerance: dict
    solutions: list[dict]
    chosen_restart: int
    plan: dict
    predicted_delta_loss: float
    include_first_order: bool
    gap_check: dict
    advisory: bool
    checksums: dict
    config: dict
    timings: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    trajectories: list[dict] = field(default_factory=list)
    eigenvalues: list[float] = field(default_factory=list)
    solution: PerturbationSolution | None = None
    restart_solutions: tuple[PerturbationSolution, ...] = ()
    spectrum_obj: Spectrum | None = None
    tolerance_obj: object | None = None

    def to_dict(self, with_timings: bool = True) -> dict:
        d = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "geometry": self.geometry,
            "spectrum": self.spectrum,
            "first_order": self.first_order,
            "tolerance_profile": self.tolerance,
            "solutions": self.solutions,
            "chosen_restart": self.chosen_restart,
            "plan": self.plan,
            "predicted_delta_loss": self.predicted_delta_loss,
            "include_first_order": self.include_first_order,
            "gap_check": self.gap_check,
            "advisory": self.advisory,
            "checksums": self.checksums,
            "config": self.config,
            "warnings": self.warnings,
            "trajectories": self.trajectories,
            "eigenvalues": self.eigenvalues,
        }
        if with_timings:
            d["timings"] = self.timings
        return d


def aggregate_restarts(solutions: Sequence[PerturbationSolution], rule: str = "best_j", short=None):
    """Combine restart results: the minimum-J run, or per-layer median budgets.

    ``median_budget`` rescales the best run's delta layer by layer to the median
    RMS, then removes any short-axis component again.
    """
    if not solutions:
        raise ContractViolation("no restart solutions to aggregate")
    best = min(solutions, key=lambda s: (s.objective, s.restart))
    if rule == "best_j" or len(solutions) == 1:
        return best
    if rule != "median_budget":
        raise ConfigurationError(f"unknown aggregation rule {rule!r}")
    medians = {lid: float(np.median([s.budgets[lid] for s in solutions])) for lid in best.budgets}
    d = np.array(best.delta.values)
    for lid, (o, n) in best.delta.segments.items():
        cur = best.budgets[lid]
        if cur > 0:
            d[o:o + n] *= medians[lid] / cur
    delta = best.delta.like(d)
    if short is not None:
        delta = project_out_short(delta, short)
    res = float(np.max(np.abs(short.canonical(delta)))) if short is not None and short.m else 0.0
    return replace(best, delta=delta, budgets=medians, constraint_residual=res,
                   meta={**best.meta, "aggregation": "median_budget"})


def _timed(timings, name):
    class _T:
        def __enter__(self):
            self.t = time.perf_counter()

        def __exit__(self, *exc):
            timings[name] = time.perf_counter() - self.t

    return _T()


def plan(
    ckpt: Checkpoint,
    calibration: Dataset,
    cfg: PlannerConfig = PlannerConfig(),
    spectrum_cache: str | Path | None = None,
) -> tuple[BitPlan, PlanReport]:
    spec, params = ckpt.spec, ckpt.params
    if len(calibration) == 0:
        raise ConfigurationError("calibration set is empty", stage="load")
    try:
        obj = Objective(spec, calibration)
    except CetError as e:
        e.stage = e.stage or "load"
        raise
    timings, warnings = {}, []
    if not ckpt.meta.get("converged", True):
        warnings.append("checkpoint is flagged unconverged; the first-order term may not vanish")
    checksums = {"checkpoint": ckpt.checksum(), "calibration": calibration.checksum()}

    # validity of the quadratic model
    with _timed(timings, "first_order"):
        fo = first_order_check(spec, params, calibration, objective=obj)
    include_first = fo.grad_inf_norm >= cfg.first_order_cutoff
    with _timed(timings, "tolerance_profile"):
        prof = tolerance_profile(spec, params, calibration, cfg.scale_grid, cfg.taylor_threshold,
                                 cfg.probe_directions, cfg.seed, objective=obj)
    warnings.extend(f"{k}: {v}" for k, v in prof.warnings.items())

    # step 1: spectrum
    with _timed(timings, "spectrum"):
        key = spectrum_cache_key(ckpt, calibration, cfg.lanczos)
        spectrum = None
        if spectrum_cache is not None and Path(spectrum_cache).exists():
            try:
                spectrum = load_spectrum(spectrum_cache, expect_key=key)
            except ConfigurationError:
                spectrum = None
        if spectrum is None:
            try:
                spectrum = lanczos(obj.hvp_operator(params), spec.num_params, cfg.lanczos, params.segments)
            except CetError as e:
                e.stage = "spectrum"
                raise
            if spectrum_cache is not None:
                save_spectrum(spectrum_cache, spectrum, key)
    checksums["spectrum"] = key
    try:
        geometry = classify_geometry(spectrum)
        short = select_short_axes(spectrum, cfg.solver.m, cfg.solver.short_rule, cfg.solver.negative_reward)
    except CetError as e:
        e.stage = "subspace"
        raise
    if short.m < cfg.solver.m:
        warnings.append(f"short-axis count clamped from {cfg.solver.m} to {short.m}")

    # steps 2-4: random init inside the validated neighbourhood, solve
    init = {}
    for lid in params.layer_ids:
        tol_rms = prof.admissible_rms[lid]
        if tol_rms > 0:
            init[lid] = cfg.init_fraction * tol_rms
        else:
            w = params.segment(lid)
            init[lid] = 1e-3 * float(np.sqrt(np.mean(w ** 2))) or 1e-6
    n_total = spec.num_params
    target = cfg.target_bits_per_weight * n_total
    scfg = replace(cfg.solver, target_bits=target, init_scale=init, restarts=cfg.restarts,
                   alpha=cfg.alpha, seed=cfg.seed)
    with _timed(timings, "solve"):
        try:
            best = solve_delta(short, params.segments, scfg)
        except CetError as e:
            e.stage = "solve"
            raise
        runs = best.meta.get("all_restarts", [best])
        chosen = aggregate_restarts(runs, cfg.aggregation, short)

    # step 5: bit widths
    with _timed(timings, "bit_mapping"):
        weights = {lid: params.segment(lid) for lid in params.layer_ids}
        bitplan = map_budgets_to_bits(weights, chosen.budgets, cfg.allowed_bits, cfg.alpha,
                                      cfg.fallback_ratio, cfg.mapping_mode)
        bitplan = BitPlan(bitplan.layers, {**bitplan.meta, "target_bits": target,
                                           "target_bits_per_weight": cfg.target_bits_per_weight})

    with _timed(timings, "gap_check"):
        gap = evaluate_gap(spec, params, calibration, chosen.delta, obj)
        predicted = gap.second_order + (gap.first_order if include_first else 0.0)
    advisory = not gap.gap < cfg.taylor_threshold
    if advisory:
        warnings.append(
            f"solved perturbation leaves the validated neighbourhood (gap {gap.gap:.3g} >= "
            f"{cfg.taylor_threshold:g}); plan is advisory"
        )
    chosen = replace(chosen, predicted_delta_loss=predicted)

    report = PlanReport(
        geometry=geometry.to_dict(),
        spectrum=spectrum.summary(),
        first_order=fo.to_dict(),
        tolerance=prof.to_dict(),
        solutions=[s.summary() for s in runs],
        chosen_restart=chosen.restart,
        plan=bitplan.to_dict(),
        predicted_delta_loss=predicted,
        include_first_order=include_first,
        gap_check={
            "gap": gap.gap,
            "threshold": cfg.taylor_threshold,
            "passed": not advisory,
            "actual_delta_loss": gap.actual_plus,
            "actual_delta_loss_minus": gap.actual_minus,
            "first_order": gap.first_order,
            "second_order": gap.second_order,
            "delta_norm": chosen.delta.norm(),
            "constraint_residual": chosen.constraint_residual,
        },
        advisory=advisory,
        checksums=checksums,
        config=cfg.to_dict(),
        timings=timings,
        warnings=warnings,
        trajectories=[{"restart": s.restart, "columns": ["iteration", "J", "constraint_residual", "model_bits"],
                       "rows": s.trajectory.tolist()} for s in runs],
        eigenvalues=spectrum.eigenvalues.tolist(),
        solution=chosen,
        restart_solutions=tuple(runs),
        spectrum_obj=spectrum,
        tolerance_obj=prof,
    )
    return bitplan, report
