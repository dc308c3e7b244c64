"""Desk-scale training, plan evaluation, baselines and brute-force oracles."""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigurationError, InfeasibleTarget, OracleRefused
from .io import Checkpoint
from .model import Dataset, ModelSpec, Objective, ParameterVector, accuracy, init_params
from .quantizer import ALLOWED_BITS, FULL_PRECISION, BitPlan, fake_quant
from .spectral import Spectrum
from .subspace import SolverConfig, select_short_axes, solve_delta
from .taylor import evaluate_gap

log = logging.getLogger(__name__)

MAX_SEARCH_LAYERS = 8


# ---- synthetic data -------------------------------------------------------

def two_gaussians(n=512, dim=2, separation=2.0, seed=0, split="train") -> Dataset:
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    centers = np.zeros((2, dim))
    centers[0, 0], centers[1, 0] = -separation / 2, separation / 2
    x = centers[y] + rng.standard_normal((n, dim))
    return Dataset(x, y, split, 2, meta={"generator": "two_gaussians", "seed": seed})


def two_moons(n=512, noise=0.15, seed=0, split="train") -> Dataset:
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    t = rng.uniform(0, np.pi, n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], 1),
                 np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
    x = x + noise * rng.standard_normal((n, 2))
    return Dataset(x, y, split, 2, meta={"generator": "two_moons", "seed": seed})


def teacher_regression(n=512, in_dim=4, out_dim=2, hidden=8, noise=0.05, seed=0, split="train") -> Dataset:
    """Targets from a fixed random tanh teacher network plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((hidden, in_dim)) / np.sqrt(in_dim)
    w2 = rng.standard_normal((out_dim, hidden)) / np.sqrt(hidden)
    x = rng.standard_normal((n, in_dim))
    t = np.tanh(x @ w1.T) @ w2.T + noise * rng.standard_normal((n, out_dim))
    return Dataset(x, np.zeros(n, dtype=int), split, 1, targets=t,
                   meta={"generator": "teacher_regression", "seed": seed})


def bars_images(n=256, size=6, noise=0.3, seed=0, split="train") -> Dataset:
    """Single-channel images holding a horizontal (0) or vertical (1) bar."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = noise * rng.standard_normal((n, 1, size, size))
    pos = rng.integers(0, size, n)
    for i in range(n):
        if y[i] == 0:
            x[i, 0, pos[i], :] += 1.0
        else:
            x[i, 0, :, pos[i]] += 1.0
    return Dataset(x, y, split, 2, meta={"generator": "bars_images", "seed": seed})


GENERATORS = {
    "two_gaussians": two_gaussians,
    "two_moons": two_moons,
    "teacher_regression": teacher_regression,
    "bars_images": bars_images,
}


def split_dataset(ds: Dataset, sizes: Mapping[str, int], seed=0) -> dict[str, Dataset]:
    """Disjoint random splits, e.g. ``{"train": 512, "calibration": 256, "eval": 512}``."""
    total = sum(sizes.values())
    if total > len(ds):
        raise ConfigurationError(f"splits need {total} samples, dataset has {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    out, start = {}, 0
    for name, k in sizes.items():
        out[name] = ds.subset(np.sort(perm[start:start + k]), split=name)
        start += k
    return out


# ---- training -------------------------------------------------------------

def train_toy(
    spec: ModelSpec,
    dataset: Dataset,
    max_epochs: int = 3000,
    grad_tol: float = 1e-3,
    seed: int = 0,
    init: ParameterVector | None = None,
) -> Checkpoint:
    """Full-batch L-BFGS until the gradient infinity-norm drops below ``grad_tol``.

    One epoch is one L-BFGS iteration over the whole training set.
    """
    obj = Objective(spec, dataset)
    p0 = init if init is not None else init_params(spec, seed)
    x = np.array(p0.values)
    epochs = 0
    if max_epochs > 0:
        res = minimize(
            obj.loss_and_gradient, x, jac=True, method="L-BFGS-B",
            options={"maxiter": max_epochs, "gtol": grad_tol, "ftol": 0.0, "maxcor": 20, "maxls": 50},
        )
        x, epochs = res.x, int(res.nit)
    params = p0.like(x)
    g = obj.gradient_array(params)
    gnorm = float(np.max(np.abs(g)))
    converged = gnorm < grad_tol
    if not converged:
        log.warning("train_toy: gradient inf-norm %.3g above %.0e after %d epochs", gnorm, grad_tol, epochs)
    meta = {
        "seed": seed,
        "epochs": epochs,
        "final_grad_inf_norm": gnorm,
        "converged": bool(converged),
        "train_loss": obj.loss(params),
        "train_metric": accuracy(spec, params, dataset),
        "dataset_checksum": dataset.checksum(),
    }
    return Checkpoint(spec, params, meta)


# ---- plan evaluation --------------------------------------------------------

def apply_plan(params: ParameterVector, plan: BitPlan) -> ParameterVector:
    """Simulated quantization: every layer replaced by its quantize-dequantize image."""
    if not plan.covers(params.layer_ids):
        raise ConfigurationError("bit plan does not cover every layer of the checkpoint")
    chunks = [fake_quant(params.segment(lid), plan.bits[lid]) for lid in params.layer_ids]
    return params.like(np.concatenate(chunks))


@dataclass(frozen=True)
class EvalResult:
    full_loss: float
    quant_loss: float
    full_metric: float
    quant_metric: float
    compression_ratio: float
    total_bits: int
    achieved_rms: dict[str, float]
    implied_delta_gap: float | None = None
    metric_name: str = "accuracy"

    @property
    def loss_drop(self) -> float:
        return self.quant_loss - self.full_loss

    @property
    def metric_drop(self) -> float:
        # accuracy: full - quant; regression MSE: quant - full (both positive when worse)
        if self.metric_name == "accuracy":
            return self.full_metric - self.quant_metric
        return self.quant_metric - self.full_metric

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "full_loss": self.full_loss,
            "quant_loss": self.quant_loss,
            "loss_drop": self.loss_drop,
            "metric_name": self.metric_name,
            "full_metric": self.full_metric,
            "quant_metric": self.quant_metric,
            "metric_drop": self.metric_drop,
            "compression_ratio": self.compression_ratio,
            "total_bits": self.total_bits,
            "achieved_rms": self.achieved_rms,
            "implied_delta_gap": self.implied_delta_gap,
        }


def evaluate_plan(ckpt: Checkpoint, plan: BitPlan, eval_set: Dataset, with_gap: bool = True,
                  objective: Objective | None = None) -> EvalResult:
    spec, params = ckpt.spec, ckpt.params
    obj = objective or Objective(spec, eval_set)
    qparams = apply_plan(params, plan)
    delta = qparams - params
    full_loss = obj.loss(params)
    quant_loss = obj.loss(qparams) if np.any(delta.values) else full_loss
    metric = "mse" if spec.loss == "mse" and eval_set.targets is not None else "accuracy"
    full_m = accuracy(spec, params, eval_set)
    quant_m = accuracy(spec, qparams, eval_set) if np.any(delta.values) else full_m
    gap = evaluate_gap(spec, params, eval_set, delta, obj, full_loss).gap if with_gap else None
    return EvalResult(full_loss, quant_loss, full_m, quant_m, plan.compression_ratio, plan.total_bits,
                      delta.layer_rms(), gap, metric)


# ---- baselines --------------------------------------------------------------

def _sizes(ckpt: Checkpoint) -> dict[str, int]:
    return {lid: n for lid, (_, n) in ckpt.params.segments.items()}


def baseline_uniform(ckpt: Checkpoint, bits: int, allowed: Sequence[int] = ALLOWED_BITS) -> BitPlan:
    if bits not in allowed and bits != FULL_PRECISION:
        raise ConfigurationError(f"bit width {bits} not in allowed set {tuple(allowed)}")
    sizes = _sizes(ckpt)
    return BitPlan.from_bits({l: bits for l in sizes}, sizes, "uniform", baseline=f"uniform-{bits}")


def baseline_random(ckpt: Checkpoint, target_bits: float, seed: int = 0,
                    allowed: Sequence[int] = ALLOWED_BITS, max_tries: int = 10000) -> BitPlan:
    """Random plan whose total bits lie within one layer's worth of ``target_bits`` (and not above it by more)."""
    sizes = _sizes(ckpt)
    allowed = sorted(allowed)
    lo = sum(n * allowed[0] for n in sizes.values())
    if target_bits < lo:
        raise InfeasibleTarget(f"target {target_bits} bits is below the smallest plan ({lo} bits)")
    slack = max(sizes.values()) * (allowed[-1] - allowed[0])
    rng = np.random.default_rng(seed)
    ids = list(sizes)
    for _ in range(max_tries):
        bits = {l: int(rng.choice(allowed)) for l in ids}
        # greedy repair: lower random layers until under budget
        total = sum(sizes[l] * bits[l] for l in ids)
        order = list(rng.permutation(ids))
        while total > target_bits and order:
            l = order.pop()
            total -= sizes[l] * (bits[l] - allowed[0])
            bits[l] = allowed[0]
        if target_bits - slack <= total <= target_bits:
            return BitPlan.from_bits(bits, sizes, "random", baseline="random", seed=seed)
    raise InfeasibleTarget("could not draw a random plan near the target budget")


# ---- brute force --------------------------------------------------------------

@dataclass(frozen=True)
class SearchResult:
    assignments: tuple[tuple[int, ...], ...]
    layer_ids: tuple[str, ...]
    losses: np.ndarray
    sizes: np.ndarray
    pareto: tuple[int, ...]
    allowed_bits: tuple[int, ...] = ALLOWED_BITS

    def __len__(self):
        return len(self.assignments)

    def plan(self, i: int, layer_sizes: Mapping[str, int]) -> BitPlan:
        return BitPlan.from_bits(dict(zip(self.layer_ids, self.assignments[i])), layer_sizes, "search")

    def dominating(self, size: float, loss: float) -> int:
        """Number of enumerated plans at most as large and strictly better."""
        return int(np.sum((self.sizes <= size) & (self.losses < loss)))

    def rank_at_size(self, size: float, loss: float) -> tuple[int, int]:
        """(plans no larger with strictly lower loss, plans no larger)."""
        mask = self.sizes <= size
        return int(np.sum(mask & (self.losses < loss))), int(np.sum(mask))

    def to_dict(self) -> dict:
        return {
            "layer_ids": list(self.layer_ids),
            "allowed_bits": list(self.allowed_bits),
            "assignments": [list(a) for a in self.assignments],
            "losses": self.losses.tolist(),
            "sizes": self.sizes.tolist(),
            "pareto": list(self.pareto),
        }


def pareto_front(sizes: np.ndarray, losses: np.ndarray) -> tuple[int, ...]:
    front = []
    for i in range(len(sizes)):
        dominated = np.any(
            (sizes <= sizes[i]) & (losses <= losses[i]) & ((sizes < sizes[i]) | (losses < losses[i]))
        )
        if not dominated:
            front.append(i)
    return tuple(sorted(front, key=lambda i: (sizes[i], losses[i])))


def brute_force_search(ckpt: Checkpoint, eval_set: Dataset, allowed: Sequence[int] = ALLOWED_BITS,
                       objective: Objective | None = None) -> SearchResult:
    ids = tuple(ckpt.params.layer_ids)
    if len(ids) > MAX_SEARCH_LAYERS:
        raise OracleRefused(
            f"brute-force search is capped at {MAX_SEARCH_LAYERS} layers; checkpoint has {len(ids)}"
        )
    sizes = _sizes(ckpt)
    obj = objective or Objective(ckpt.spec, eval_set)
    allowed = tuple(sorted(allowed))
    # cache per-layer quantized segments
    cache = {(l, b): fake_quant(ckpt.params.segment(l), b) for l in ids for b in allowed}
    assigns, losses, totals = [], [], []
    for combo in itertools.product(allowed, repeat=len(ids)):
        vals = np.concatenate([cache[(l, b)] for l, b in zip(ids, combo)])
        assigns.append(combo)
        losses.append(obj.loss(ckpt.params.like(vals)))
        totals.append(sum(sizes[l] * b for l, b in zip(ids, combo)))
    losses, totals = np.asarray(losses), np.asarray(totals, dtype=float)
    return SearchResult(tuple(assigns), ids, losses, totals, pareto_front(totals, losses), allowed)


# ---- Monte Carlo comparison ------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloResult:
    reference_loss: float
    losses: np.ndarray
    total_bits: np.ndarray
    seeds: tuple[int, ...]

    @property
    def win_rate(self) -> float:
        """Fraction of random plans whose loss is strictly worse than the reference."""
        return float(np.mean(self.losses > self.reference_loss))

    def to_dict(self) -> dict:
        return {"reference_loss": self.reference_loss, "losses": self.losses.tolist(),
                "total_bits": self.total_bits.tolist(), "seeds": list(self.seeds),
                "win_rate": self.win_rate}


def monte_carlo_random_plans(ckpt: Checkpoint, eval_set: Dataset, target_bits: float, reference: BitPlan,
                             n_plans: int = 100, seed: int = 0, allowed=ALLOWED_BITS) -> MonteCarloResult:
    obj = Objective(ckpt.spec, eval_set)
    seeds = tuple(seed * 100003 + i for i in range(n_plans))
    losses, bits = [], []
    for s in seeds:
        p = baseline_random(ckpt, target_bits, s, allowed)
        losses.append(obj.loss(apply_plan(ckpt.params, p)))
        bits.append(p.total_bits)
    ref = obj.loss(apply_plan(ckpt.params, reference))
    return MonteCarloResult(ref, np.asarray(losses), np.asarray(bits), seeds)


def random_direction_losses(objective: Objective, params: ParameterVector, norm: float, n: int = 100,
                            seed: int = 0) -> np.ndarray:
    """Measured loss change for ``n`` random perturbations of the given norm."""
    rng = np.random.default_rng(seed)
    f0 = objective.loss(params)
    out = np.empty(n)
    for i in range(n):
        d = rng.standard_normal(len(params))
        d *= norm / np.linalg.norm(d)
        out[i] = objective.loss(params.like(params.values + d)) - f0
    return out


# ---- eigenvalue-count ablation ----------------------------------------------------

def eigen_count_ablation(objective: Objective, params: ParameterVector, spectrum: Spectrum,
                         ms: Sequence[int], target_bits_per_weight: float = 4.0, norm: float = 0.1,
                         seed: int = 0, solver: SolverConfig | None = None) -> list[dict]:
    """Solve for delta with the top-``m`` short axes for each ``m`` and measure it at a fixed norm.

    The measured change is the mean of the losses at ``+delta`` and ``-delta``,
    which cancels the first-order term of a not-quite-stationary point.
    """
    base = solver or SolverConfig(init_scale=1e-3)
    n = len(params)
    f0 = objective.loss(params)
    rows = []
    for m in ms:
        t0 = time.perf_counter()
        short = select_short_axes(spectrum, m, base.short_rule, base.negative_reward)
        cfg = replace(base, m=short.m, target_bits=target_bits_per_weight * n, seed=seed)
        sol = solve_delta(short, params.segments, cfg)
        d = sol.delta * (norm / sol.delta.norm())
        g = evaluate_gap(objective.spec, params, objective.batch, d, objective, f0)
        rows.append({"m": m, "m_used": short.m, "norm": norm, "delta_loss": g.symmetric_actual,
                     "second_order": g.second_order, "gap": g.gap, "converged": int(sol.converged),
                     "runtime_s": time.perf_counter() - t0})
    return rows
