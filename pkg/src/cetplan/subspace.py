"""Quadratic-form geometry of the Hessian and the long-axis perturbation solver.

Level sets of ``delta' H delta`` are ellipsoids when H is positive definite and
hyperbolic paraboloids when it is indefinite.  Axis length along eigenvector
``v_i`` scales as ``1/sqrt(lambda_i)``, so the highest-curvature directions are
the short axes.  ``solve_delta`` looks for a perturbation orthogonal to the
selected short axes that is as small as possible while still being large
enough to meet a model-size (bit) budget.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractViolation, InfeasibleTarget, NoConstraintError
from .model import ParameterVector
from .quantizer import FULL_PRECISION
from .spectral import Spectrum

log = logging.getLogger(__name__)

POSITIVE_DEFINITE = "positive_definite"
INDEFINITE = "indefinite"
LN2 = math.log(2.0)


@dataclass(frozen=True)
class GeometryClass:
    kind: str
    min_eigenvalue: float
    max_eigenvalue: float
    tolerance: float
    num_negative: int

    @property
    def surface(self) -> str:
        return "ellipsoid" if self.kind == POSITIVE_DEFINITE else "hyperbolic paraboloid"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "surface": self.surface, "min_eigenvalue": self.min_eigenvalue,
                "max_eigenvalue": self.max_eigenvalue, "tolerance": self.tolerance,
                "num_negative": self.num_negative}


def classify_geometry(spectrum: Spectrum) -> GeometryClass:
    if len(spectrum) == 0:
        raise ContractViolation("cannot classify an empty spectrum")
    tol = spectrum.residual_tolerance
    lam = spectrum.eigenvalues
    lo, hi = float(lam.min()), float(lam.max())
    if hi < -tol:
        raise ContractViolation(
            "every converged eigenvalue is negative: the point is a local maximum, not a convergence point"
        )
    n_neg = int(np.sum(lam < -tol))
    kind = INDEFINITE if n_neg else POSITIVE_DEFINITE
    return GeometryClass(kind, lo, hi, tol, n_neg)


@dataclass(frozen=True, eq=False)
class ShortAxisSet:
    """Constrained (short-axis) eigenpairs, optionally with the negative-curvature pairs.

    Negative pairs are never constrained. When present, the solver adds their
    true (negative) curvature to J, which rewards moving along them.
    """

    eigenvalues: np.ndarray
    vectors: np.ndarray
    rule: str = "largest"
    negative_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    negative_vectors: np.ndarray | None = None

    @property
    def m(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[0])

    def canonical(self, delta) -> np.ndarray:
        """Coordinates ``y_i = v_i . delta`` along the short axes."""
        d = delta.values if isinstance(delta, ParameterVector) else np.asarray(delta)
        return self.vectors.T @ d


def select_short_axes(spectrum: Spectrum, m: int, rule: str = "largest",
                      include_negative: bool = False) -> ShortAxisSet:
    """Pick ``m`` positive eigenpairs to constrain.

    ``rule="largest"`` takes the highest-curvature pairs (the short axes);
    ``"smallest"`` takes the lowest positive ones instead.
    """
    if rule not in ("largest", "smallest"):
        raise ValueError("rule must be 'largest' or 'smallest'")
    pos = spectrum.positive  # indices in descending eigenvalue order
    if m > pos.size:
        log.warning("only %d converged positive eigenpairs; clamping m from %d", pos.size, m)
        m = int(pos.size)
    if m <= 0:
        raise NoConstraintError("no positive eigenpairs available to constrain", stage="subspace")
    idx = pos[:m] if rule == "largest" else pos[::-1][:m]
    neg = spectrum.negative if include_negative else np.zeros(0, dtype=int)
    return ShortAxisSet(
        spectrum.eigenvalues[idx].copy(),
        spectrum.eigenvectors[:, idx].copy(),
        rule,
        spectrum.eigenvalues[neg].copy(),
        spectrum.eigenvectors[:, neg].copy(),
    )


def project_out_short(delta: ParameterVector, short: ShortAxisSet) -> ParameterVector:
    """Remove the short-axis components of ``delta``."""
    d = np.array(delta.values)
    V = short.vectors
    # second pass mops up the loss of orthogonality in the Ritz vectors
    for _ in range(2):
        d -= V @ (V.T @ d)
    return delta.like(d)


@dataclass(frozen=True)
class SolverConfig:
    m: int = 200
    learning_rate: float | None = None  # None: 0.05 * RMS implied by target_bits
    max_iterations: int = 2000
    restarts: int = 5
    init_scale: float | Mapping[str, float] = 1e-3
    mu: float | None = None  # None: size penalty at full precision = 10 * J(delta_0)
    rho: float | None = None  # None: 1e-3 * lambda_max (at least 10 * |lambda_min| with the negative reward)
    target_bits: float | None = None  # total model bits; None disables the size term
    optimizer: str = "adam"
    alpha: float = 1e-6
    reduction: str = "rms"
    short_rule: str = "largest"
    seed: int = 0
    lr_decay: float = 0.01  # final learning rate as a fraction of the initial one
    penalty_check_every: int = 200
    penalty_growth: float = 10.0
    size_tolerance: float = 1e-3  # relative slack on target_bits
    epsilon_floor: float | None = None  # None: 1e-8 * sqrt(n)
    negative_reward: bool = False  # add the negative-curvature pairs to J

    def __post_init__(self):
        if self.m < 1 or self.max_iterations < 1 or self.restarts < 1:
            raise ValueError("m, max_iterations and restarts must be positive")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError("optimizer must be 'adam' or 'gd'")
        for name in ("learning_rate", "mu", "rho", "target_bits"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if isinstance(self.init_scale, Mapping):
            d["init_scale"] = dict(self.init_scale)
        return d


class DifferentiableBits:
    """Per-layer fractional bits ``log2(1/(r + alpha))`` with ``r`` the RMS or mean |delta|."""

    def __init__(self, segments: Mapping[str, tuple[int, int]], alpha: float = 1e-6, reduction: str = "rms"):
        if reduction not in ("rms", "mean_abs"):
            raise ValueError(f"unknown reduction {reduction!r}")
        self.segments = dict(segments)
        self.alpha = alpha
        self.reduction = reduction

    def sizes(self) -> dict[str, int]:
        return {k: n for k, (_, n) in self.segments.items()}

    def layer_sizes(self, d: np.ndarray) -> dict[str, float]:
        out = {}
        for lid, (o, n) in self.segments.items():
            seg = d[o:o + n]
            if n == 0:
                out[lid] = 0.0
            elif self.reduction == "rms":
                out[lid] = float(np.sqrt(np.mean(seg ** 2)))
            else:
                out[lid] = float(np.mean(np.abs(seg)))
        return out

    def model_bits(self, d: np.ndarray) -> tuple[float, np.ndarray]:
        """Total bits ``sum_l n_l * b_l`` and its gradient with respect to ``d``."""
        total = 0.0
        grad = np.zeros_like(d)
        for lid, (o, n) in self.segments.items():
            if n == 0:
                continue
            seg = d[o:o + n]
            if self.reduction == "rms":
                r = float(np.sqrt(np.mean(seg ** 2)))
                dr = seg / (n * r) if r > 0 else np.zeros(n)
            else:
                r = float(np.mean(np.abs(seg)))
                dr = np.sign(seg) / n
            total += n * -math.log2(r + self.alpha)
            grad[o:o + n] = -n / ((r + self.alpha) * LN2) * dr
        return total, grad


@dataclass(frozen=True, eq=False)
class PerturbationSolution:
    delta: ParameterVector
    budgets: dict[str, float]
    trajectory: np.ndarray  # columns: iteration, J, constraint residual, model bits
    constraint_residual: float
    objective: float
    model_delta_loss: float  # 0.5 * sum lambda_i y_i^2 over the known eigenpairs
    restart: int
    converged: bool
    mu: float
    rho: float
    model_bits: float
    predicted_delta_loss: float | None = None
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "restart": self.restart,
            "objective": self.objective,
            "constraint_residual": self.constraint_residual,
            "delta_norm": self.delta.norm(),
            "model_bits": self.model_bits,
            "model_delta_loss": self.model_delta_loss,
            "predicted_delta_loss": self.predicted_delta_loss,
            "converged": self.converged,
            "mu": self.mu,
            "rho": self.rho,
            "budgets": self.budgets,
            "iterations": int(self.trajectory[-1, 0]) if len(self.trajectory) else 0,
            **{k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool))},
        }

    def write_trajectory_csv(self, path) -> None:
        write_trajectories_csv(path, [self])


def write_trajectories_csv(path, solutions: Sequence[PerturbationSolution]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["restart", "iteration", "J", "constraint_residual", "model_bits"])
        for s in solutions:
            for it, J, res, bits in s.trajectory:
                w.writerow([s.restart, int(it), repr(float(J)), repr(float(res)), repr(float(bits))])


class _Problem:
    def __init__(self, short: ShortAxisSet, bits: DifferentiableBits, rho, mu, target):
        self.V, self.lam = short.vectors, short.eigenvalues
        self.U = short.negative_vectors if short.negative_vectors is not None else np.zeros((short.dim, 0))
        self.nu = short.negative_values
        self.bits = bits
        self.rho, self.mu, self.target = rho, mu, target

    def curvature(self, d):
        y = self.V.T @ d
        z = self.U.T @ d
        return float(self.lam @ y ** 2 + self.nu @ z ** 2), y, z

    def value_and_grad(self, d):
        quad, y, z = self.curvature(d)
        J = quad + self.rho * float(d @ d)
        g = 2.0 * (self.V @ (self.lam * y) + self.U @ (self.nu * z)) + 2.0 * self.rho * d
        mbits = float("nan")
        if self.target is not None:
            mbits, dbits = self.bits.model_bits(d)
            excess = mbits - self.target
            if excess > 0:
                J += self.mu * excess ** 2
                g += 2.0 * self.mu * excess * dbits
        return J, g, quad, mbits


def _init_delta(segments, scale, rng, n) -> np.ndarray:
    d = np.zeros(n)
    for lid, (o, k) in segments.items():
        s = scale[lid] if isinstance(scale, Mapping) else scale
        d[o:o + k] = rng.normal(0.0, s, size=k)
    return d


def _mean_scale(scale) -> float:
    if isinstance(scale, Mapping):
        vals = [v for v in scale.values() if v > 0]
        return float(np.mean(vals)) if vals else 1e-3
    return float(scale)


def solve_delta(
    short: ShortAxisSet,
    segment_map: Mapping[str, tuple[int, int]],
    cfg: SolverConfig = SolverConfig(),
    bit_mapper: DifferentiableBits | None = None,
) -> PerturbationSolution:
    """Minimal-impact perturbation in the long-axis subspace, best of ``cfg.restarts`` runs.

    Minimizes ``sum_short lambda_i y_i^2 + rho |delta|^2
    + mu * max(0, bits(delta) - target)^2`` by projected (Adam or plain) gradient
    descent; every iterate is projected onto the orthogonal complement of the
    short axes.  If ``short`` carries negative-curvature pairs, their
    ``lambda_j z_j^2`` terms are added as well.
    """
    segments = dict(segment_map)
    n = sum(k for _, k in segments.values())
    if n != short.dim:
        raise ContractViolation(f"segment map covers {n} parameters but eigenvectors have {short.dim}")
    bits = bit_mapper or DifferentiableBits(segments, cfg.alpha, cfg.reduction)
    eps_floor = cfg.epsilon_floor if cfg.epsilon_floor is not None else 1e-8 * math.sqrt(n)

    lam_max = float(short.eigenvalues.max()) if short.m else 0.0
    neg_mag = float(-short.negative_values.min()) if short.negative_values.size else 0.0
    rho = cfg.rho if cfg.rho is not None else max(1e-3 * lam_max, 10.0 * neg_mag, 1e-12)
    target = cfg.target_bits
    if cfg.learning_rate is not None:
        lr0 = cfg.learning_rate
    elif target is not None:
        # Adam moves each coordinate ~lr per step; aim at the RMS the budget implies
        lr0 = 0.05 * 2.0 ** (-target / n)
    else:
        lr0 = 0.05 * _mean_scale(cfg.init_scale)

    runs = []
    for r in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, r])
        d = _init_delta(segments, cfg.init_scale, rng, n)
        tmp = ParameterVector(d, segments)
        d = np.array(project_out_short(tmp, short).values)

        mu = cfg.mu
        if mu is None:
            prob0 = _Problem(short, bits, rho, 0.0, None)
            J0 = prob0.value_and_grad(d)[0]
            full_gap = FULL_PRECISION * n - (target or 0.0)
            mu = 10.0 * J0 / full_gap ** 2 if target is not None and full_gap > 0 else 0.0
        prob = _Problem(short, bits, rho, mu, target)

        m1 = np.zeros(n)
        m2 = np.zeros(n)
        b1, b2, eps = 0.9, 0.999, 1e-30
        traj = []
        escalations = 0
        history = []
        converged = False
        for t in range(1, cfg.max_iterations + 1):
            J, g, quad, mbits = prob.value_and_grad(d)
            lr = lr0 * cfg.lr_decay ** ((t - 1) / max(cfg.max_iterations - 1, 1))
            if cfg.optimizer == "adam":
                m1 = b1 * m1 + (1 - b1) * g
                m2 = b2 * m2 + (1 - b2) * g * g
                step = lr * (m1 / (1 - b1 ** t)) / (np.sqrt(m2 / (1 - b2 ** t)) + eps)
            else:
                step = lr * g
            d = d - step
            d -= short.vectors @ (short.vectors.T @ d)
            J, _, quad, mbits = prob.value_and_grad(d)
            res = float(np.max(np.abs(short.vectors.T @ d))) if short.m else 0.0
            traj.append((t, J, res, mbits))
            history.append(J)
            if target is not None and t % cfg.penalty_check_every == 0:
                if mbits - target > cfg.size_tolerance * target and prob.mu > 0:
                    prob.mu *= cfg.penalty_growth
                    escalations += 1
            size_ok = target is None or mbits - target <= cfg.size_tolerance * target
            if t > 100 and size_ok:
                ref = history[-100]
                if abs(ref - J) <= 1e-6 * max(abs(J), 1e-300):
                    converged = True
                    break
        # certify: final two-pass projection
        d = np.array(project_out_short(ParameterVector(d, segments), short).values)
        J, _, quad, mbits = prob.value_and_grad(d)
        res = float(np.max(np.abs(short.vectors.T @ d))) if short.m else 0.0
        size_ok = target is None or mbits - target <= cfg.size_tolerance * target
        runs.append(PerturbationSolution(
            delta=ParameterVector(d, segments),
            budgets=bits.layer_sizes(d),
            trajectory=np.asarray(traj),
            constraint_residual=res,
            objective=J,
            model_delta_loss=0.5 * prob.curvature(d)[0],
            restart=r,
            converged=converged or (t == cfg.max_iterations and size_ok and _flat(history)),
            mu=prob.mu,
            rho=rho,
            model_bits=mbits,
            meta={"escalations": escalations, "size_satisfied": bool(size_ok),
                  "learning_rate": lr0, "optimizer": cfg.optimizer, "epsilon_floor": eps_floor},
        ))

    if target is not None and all(s.delta.norm() < eps_floor for s in runs):
        raise InfeasibleTarget("every restart collapsed to a zero perturbation", stage="solve")
    best = min(runs, key=lambda s: (s.objective, s.restart))
    return replace(best, meta={**best.meta, "all_restarts": runs})


def _flat(history, window=100, rtol=1e-4) -> bool:
    if len(history) <= window:
        return False
    return abs(history[-1] - history[-window]) <= rtol * max(abs(history[-1]), 1e-300)


def certificate_ok(sol: PerturbationSolution, short: ShortAxisSet, eps_floor: float | None = None) -> bool:
    n = short.dim
    floor = eps_floor if eps_floor is not None else 1e-8 * math.sqrt(n)
    res = float(np.max(np.abs(short.canonical(sol.delta)))) if short.m else 0.0
    return res <= 1e-4 * max(sol.delta.norm(), floor)


def quadratic_value(H_or_op, d: np.ndarray) -> float:
    """``0.5 * d' H d`` for a dense matrix or a matvec callable."""
    Hd = H_or_op(d) if callable(H_or_op) else np.asarray(H_or_op) @ d
    return 0.5 * float(d @ Hd)
