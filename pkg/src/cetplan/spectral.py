"""Extreme eigenpairs of the implicit Hessian.

``lanczos`` only touches the operator through matrix-vector products, so it
works on the batch-averaged Hessian of any model via ``Objective.hvp_operator``.
``dense_eig`` and ``materialize_hessian`` are the direct routes used to check
it on small problems.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import ContractViolation, NumericalError, OracleRefused, SpectralBreakdown
from .model import Dataset, ModelSpec, Objective, ParameterVector

log = logging.getLogger(__name__)

DENSE_CAP = 2000
WHICH = ("both", "largest", "smallest")


@dataclass(frozen=True)
class LanczosConfig:
    max_iterations: int = 100
    num_eigenpairs_requested: int = 20
    seed: int = 0
    reorthogonalization: bool = True
    residual_tolerance: float | None = None  # None: 1e-6 * max(1, |lambda_max|)
    which: str = "both"
    max_restarts: int = 3

    def __post_init__(self):
        if self.num_eigenpairs_requested < 1 or self.max_iterations < 1:
            raise ValueError("iteration and eigenpair counts must be positive")
        if self.num_eigenpairs_requested > self.max_iterations:
            raise ValueError("cannot request more eigenpairs than iterations")
        if self.residual_tolerance is not None and self.residual_tolerance <= 0:
            raise ValueError("residual_tolerance must be positive")
        if self.which not in WHICH:
            raise ValueError(f"which must be one of {WHICH}")

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "num_eigenpairs_requested": self.num_eigenpairs_requested,
            "seed": self.seed,
            "reorthogonalization": self.reorthogonalization,
            "residual_tolerance": self.residual_tolerance,
            "which": self.which,
            "max_restarts": self.max_restarts,
        }


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Ritz pairs sorted by eigenvalue, largest first.

    ``eigenvectors`` holds one unit vector per column.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    dim: int
    residual_tolerance: float
    segments: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        vec = np.asarray(self.eigenvectors, dtype=np.float64).reshape(self.dim, lam.size)
        res = np.asarray(self.residuals, dtype=np.float64).reshape(-1)
        if lam.size > self.dim:
            raise ContractViolation("more eigenpairs than dimensions")
        if np.any(np.diff(lam) > 0):
            raise ContractViolation("eigenvalues must be sorted in descending order")
        for a in (lam, vec, res):
            a.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenvectors", vec)
        object.__setattr__(self, "residuals", res)

    def __len__(self) -> int:
        return self.eigenvalues.size

    def vector(self, i: int) -> ParameterVector:
        segs = self.segments or {"all": (0, self.dim)}
        return ParameterVector(self.eigenvectors[:, i], segs)

    def take(self, idx) -> "Spectrum":
        idx = np.asarray(idx, dtype=int)
        order = idx[np.argsort(-self.eigenvalues[idx], kind="stable")]
        return replace(
            self,
            eigenvalues=self.eigenvalues[order],
            eigenvectors=self.eigenvectors[:, order],
            residuals=self.residuals[order],
        )

    @property
    def positive(self) -> np.ndarray:
        return np.flatnonzero(self.eigenvalues > self.residual_tolerance)

    @property
    def negative(self) -> np.ndarray:
        return np.flatnonzero(self.eigenvalues < -self.residual_tolerance)

    def orthonormality_defect(self) -> float:
        k = len(self)
        if k == 0:
            return 0.0
        g = self.eigenvectors.T @ self.eigenvectors
        return float(np.max(np.abs(g - np.eye(k))))

    def summary(self, n: int = 5) -> dict:
        lam = self.eigenvalues
        return {
            "dim": self.dim,
            "num_pairs": int(lam.size),
            "num_positive": int(self.positive.size),
            "num_negative": int(self.negative.size),
            "largest": lam[:n].tolist(),
            "smallest": lam[-n:][::-1].tolist() if lam.size else [],
            "max_residual": float(self.residuals.max()) if lam.size else 0.0,
            "residual_tolerance": self.residual_tolerance,
            **{k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool))},
        }


def _extreme_order(theta: np.ndarray, which: str) -> np.ndarray:
    """Indices into ascending ``theta`` ranked from most to least extreme."""
    n = theta.size
    if which == "largest":
        return np.arange(n)[::-1]
    if which == "smallest":
        return np.arange(n)
    order = []
    lo, hi = 0, n - 1
    while lo <= hi:
        order.append(hi)
        if lo != hi:
            order.append(lo)
        lo, hi = lo + 1, hi - 1
    return np.asarray(order, dtype=int)


def _lanczos_once(op, dim, cfg: LanczosConfig, seed: int):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    steps = min(cfg.max_iterations, dim)
    Q = np.zeros((dim, steps))
    alphas, betas = [], []
    q_prev, beta = np.zeros(dim), 0.0
    breakdown = False
    scale = 0.0
    for j in range(steps):
        Q[:, j] = q
        w = np.asarray(op(q), dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise NumericalError(f"operator returned non-finite values at Lanczos step {j}")
        alpha = float(q @ w)
        w = w - alpha * q - beta * q_prev
        if cfg.reorthogonalization:
            basis = Q[:, :j + 1]
            # two passes: one classical Gram-Schmidt sweep is not enough near convergence
            w -= basis @ (basis.T @ w)
            w -= basis @ (basis.T @ w)
        alphas.append(alpha)
        beta_next = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta_next)
        if j == steps - 1:
            beta = beta_next
            break
        if beta_next <= 1e-12 * max(scale, 1e-300):
            breakdown = True
            beta = 0.0
            break
        betas.append(beta_next)
        q_prev, q = q, w / beta_next
        beta = beta_next
    k = len(alphas)
    T = np.diag(alphas) + np.diag(betas, 1) + np.diag(betas, -1)
    theta, S = np.linalg.eigh(T)
    est = np.abs(beta * S[-1, :])
    return theta, Q[:, :k] @ S, est, k, breakdown, Q[:, :k]


def lanczos(
    hvp_fn: Callable[[np.ndarray], np.ndarray],
    dim: int,
    cfg: LanczosConfig = LanczosConfig(),
    segments: Mapping[str, tuple[int, int]] | None = None,
) -> Spectrum:
    """Converged Ritz pairs of the symmetric operator ``hvp_fn``.

    Runs plain Lanczos from a random unit start vector, extracts Ritz pairs
    from the tridiagonal matrix and keeps the most extreme ones whose true
    residual ``||H v - lambda v||`` is within tolerance.  If fewer than the
    requested number converge, restarts from a fresh seed (at most
    ``cfg.max_restarts`` times) and keeps the run with the most converged pairs.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")

    def op(v):
        return hvp_fn(v)

    best = None
    for attempt in range(cfg.max_restarts + 1):
        seed = cfg.seed if attempt == 0 else cfg.seed + 7919 * attempt
        theta, ritz, est, steps, breakdown, basis = _lanczos_once(op, dim, cfg, seed)
        tol = cfg.residual_tolerance or 1e-6 * max(1.0, float(np.max(np.abs(theta))))
        chosen, residuals = [], []
        for i in _extreme_order(theta, cfg.which):
            if len(chosen) == cfg.num_eigenpairs_requested:
                break
            if est[i] > tol:
                continue
            v = ritz[:, i] / np.linalg.norm(ritz[:, i])
            r = float(np.linalg.norm(np.asarray(op(v)) - theta[i] * v))
            if r <= tol:
                chosen.append(i)
                residuals.append(r)
        result = (len(chosen), theta, ritz, chosen, residuals, tol, steps, breakdown, seed, basis)
        if best is None or result[0] > best[0]:
            best = result
        if len(chosen) >= cfg.num_eigenpairs_requested or steps >= dim or breakdown:
            break
        log.info("lanczos: %d/%d pairs converged, restarting", len(chosen), cfg.num_eigenpairs_requested)

    n_conv, theta, ritz, chosen, residuals, tol, steps, breakdown, seed, basis = best
    if n_conv == 0:
        if breakdown:
            raise SpectralBreakdown("Krylov space collapsed before any Ritz pair converged", stage="spectrum")
        log.warning("lanczos: no Ritz pair met the residual tolerance %.3g", tol)
    idx = np.asarray(chosen, dtype=int)
    order = np.argsort(-theta[idx], kind="stable") if idx.size else idx
    idx = idx[order]
    vecs = ritz[:, idx]
    vecs = vecs / np.linalg.norm(vecs, axis=0, keepdims=True) if idx.size else vecs
    gram = basis.T @ basis
    meta = {
        "method": "lanczos",
        "iterations": int(steps),
        "breakdown": bool(breakdown),
        "seed_used": int(seed),
        "krylov_orthogonality": float(np.max(np.abs(gram - np.eye(gram.shape[0])))),
    }
    return Spectrum(
        theta[idx],
        vecs,
        np.asarray(residuals)[order] if idx.size else np.zeros(0),
        dim,
        float(tol),
        dict(segments) if segments is not None else None,
        meta,
    )


def matrix_operator(A: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    A = np.asarray(A, dtype=np.float64)
    return lambda v: A @ v


def dense_eig(matrix, segments=None) -> Spectrum:
    """Full spectrum by direct symmetric eigendecomposition (test oracle)."""
    A = np.asarray(matrix, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractViolation("dense_eig needs a square matrix")
    n = A.shape[0]
    if n > DENSE_CAP:
        raise OracleRefused(f"dense_eig is capped at n={DENSE_CAP}, got {n}")
    asym = float(np.max(np.abs(A - A.T))) if n else 0.0
    if asym > 1e-10 * max(1.0, float(np.max(np.abs(A)))):
        raise ContractViolation(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    lam, P = np.linalg.eigh(0.5 * (A + A.T))
    lam, P = lam[::-1], P[:, ::-1]
    res = np.linalg.norm(A @ P - P * lam, axis=0)
    norm = float(np.max(np.abs(lam))) if n else 0.0
    return Spectrum(
        lam, P, res, n, max(1e-10 * max(norm, 1.0), float(res.max()) if n else 0.0),
        dict(segments) if segments is not None else None, {"method": "dense"},
    )


def materialize_hessian(spec: ModelSpec, params: ParameterVector, batch: Dataset) -> np.ndarray:
    """Dense batch-averaged Hessian assembled column by column from HVPs."""
    n = spec.num_params
    if n > DENSE_CAP:
        raise OracleRefused(f"refusing to materialize a {n}x{n} Hessian (cap {DENSE_CAP})")
    op = Objective(spec, batch).hvp_operator(params)
    H = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        H[:, j] = op(e)
        e[j] = 0.0
    return H


def symmetry_defect(H: np.ndarray) -> float:
    return float(np.max(np.abs(H - H.T)))


def hessian_spectrum(
    spec: ModelSpec, params: ParameterVector, batch: Dataset, cfg: LanczosConfig = LanczosConfig()
) -> Spectrum:
    op = Objective(spec, batch).hvp_operator(params)
    return lanczos(op, spec.num_params, cfg, params.segments)
