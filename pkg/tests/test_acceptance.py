"""Acceptance suite: one test, and one printed PASS/FAIL line, per criterion.

Run with ``pytest tests/test_acceptance.py`` (the lines appear in the terminal
summary) or ``python tests/test_acceptance.py``.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cetplan.harness import (  # noqa: E402
    apply_plan,
    bars_images,
    baseline_uniform,
    brute_force_search,
    eigen_count_ablation,
    random_direction_losses,
    split_dataset,
    teacher_regression,
    train_toy,
    two_gaussians,
    two_moons,
)
from cetplan.model import LayerSpec, ModelSpec, Objective, init_params, mlp  # noqa: E402
from cetplan.planner import PlannerConfig, plan  # noqa: E402
from cetplan.quantizer import (  # noqa: E402
    ALLOWED_BITS,
    bits_from_delta,
    bits_from_error_mapping,
    dequantize,
    fake_quant,
    quant_error,
    quant_params,
    quantize,
)
from cetplan.spectral import (  # noqa: E402
    LanczosConfig,
    dense_eig,
    lanczos,
    materialize_hessian,
    matrix_operator,
    symmetry_defect,
)
from cetplan.subspace import SolverConfig, certificate_ok, select_short_axes, solve_delta  # noqa: E402
from cetplan.taylor import GAP_THRESHOLD, tolerance_profile  # noqa: E402

from oracles import random_symmetric, rel  # noqa: E402

RESULTS: dict[int, str] = {}
SEEDS = (0, 1, 2)


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])


# ---- shared instances ------------------------------------------------------------

def _teacher(seed: int, arch=(4, 16, 16, 2)):
    sp = split_dataset(teacher_regression(1792, seed=seed), {"train": 1024, "calibration": 256, "eval": 512}, seed)
    return train_toy(mlp(list(arch), "tanh", "mse"), sp["train"], seed=seed), sp


@pytest.fixture(scope="module")
def teachers():
    """Three seeded 3-layer regression MLPs with their default plans."""
    out = {}
    for s in SEEDS:
        t0 = time.perf_counter()
        ckpt, sp = _teacher(s)
        bp, rep = plan(ckpt, sp["calibration"], PlannerConfig(seed=s))
        out[s] = {"ckpt": ckpt, "splits": sp, "plan": bp, "report": rep, "runtime": time.perf_counter() - t0}
    return out


def _toy_nets():
    """Small trained models of different kinds (regression, classifier, conv)."""
    nets = []
    ckpt, sp = _teacher(0)
    nets.append(("mlp-regression", ckpt, sp["calibration"]))
    mo = split_dataset(two_moons(768, noise=0.35, seed=0), {"train": 512, "calibration": 256}, 0)
    nets.append(("mlp-classifier", train_toy(mlp([2, 12, 2], "tanh", "cross_entropy"), mo["train"]),
                 mo["calibration"]))
    bars = split_dataset(bars_images(384, seed=0), {"train": 256, "calibration": 128}, 0)
    conv = ModelSpec((LayerSpec("conv2d", (1, 6, 6), (3, 4, 4), "tanh", 3), LayerSpec("dense", (3, 4, 4), (2,))),
                     "cross_entropy")
    nets.append(("conv-classifier", train_toy(conv, bars["train"]), bars["calibration"]))
    return nets


# ---- 1: spectral oracle ------------------------------------------------------------

def test_criterion_01_spectral_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, cases = 0.0, []
    for n in np.linspace(30, 200, 20).astype(int):
        A = random_symmetric(int(n), rng)
        cases.append((matrix_operator(A), int(n), A))
    ds = split_dataset(two_moons(768, noise=0.35, seed=0), {"train": 512, "calibration": 256}, 0)
    ck = train_toy(mlp([2, 12, 2], "tanh", "cross_entropy"), ds["train"])
    tr = split_dataset(teacher_regression(768, seed=1), {"train": 512, "calibration": 256}, 0)
    ck2 = train_toy(mlp([4, 8, 2], "tanh", "mse"), tr["train"], seed=1)
    s3 = mlp([4, 9, 5, 2], "tanh", "cross_entropy")
    for spec, params, batch in ((ck.spec, ck.params, ds["calibration"]), (ck2.spec, ck2.params, tr["calibration"]),
                                (s3, init_params(s3, 1), two_gaussians(64, dim=4, seed=1))):
        H = materialize_hessian(spec, params, batch)
        cases.append((Objective(spec, batch).hvp_operator(params), len(params), H))
    for op, n, H in cases:
        ref = np.linalg.eigvalsh(H)
        sp = lanczos(op, n, LanczosConfig(max_iterations=min(n, 150), num_eigenpairs_requested=20))
        lam = np.sort(sp.eigenvalues)
        top, bot = lam[::-1][:10], lam[:3]
        err = max(np.max(np.abs(top - ref[::-1][:10]) / np.abs(ref[::-1][:10])),
                  np.max(np.abs(bot - ref[:3]) / np.abs(ref[:3])))
        worst = max(worst, float(err))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and dt < 10.0
    record(1, ok, f"{len(cases)} operators, worst top-10/bottom-3 rel err {worst:.2e} (<= 1e-6), {dt:.1f}s (< 10s)")
    assert ok


# ---- 2: HVP correctness --------------------------------------------------------------

def test_criterion_02_hvp():
    worst_fd, worst_sym = 0.0, 0.0
    rng = np.random.default_rng(7)
    for _, ckpt, batch in _toy_nets():
        obj = Objective(ckpt.spec, batch)
        p = ckpt.params
        h = 1e-4
        for _ in range(10):
            v = rng.standard_normal(len(p))
            v /= np.linalg.norm(v)
            fd = (obj.gradient_array(p.like(p.values + h * v)) - obj.gradient_array(p.like(p.values - h * v))) / (2 * h)
            worst_fd = max(worst_fd, rel(obj.hvp_array(p, v), fd))
        worst_sym = max(worst_sym, symmetry_defect(materialize_hessian(ckpt.spec, p, batch)))
    ok = worst_fd <= 1e-4 and worst_sym <= 1e-9
    record(2, ok, f"3 models x 10 directions, worst FD rel err {worst_fd:.2e} (<= 1e-4), "
                  f"symmetry defect {worst_sym:.2e} (<= 1e-9)")
    assert ok


# ---- 3: Taylor validity ----------------------------------------------------------------

def test_criterion_03_taylor_validity():
    ckpt, sp = _teacher(0)
    t0 = time.perf_counter()
    prof = tolerance_profile(ckpt.spec, ckpt.params, sp["calibration"])
    dt = time.perf_counter() - t0
    at_scale = []
    for lid, s in prof.admissible_rms.items():
        at_scale += [p.gap for p in prof.probes if p.layer_id == lid and p.scale == s]
    all_layers = all(s > 0 for s in prof.admissible_rms.values())
    below = all_layers and max(at_scale) < GAP_THRESHOLD
    pairs = rising = 0
    for lid in ckpt.params.layer_ids:
        g = prof.gaps(lid)
        pairs += len(g) - 1
        rising += sum(b >= a for a, b in zip(g, g[1:]))
    frac = rising / pairs
    ok = below and frac >= 0.9 and dt < 60
    record(3, ok, f"max gap at selected scales {max(at_scale):.2e} (< 1e-3) on all {len(at_scale)} layers, "
                  f"nondecreasing pairs {rising}/{pairs} = {frac:.1%} (>= 90%), {dt:.1f}s (< 60s)")
    assert ok


# ---- 4: null-space certificate and convergence --------------------------------------

def test_criterion_04_certificate(teachers):
    worst, n_runs, n_conv, max_it = 0.0, 0, 0, 0
    for s, t in teachers.items():
        rep = t["report"]
        short = select_short_axes(rep.spectrum_obj, PlannerConfig().solver.m)
        for run in [rep.solution, *rep.restart_solutions]:
            n_runs += 1
            floor = 1e-8 * np.sqrt(len(run.delta))
            worst = max(worst, run.constraint_residual / max(run.delta.norm(), floor))
            assert certificate_ok(run, short)
            n_conv += bool(run.converged)
            max_it = max(max_it, int(run.trajectory[-1, 0]))
    ok = worst <= 1e-4 and n_conv == n_runs and max_it <= 2000
    record(4, ok, f"{n_runs} solutions, worst residual/max(norm, floor) {worst:.2e} (<= 1e-4), "
                  f"converged {n_conv}/{n_runs}, max iterations {max_it} (<= 2000)")
    assert ok


# ---- 5: long-axis advantage ----------------------------------------------------------

def test_criterion_05_long_axis(teachers):
    wins = []
    for s, t in teachers.items():
        ckpt, batch = t["ckpt"], t["splits"]["calibration"]
        obj = Objective(ckpt.spec, batch)
        d = t["report"].solution.delta
        mine = obj.loss(ckpt.params + d) - obj.loss(ckpt.params)
        rand = random_direction_losses(obj, ckpt.params, d.norm(), 100, seed=s)
        wins.append(int(np.sum(mine < rand)))
    # constructed indefinite quadratics: every positive direction is a short axis
    rng = np.random.default_rng(11)
    neg = []
    for k in range(5):
        n = int(rng.integers(20, 60))
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        lam = np.concatenate([rng.uniform(0.5, 5.0, n - n // 3), -rng.uniform(0.1, 2.0, n // 3)])
        A = (Q * lam) @ Q.T
        A = (A + A.T) / 2
        segs = {"a": (0, n // 2), "b": (n // 2, n - n // 2)}
        sp = dense_eig(A, segs)
        short = select_short_axes(sp, sp.positive.size)
        sol = solve_delta(short, segs, SolverConfig(m=short.m, target_bits=4.0 * n, init_scale=1e-3, seed=k))
        w = sol.delta.values
        neg.append(0.5 * w @ A @ w)  # measured change of f(w) = 0.5 w'Aw from its stationary point
    ok = all(w >= 95 for w in wins) and all(v < 0 for v in neg)
    record(5, ok, f"wins vs 100 random equal-norm deltas per model {wins} (each >= 95); "
                  f"indefinite quadratics dL max {max(neg):.2e} (< 0) over {len(neg)}")
    assert ok


# ---- 6: eigenvalue-count ablation ------------------------------------------------------

def test_criterion_06_ablation():
    ckpt, sp = _teacher(0, (4, 32, 24, 2))
    batch = sp["calibration"]
    t0 = time.perf_counter()
    spec_d = dense_eig(materialize_hessian(ckpt.spec, ckpt.params, batch), ckpt.params.segments)
    rows = eigen_count_ablation(Objective(ckpt.spec, batch), ckpt.params, spec_d, [50, 100, 200, 500], norm=0.1)
    dt = time.perf_counter() - t0
    dl = {r["m"]: r["delta_loss"] for r in rows}
    trend = all(dl[b] <= dl[a] + 0.05 * abs(dl[a]) for a, b in ((50, 100), (100, 200)))
    gain_100_200 = dl[100] - dl[200]
    gain_200_500 = dl[200] - dl[500]
    ok = trend and gain_200_500 < gain_100_200
    runtimes = ", ".join(f"m={r['m']}: {r['runtime_s']:.1f}s" for r in rows)
    record(6, ok, f"{len(ckpt.params)} params, |delta|=0.1, dL " + " ".join(f"m={m}:{v:.3e}" for m, v in dl.items())
           + f"; gain 200->500 {gain_200_500:.2e} < gain 100->200 {gain_100_200:.2e}; "
             f"runtime {dt:.1f}s ({runtimes})")
    assert ok


# ---- 7: quantizer contracts ---------------------------------------------------------

def test_criterion_07_quantizer():
    rng = np.random.default_rng(3)
    worst_rt, mono_fail = -np.inf, 0
    makers = (lambda k: rng.standard_normal(k) * rng.uniform(0.01, 10),
              lambda k: rng.uniform(-5, 5, k),
              lambda k: rng.standard_t(2, k))
    for i in range(1000):
        W = makers[i % 3](int(rng.integers(16, 1024)))
        for b in ALLOWED_BITS:
            qp = quant_params(W, b)
            err = np.max(np.abs(W - dequantize(quantize(W, qp))))
            worst_rt = max(worst_rt, err - qp.step / 2)
        mses = [quant_error(W, b).mse for b in sorted(ALLOWED_BITS)]
        mono_fail += any(b > a for a, b in zip(mses, mses[1:]))
    uni = []
    for b in ALLOWED_BITS:
        W = np.random.default_rng(b).uniform(0, 1, 200_000)
        step = (W.max() - W.min()) / (2 ** b - 1)
        uni.append(abs(quant_error(W, b).rms / (step / np.sqrt(12)) - 1))
    ok = worst_rt <= 1e-12 and mono_fail == 0 and max(uni) <= 0.05
    record(7, ok, f"1000 tensors (n 16-1023): max(err - step/2) {worst_rt:.1e} (<= 1e-12), "
                  f"MSE monotonicity violations {mono_fail}; uniform RMS worst rel dev {max(uni):.2%} (<= 5%)")
    assert ok


# ---- 8: bit-mapping identities --------------------------------------------------------

def test_criterion_08_bit_mapping(teachers):
    exact = bits_from_delta(2 ** -4, 1e-300) == 4.0
    checked = mismatch = 0
    rng = np.random.default_rng(5)
    layers = [t["ckpt"].params.segment(l) for t in teachers.values() for l in t["ckpt"].params.layer_ids]
    for W in layers:
        budgets = [quant_error(W, b).rms for b in ALLOWED_BITS] + list(rng.uniform(0, 0.3, 20))
        for budget in budgets:
            direct = [b for b in sorted(ALLOWED_BITS) if np.sqrt(np.mean((W - fake_quant(W, b)) ** 2)) <= budget]
            mismatch += bits_from_error_mapping(W, budget) != (direct[0] if direct else max(ALLOWED_BITS))
            checked += 1
    ok = exact and mismatch == 0
    record(8, ok, f"b(2^-4, alpha->0) == 4 exactly: {exact}; error mapping vs direct simulation "
                  f"{checked - mismatch}/{checked} agree on {len(layers)} layers")
    assert ok


# ---- 9: end to end against brute force ------------------------------------------------

def test_criterion_09_vs_oracle(teachers):
    ranks, lines, slow = [], [], 0.0
    for s, t in teachers.items():
        ckpt, ev = t["ckpt"], t["splits"]["eval"]
        t0 = time.perf_counter()
        res = brute_force_search(ckpt, ev)
        loss = Objective(ckpt.spec, ev).loss(apply_plan(ckpt.params, t["plan"]))
        dom = res.dominating(t["plan"].total_bits, loss)
        ranks.append(dom / len(res))
        slow = max(slow, t["runtime"] + time.perf_counter() - t0)
        lines.append(f"seed {s}: bits {tuple(t['plan'].bits.values())} dominated by {dom}/{len(res)}")
    ok = len(res) == 64 and all(r <= 0.10 for r in ranks) and slow < 300
    record(9, ok, "; ".join(lines) + f" (each <= 10%); slowest pipeline {slow:.1f}s (< 300s)")
    assert ok


# ---- 10: budget fidelity --------------------------------------------------------------

def test_criterion_10_budget(teachers):
    wins, lines = 0, []
    for s, t in teachers.items():
        ckpt, ev = t["ckpt"], t["splits"]["eval"]
        obj = Objective(ckpt.spec, ev)
        cet = obj.loss(apply_plan(ckpt.params, t["plan"]))
        uni = obj.loss(apply_plan(ckpt.params, baseline_uniform(ckpt, 4)))
        budget_ok = t["plan"].total_bits <= 4 * ckpt.spec.num_params
        win = cet <= uni and budget_ok
        wins += win
        lines.append(f"seed {s}: CET {cet:.6g} vs uniform-4 {uni:.6g} at {t['plan'].average_bits:.2f} bits/w "
                     f"{'ok' if win else 'worse'}")
    ok = wins >= 2
    record(10, ok, "; ".join(lines) + f"; {wins}/3 (>= 2)")
    assert ok


# ---- 11: determinism ------------------------------------------------------------------

def test_criterion_11_determinism():
    ckpt, sp = _teacher(1)
    cfg = PlannerConfig(seed=1)
    a, _ = plan(ckpt, sp["calibration"], cfg)
    b, _ = plan(ckpt, sp["calibration"], cfg)
    same = a.to_json().encode() == b.to_json().encode()
    record(11, same, f"two runs, identical seeds and config: BitPlan JSON byte-identical = {same}")
    assert same


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
