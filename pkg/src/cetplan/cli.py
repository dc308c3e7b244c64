"""Command-line entry point: gen-data, train, plan, eval, search, report.

Exit codes: 0 success, 1 pipeline failure (stage-labelled message on stderr),
2 usage error (bad flags, missing or unreadable input files).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path


from .errors import CetError
from .quantizer import ALLOWED_BITS, BitPlan

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "CETPLAN_NUM_THREADS"

log = logging.getLogger("cetplan")


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _splits(text: str) -> dict[str, int]:
    out = {}
    for part in text.split(","):
        name, _, k = part.partition("=")
        if not k:
            raise argparse.ArgumentTypeError(f"split must look like name=count, got {part!r}")
        out[name.strip()] = int(k)
    return out


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    return p


def _apply_threads() -> None:
    val = os.environ.get(THREADS_ENV)
    if not val:
        return
    try:
        n = int(val)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {val!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {val!r}")
    import torch

    torch.set_num_threads(n)


# ---- subcommands -------------------------------------------------------------

def cmd_gen_data(a) -> None:
    from .harness import GENERATORS, split_dataset
    from .io import save_dataset

    kwargs = {"n": a.n, "seed": a.seed}
    if a.noise is not None:
        kwargs["noise"] = a.noise
    ds = GENERATORS[a.generator](**kwargs)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in split_dataset(ds, a.splits, a.seed).items():
        save_dataset(out / f"{name}.ds", part)
        print(f"wrote {out / f'{name}.ds'} ({len(part)} samples)")


def cmd_train(a) -> None:
    from .harness import train_toy
    from .io import load_dataset, save_checkpoint
    from .model import mlp

    ds = load_dataset(_existing(a.data))
    if len(a.arch) < 2:
        raise UsageError("--arch needs at least an input and an output width")
    spec = mlp(a.arch, a.activation, a.loss)
    ckpt = train_toy(spec, ds, max_epochs=a.max_epochs, grad_tol=a.grad_tol, seed=a.seed)
    save_checkpoint(a.out, ckpt)
    m = ckpt.meta
    print(f"wrote {a.out}: {spec.num_params} params, {m['epochs']} epochs, "
          f"grad inf-norm {m['final_grad_inf_norm']:.3g}, converged={m['converged']}")


def _report_path(a) -> Path:
    if a.report:
        return Path(a.report)
    out = Path(a.out)
    return out.with_name(out.stem + ".report.json")


def cmd_plan(a) -> None:
    from .io import load_checkpoint, load_dataset, write_json
    from .planner import PlannerConfig, plan
    from .subspace import SolverConfig

    ckpt = load_checkpoint(_existing(a.checkpoint))
    calib = load_dataset(_existing(a.calib))
    base = PlannerConfig()
    lcfg = replace(base.lanczos, seed=a.seed,
                   **({"max_iterations": a.lanczos_iterations} if a.lanczos_iterations else {}),
                   **({"num_eigenpairs_requested": a.eigenpairs} if a.eigenpairs else {}))
    scfg = replace(SolverConfig(), m=a.m, negative_reward=a.negative_reward,
                   **({"max_iterations": a.solver_iterations} if a.solver_iterations else {}))
    cfg = replace(base, lanczos=lcfg, solver=scfg, target_bits_per_weight=a.target_bits,
                  restarts=a.restarts, mapping_mode=a.mapping, aggregation=a.aggregation,
                  allowed_bits=tuple(a.allowed_bits), seed=a.seed)
    bitplan, report = plan(ckpt, calib, cfg, spectrum_cache=a.spectrum_cache)
    write_json(a.out, bitplan.to_dict())
    rpath = _report_path(a)
    write_json(rpath, report.to_dict(with_timings=True))
    print(f"wrote {a.out} and {rpath}: bits {bitplan.bits}, "
          f"{bitplan.average_bits:.3f} bits/weight, ratio {bitplan.compression_ratio:.3f}")
    if report.advisory:
        print("warning: plan is advisory (final perturbation failed the gap check)", file=sys.stderr)


def _load_plan(path) -> BitPlan:
    try:
        return BitPlan.from_dict(json.loads(_existing(path).read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise UsageError(f"{path} is not a bit plan: {e}") from None


def cmd_eval(a) -> None:
    from .harness import evaluate_plan
    from .io import load_checkpoint, load_dataset, write_json

    ckpt = load_checkpoint(_existing(a.checkpoint))
    bp = _load_plan(a.plan)
    ds = load_dataset(_existing(a.data))
    res = evaluate_plan(ckpt, bp, ds)
    out = a.out or str(Path(a.plan).with_name(Path(a.plan).stem + ".eval.json"))
    write_json(out, res.to_dict())
    print(f"wrote {out}: loss {res.full_loss:.6g} -> {res.quant_loss:.6g}, "
          f"{res.metric_name} {res.full_metric:.4g} -> {res.quant_metric:.4g}, ratio {res.compression_ratio:.3f}")


def cmd_search(a) -> None:
    from .harness import brute_force_search
    from .io import load_checkpoint, load_dataset, write_json

    ckpt = load_checkpoint(_existing(a.checkpoint))
    ds = load_dataset(_existing(a.data))
    res = brute_force_search(ckpt, ds, tuple(a.allowed_bits))
    write_json(a.out, {"schema_version": 1, **res.to_dict()})
    print(f"wrote {a.out}: {len(res)} assignments, {len(res.pareto)} on the Pareto front")


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {path}")


def cmd_report(a) -> None:
    try:
        rep = json.loads(_existing(a.report).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{a.report} is not JSON: {e}") from None
    if "plan" not in rep or "tolerance_profile" not in rep:
        raise UsageError(f"{a.report} is not a plan report")
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "gap_profile.csv", ["layer_id", "scale", "gap", "actual", "predicted", "pass"],
                [[p["layer_id"], p["scale"], p["gap"], p["actual"], p["predicted"], int(p["pass"])]
                 for p in rep["tolerance_profile"]["probes"]])
    _write_rows(out / "trajectories.csv", ["restart", "iteration", "J", "constraint_residual", "model_bits"],
                [[t["restart"], int(r[0]), *r[1:]] for t in rep.get("trajectories", []) for r in t["rows"]])
    _write_rows(out / "eigenvalues.csv", ["index", "eigenvalue"], list(enumerate(rep.get("eigenvalues", []))))
    _write_rows(out / "plan.csv", ["layer_id", "bits", "size", "delta_rms_budget", "achieved_quant_rms",
                                   "mapping_used", "fractional_bits"],
                [[l["layer_id"], l["bits"], l["size"], l["delta_rms_budget"], l["achieved_quant_rms"],
                  l["mapping_used"], l["fractional_bits"]] for l in rep["plan"]["layers"]])
    if a.checkpoint or a.calib or a.ablation_m:
        if not (a.checkpoint and a.calib and a.ablation_m):
            raise UsageError("the eigenvalue-count ablation needs --checkpoint, --calib and --ablation-m")
        _ablation(a, out, rep)


def _ablation(a, out: Path, rep: dict) -> None:
    from .harness import eigen_count_ablation
    from .io import load_checkpoint, load_dataset
    from .model import Objective
    from .spectral import dense_eig, materialize_hessian

    ckpt = load_checkpoint(_existing(a.checkpoint))
    calib = load_dataset(_existing(a.calib))
    sp = dense_eig(materialize_hessian(ckpt.spec, ckpt.params, calib), ckpt.params.segments)
    rows = eigen_count_ablation(Objective(ckpt.spec, calib), ckpt.params, sp, a.ablation_m,
                                target_bits_per_weight=rep["plan"]["meta"].get("target_bits_per_weight", 4.0),
                                seed=a.seed)
    _write_rows(out / "eigen_count_ablation.csv", list(rows[0]), [list(r.values()) for r in rows])


# ---- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .harness import GENERATORS

    p = argparse.ArgumentParser(prog="cetplan", description="Hessian-geometry mixed-precision bit planning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset and split it")
    g.add_argument("--generator", choices=sorted(GENERATORS), default="teacher_regression")
    g.add_argument("--n", type=int, default=1792)
    g.add_argument("--noise", type=float)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--splits", type=_splits, default="train=1024,calibration=256,eval=512",
                   help="comma list of name=count (names: train, calibration, eval)")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a toy MLP to a convergence point")
    t.add_argument("--data", required=True)
    t.add_argument("--arch", type=_int_list, default=[4, 16, 16, 2], help="layer widths, e.g. 4,16,16,2")
    t.add_argument("--activation", choices=["tanh", "relu", "none"], default="tanh")
    t.add_argument("--loss", choices=["mse", "cross_entropy"], default="mse")
    t.add_argument("--max-epochs", type=int, default=3000)
    t.add_argument("--grad-tol", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pl = sub.add_parser("plan", help="solve for per-layer bit widths")
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--calib", required=True)
    pl.add_argument("--target-bits", type=float, default=4.0, help="average bits per weight")
    pl.add_argument("--out", required=True)
    pl.add_argument("--report", help="report path (default: <out>.report.json)")
    pl.add_argument("--spectrum-cache")
    pl.add_argument("--m", type=int, default=200, help="number of short-axis eigenpairs")
    pl.add_argument("--eigenpairs", type=int, help="eigenpairs requested from Lanczos")
    pl.add_argument("--lanczos-iterations", type=int)
    pl.add_argument("--solver-iterations", type=int)
    pl.add_argument("--restarts", type=int, default=5)
    pl.add_argument("--aggregation", choices=["best_j", "median_budget"], default="best_j")
    pl.add_argument("--mapping", choices=["combined", "formula", "error_mapping"], default="combined")
    pl.add_argument("--allowed-bits", type=_int_list, default=list(ALLOWED_BITS))
    pl.add_argument("--negative-reward", action="store_true",
                    help="add negative-curvature eigenpairs to the objective")
    pl.add_argument("--seed", type=int, default=0)
    pl.set_defaults(func=cmd_plan)

    e = sub.add_parser("eval", help="quantize a checkpoint per plan and measure the loss change")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--plan", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("search", help="enumerate every bit assignment (at most 8 layers)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--allowed-bits", type=_int_list, default=list(ALLOWED_BITS))
    s.add_argument("--out", default="search.json")
    s.set_defaults(func=cmd_search)

    r = sub.add_parser("report", help="export a plan report as CSV files")
    r.add_argument("--report", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--checkpoint", help="with --calib and --ablation-m: also run the eigenvalue-count ablation")
    r.add_argument("--calib")
    r.add_argument("--ablation-m", type=_int_list)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads()
        a.func(a)
    except UsageError as e:
        print(f"cetplan {a.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CetError as e:
        label = e.stage or a.command
        msg = str(e)
        if not msg.startswith("["):
            msg = f"[{label}] {msg}"
        print(f"cetplan {a.command}: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    except FileNotFoundError as e:
        print(f"cetplan {a.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
