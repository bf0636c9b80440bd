"""Command-line surface: generate | train | evaluate | solve | report.

Every run writes a JSON manifest (command, configuration snapshot, seeds,
artifact paths, timing) into the output directory.  Exit codes: 0 success,
2 usage error, 3 configuration error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_NUMERICAL = 4


class ConfigurationError(RuntimeError):
    pass


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, check=False,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return f"v{__version__}"


def write_manifest(out_dir: Path, command: str, config: dict, seeds: dict,
                   artifacts: dict, elapsed: float) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "elapsed_seconds": round(elapsed, 3),
        "version": _git_describe(),
    }
    path = out_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def parse_range(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(":")
    return float(lo), float(hi)


def parse_layout(text: str) -> tuple[int, int]:
    """rows x cols, with an optional ':mask' suffix for the shaped presets
    (the L and I shapes imply their tile masks either way)."""
    base = text.lower().split(":", 1)[0]
    r, _, c = base.partition("x")
    return int(r), int(c)


def load_config_file(path: str) -> dict[str, str]:
    """key = value lines; '#' starts a comment."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neuraldd", description=__doc__)
    p.add_argument("--threads", type=int, default=None, help="torch CPU thread count")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a training dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--kind", default="voronoi",
                   choices=["voronoi", "graded_voronoi", "hexagonal", "fiber"])
    g.add_argument("--cells", type=int, default=50)
    g.add_argument("--nx", type=int, default=33)
    g.add_argument("--ny", type=int, default=None)
    g.add_argument("--range", default="0:10", help="coefficient range lo:hi")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="dataset.dsn")
    g.add_argument("--out-dir", default=".")

    t = sub.add_parser("train", help="train the surrogate operator")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--target", default="u", choices=["u", "grad"])
    t.add_argument("--widths", default="8,16,32")
    t.add_argument("--kernel-nodes", type=int, default=5)
    t.add_argument("--ckpt", default="model.ppn1")
    t.add_argument("--log", default=None, help="training-history CSV path")
    t.add_argument("--out-dir", default=".")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--target", default="u", choices=["u", "grad"])
    e.add_argument("--out", default=None, help="per-sample CSV path")
    e.add_argument("--out-dir", default=".")

    s = sub.add_parser("solve", help="run the Schwarz iteration")
    s.add_argument("--config", default=None, help="key=value experiment file")
    s.add_argument("--shape", default="square", choices=["square", "rectangle", "L", "I"])
    s.add_argument("--layout", default="2x2", help="rows x cols lattice")
    s.add_argument("--overlap", type=float, default=0.3125)
    s.add_argument("--window-nodes", type=int, default=33)
    s.add_argument("--solver", default="oracle", choices=["oracle", "surrogate"])
    s.add_argument("--ckpt", default=None, help="surrogate checkpoint")
    s.add_argument("--grad-ckpt", default=None, help="optional gradient-model checkpoint")
    s.add_argument("--kind", default="voronoi",
                   choices=["voronoi", "graded_voronoi", "hexagonal", "fiber"])
    s.add_argument("--cells", type=int, default=None, help="default: 50 per window area")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--boundary-file", default=None)
    s.add_argument("--boundary-seed", type=int, default=None)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--tol-mode", default="rel", choices=["rel", "abs"])
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--mode", default="additive", choices=["additive", "alternating"])
    s.add_argument("--no-direct", action="store_true",
                   help="skip the global direct solve (no iterative-error column)")
    s.add_argument("--out-dir", default="solve-out")

    r = sub.add_parser("report", help="figure-ready CSV/PGM exports")
    rsub = r.add_subparsers(dest="report_kind", required=True)

    rf = rsub.add_parser("field", help="render a stored field as PGM + CSV")
    rf.add_argument("--infile", required=True, help="GFN1 container")
    rf.add_argument("--out-prefix", default="field")
    rf.add_argument("--out-dir", default=".")

    rh = rsub.add_parser("history", help="extract error-vs-iteration data")
    rh.add_argument("--infile", required=True, help="history CSV from solve")
    rh.add_argument("--out", default="errors.csv")
    rh.add_argument("--out-dir", default=".")

    ro = rsub.add_parser("ood", help="grain-count robustness sweep")
    ro.add_argument("--ckpt", required=True)
    ro.add_argument("--counts", default="5,10,50,100")
    ro.add_argument("--n", type=int, default=20, help="samples per grain count")
    ro.add_argument("--nx", type=int, default=33)
    ro.add_argument("--seed", type=int, default=0)
    ro.add_argument("--out", default="ood.csv")
    ro.add_argument("--out-dir", default=".")
    return p


def cmd_generate(args) -> int:
    from .grid import GridSpec
    from .microstructure import MicrostructureRecipe
    from .training import generate_dataset, save_dataset

    t0 = time.time()
    spec = GridSpec(args.nx, args.ny or args.nx)
    recipe = MicrostructureRecipe(args.kind, cell_count=args.cells,
                                  value_range=parse_range(args.range))
    ds = generate_dataset(args.n, recipe, spec, seed=args.seed)
    out = Path(args.out_dir) / args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    write_manifest(Path(args.out_dir), "generate",
                   {"n": args.n, "kind": args.kind, "cells": args.cells,
                    "nx": args.nx, "ny": args.ny or args.nx, "range": args.range},
                   {"seed": args.seed}, {"dataset": out}, time.time() - t0)
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .operator import NeuralOperator, OperatorConfig, save_checkpoint
    from .training import TrainConfig, TrainingError, load_dataset, train

    t0 = time.time()
    data = Path(args.data)
    if not data.exists():
        raise ConfigurationError(f"dataset {data} does not exist")
    ds = load_dataset(data)
    widths = tuple(int(w) for w in args.widths.split(","))
    model_cfg = OperatorConfig(
        depth=len(widths), widths=widths, kernel_nodes=args.kernel_nodes,
        nominal_level=ds.spec.nx,
        out_channels=1 if args.target == "u" else 2,
    )
    model = NeuralOperator(model_cfg, seed=args.seed)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch,
                      seed=args.seed, target=args.target)
    if args.lr == 0.0:
        print("warning: zero learning rate, parameters will not move", file=sys.stderr)
    try:
        result = train(model, ds, cfg)
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    ckpt = Path(args.out_dir) / args.ckpt
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    artifacts = {"checkpoint": ckpt}
    if args.log:
        log = Path(args.out_dir) / args.log
        result.write_log(log)
        artifacts["log"] = log
    write_manifest(Path(args.out_dir), "train",
                   {"epochs": args.epochs, "lr": args.lr, "batch": args.batch,
                    "target": args.target, "widths": list(widths),
                    "kernel_nodes": args.kernel_nodes, "data": str(data)},
                   {"seed": args.seed}, artifacts, time.time() - t0)
    print(f"best val rel-L2 {result.best_val_rls:.4g} (epoch {result.best_epoch}); "
          f"final {result.final_val_rls:.4g}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .operator import load_checkpoint
    from .training import evaluate, load_dataset

    t0 = time.time()
    for path in (args.ckpt, args.data):
        if not Path(path).exists():
            raise ConfigurationError(f"{path} does not exist")
    model = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    rep = evaluate(model, ds, target=args.target)
    artifacts = {}
    if args.out:
        out = Path(args.out_dir) / args.out
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            fh.write("sample,relative_l2\n")
            for i, v in enumerate(rep.per_sample):
                fh.write(f"{i},{v!r}\n")
        artifacts["per_sample"] = out
    write_manifest(Path(args.out_dir), "evaluate",
                   {"ckpt": args.ckpt, "data": args.data, "target": args.target},
                   {}, artifacts, time.time() - t0)
    print(f"mean rel-L2 {rep.mean_rls:.6g}, median {rep.median_rls:.6g} over {len(rep.per_sample)} samples")
    return EXIT_OK


def _solve_boundary(args, layout):
    from .boundary import draw_boundary_params, load_boundary_params
    from .microstructure import make_rng
    from .schwarz import exterior_trace

    if args.boundary_file:
        if not Path(args.boundary_file).exists():
            raise ConfigurationError(f"boundary file {args.boundary_file} does not exist")
        params = load_boundary_params(args.boundary_file)
    else:
        seed = args.boundary_seed if args.boundary_seed is not None else args.seed + 1
        params = draw_boundary_params(make_rng(seed))
    return exterior_trace(layout, params), params


def cmd_solve(args) -> int:
    from .grid import GridFunction, save_grid_function
    from .microstructure import MicrostructureRecipe, generate
    from .operator import load_checkpoint
    from .schwarz import (
        SHAPE_BUILDERS,
        NeuralGradientSolver,
        NeuralLocalSolver,
        OracleGradientSolver,
        OracleLocalSolver,
        decompose,
        direct_solve,
        gradient_pipeline,
        iterate,
    )

    t0 = time.time()
    if args.config:
        overrides = load_config_file(args.config)
        for key, val in overrides.items():
            attr = key.replace("-", "_")
            if not hasattr(args, attr):
                raise ConfigurationError(f"unknown config key {key!r}")
            cur = getattr(args, attr)
            if isinstance(cur, bool):
                val = val.lower() in ("1", "true", "yes")
            elif isinstance(cur, int):
                val = int(val)
            elif isinstance(cur, float):
                val = float(val)
            elif cur is None:
                # untyped default: take the narrowest numeric reading
                for cast in (int, float):
                    try:
                        val = cast(val)
                        break
                    except ValueError:
                        continue
            setattr(args, attr, val)

    rows, cols = parse_layout(args.layout)
    shape = SHAPE_BUILDERS[args.shape](rows, cols)
    layout = decompose(shape, window_nodes=args.window_nodes, overlap=args.overlap)

    if args.solver == "surrogate":
        if not args.ckpt:
            raise ConfigurationError("surrogate solver needs --ckpt")
        if not Path(args.ckpt).exists():
            raise ConfigurationError(f"checkpoint {args.ckpt} does not exist")
        solver = NeuralLocalSolver(load_checkpoint(args.ckpt))
    else:
        solver = OracleLocalSolver()

    cells = args.cells
    if cells is None:
        area = (layout.global_spec.x1 - layout.global_spec.x0) * (layout.global_spec.y1 - layout.global_spec.y0)
        cells = max(1, round(50 * area))
    recipe = MicrostructureRecipe(args.kind, cell_count=cells, seed=args.seed)
    a = generate(recipe, layout.global_spec)
    g, params = _solve_boundary(args, layout)

    truth = None if args.no_direct else direct_solve(layout, a, g)
    res = iterate(layout, a, g, solver, tol=args.tol, tol_mode=args.tol_mode,
                  max_iter=args.max_iter, mode=args.mode, truth=truth)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hist = out_dir / "history.csv"
    res.write_history(hist)
    sol = out_dir / "solution.gfn"
    save_grid_function(GridFunction(layout.global_spec, res.u), sol)
    artifacts = {"history": hist, "solution": sol}

    if truth is not None:
        ref = out_dir / "direct.gfn"
        save_grid_function(GridFunction(layout.global_spec, truth), ref)
        artifacts["direct"] = ref

    if args.grad_ckpt:
        if not Path(args.grad_ckpt).exists():
            raise ConfigurationError(f"checkpoint {args.grad_ckpt} does not exist")
        gsolver = NeuralGradientSolver(load_checkpoint(args.grad_ckpt))
        grad = gradient_pipeline(layout, a, res.u, gsolver)
        gout = out_dir / "gradient.gfn"
        save_grid_function(GridFunction(layout.global_spec, grad), gout)
        artifacts["gradient"] = gout
    elif args.solver == "oracle" and truth is not None:
        grad = gradient_pipeline(layout, a, res.u, OracleGradientSolver())
        gout = out_dir / "gradient.gfn"
        save_grid_function(GridFunction(layout.global_spec, grad), gout)
        artifacts["gradient"] = gout

    summary = {
        "converged": res.converged,
        "iterations": res.iterations,
        "final_successive_error": res.history[-1][1],
        "threshold": res.threshold,
    }
    if truth is not None:
        summary["relative_l2_vs_direct"] = layout.masked_relative_l2(res.u, truth)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_manifest(out_dir, "solve",
                   {"shape": args.shape, "layout": args.layout, "overlap": args.overlap,
                    "window_nodes": args.window_nodes, "solver": args.solver,
                    "kind": args.kind, "cells": cells, "tol": args.tol,
                    "tol_mode": args.tol_mode, "max_iter": args.max_iter,
                    "mode": args.mode, "windows": len(layout.windows)},
                   {"seed": args.seed, "boundary_seed": args.boundary_seed,
                    "boundary_s0": params.s0},
                   artifacts, time.time() - t0)
    msg = "converged" if res.converged else "NOT converged"
    print(f"{msg} after {res.iterations} sweeps; S = {res.history[-1][1]:.3e}"
          + (f"; rel-L2 vs direct = {summary['relative_l2_vs_direct']:.3e}" if truth is not None else ""))
    return EXIT_OK if res.converged else EXIT_NUMERICAL


def write_pgm(path, values: np.ndarray) -> None:
    """Plain (P2) portable graymap, min-max scaled to 0..255."""
    lo, hi = float(values.min()), float(values.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.round((values - lo) * scale).astype(int)
    pix = pix[::-1, :]  # image rows top-down, grid rows bottom-up
    with open(path, "w") as fh:
        fh.write(f"P2\n{pix.shape[1]} {pix.shape[0]}\n255\n")
        for row in pix:
            fh.write(" ".join(str(v) for v in row) + "\n")


def cmd_report(args) -> int:
    t0 = time.time()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.report_kind == "field":
        from .grid import load_grid_function

        if not Path(args.infile).exists():
            raise ConfigurationError(f"{args.infile} does not exist")
        f = load_grid_function(args.infile)
        artifacts = {}
        for c in range(f.channels):
            suffix = f"-c{c}" if f.channels > 1 else ""
            pgm = out_dir / f"{args.out_prefix}{suffix}.pgm"
            write_pgm(pgm, f.data[:, :, c])
            artifacts[f"pgm{suffix}"] = pgm
        csv_path = out_dir / f"{args.out_prefix}.csv"
        with open(csv_path, "w") as fh:
            fh.write("x,y," + ",".join(f"c{c}" for c in range(f.channels)) + "\n")
            xs, ys = f.spec.xs(), f.spec.ys()
            for j in range(f.spec.ny):
                for i in range(f.spec.nx):
                    vals = ",".join(repr(v) for v in f.data[j, i])
                    fh.write(f"{xs[i]!r},{ys[j]!r},{vals}\n")
        artifacts["csv"] = csv_path
        write_manifest(out_dir, "report", {"kind": "field", "infile": args.infile}, {},
                       artifacts, time.time() - t0)
        print(f"wrote {csv_path}")
        return EXIT_OK

    if args.report_kind == "history":
        import csv as csvmod

        if not Path(args.infile).exists():
            raise ConfigurationError(f"{args.infile} does not exist")
        out = out_dir / args.out
        with open(args.infile) as fh, open(out, "w", newline="") as oh:
            reader = csvmod.reader(fh)
            writer = csvmod.writer(oh)
            header = next(reader)
            if header[:2] != ["iteration", "successive_error"]:
                raise ConfigurationError(f"{args.infile} is not a solve history file")
            writer.writerow(header)
            for row in reader:
                writer.writerow(row)
        write_manifest(out_dir, "report", {"kind": "history", "infile": args.infile}, {},
                       {"out": out}, time.time() - t0)
        print(f"wrote {out}")
        return EXIT_OK

    # ood sweep
    from .grid import GridSpec
    from .operator import load_checkpoint
    from .training import grain_count_sweep

    if not Path(args.ckpt).exists():
        raise ConfigurationError(f"checkpoint {args.ckpt} does not exist")
    model = load_checkpoint(args.ckpt)
    counts = tuple(int(c) for c in args.counts.split(","))
    sweep = grain_count_sweep(model, GridSpec(args.nx, args.nx), counts,
                              per_count=args.n, seed=args.seed)
    out = out_dir / args.out
    with open(out, "w") as fh:
        fh.write("grain_count,mean_relative_l2\n")
        for count in counts:
            fh.write(f"{count},{sweep[count]!r}\n")
    write_manifest(out_dir, "report",
                   {"kind": "ood", "ckpt": args.ckpt, "counts": list(counts), "n": args.n},
                   {"seed": args.seed}, {"out": out}, time.time() - t0)
    print(f"wrote {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    handlers = {
        "generate": cmd_generate,
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "solve": cmd_solve,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
