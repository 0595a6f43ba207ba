"""Command-line entry point.

Every subcommand that writes results takes ``--out DIR`` and leaves
``run_config`` (the fully resolved arguments, JSON) and ``log.txt`` there next
to its tables and curves.  Exit codes: 0 success, 2 invalid input, 3 I/O
failure, 4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import geometry as geo
from .datagen import (
    ConfigRange,
    DatagenError,
    generate_sample,
    read_dataset,
    sample_configs,
    sample_rng,
    write_dataset,
)
from .evaluation import REFERENCE_ROWS, AlignmentMismatch, MaeTable, ablate, evaluate
from .geometry import CameraParams
from .gradcheck import run_gradcheck
from .loss import LADDER, LossConfig, LossError
from .solver import SolveOptions, TrainOptions, initial_guess, solve_sample, split_indices, train_regressor

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3
EXIT_GRADCHECK = 4

_LOG = logging.getLogger("calibloss")


class InvalidInput(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("UGCL_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InvalidInput(f"UGCL_SEED must be an integer, got {raw!r}") from None


# -- argument parsing -------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (default: $UGCL_SEED or 0)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap; runs are single-threaded, so values above 1 change nothing")
    if out:
        p.add_argument("--out", required=True, help="output directory")


def _add_loss(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="VP-WC-R", choices=LADDER,
                   help="constraint groups (ladder rung)")
    p.add_argument("--variant", default="disentangled", choices=("plain", "disentangled"))
    p.add_argument("--weights", default="fixed", choices=("fixed", "learnable"),
                   help="fixed: every sigmoid(omega) = 0.5")
    p.add_argument("--axis-planes", action="store_true",
                   help="add the axis-plane residuals to the constraint group")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=32, help="samples per optimizer step")
    p.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    p.add_argument("--freeze-omega", action="store_true", help="keep learnable weights at their start value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calibloss",
        description="Stereo calibration with geometric-constraint losses.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset (JSON Lines)")
    g.add_argument("--count", type=int, default=900, help="number of camera configurations")
    g.add_argument("--out", required=True, help="dataset file to write")
    g.add_argument("--range-file", help="JSON file with sampling intervals (angles in radians, or *_deg keys)")
    g.add_argument("--pitch-deg", type=float, nargs=2, metavar=("LO", "HI"), help="pitch interval, degrees")
    g.add_argument("--fov-deg", type=float, nargs=2, metavar=("LO", "HI"), help="field of view interval, degrees")
    g.add_argument("--points", type=int, help="correspondences per sample")
    _add_common(g, out=False)

    s = sub.add_parser("solve", help="per-sample recovery from perturbed starts")
    s.add_argument("--dataset", required=True)
    s.add_argument("--limit", type=int, default=100, help="solve the first N samples")
    s.add_argument("--init", default="perturbed", choices=("perturbed", "midpoint", "gt"))
    s.add_argument("--perturb", type=float, default=0.2, help="relative perturbation of each parameter")
    s.add_argument("--lr", type=float, default=SolveOptions.lr, help="Adam learning rate, normalized units")
    s.add_argument("--lr-decay", type=float, default=SolveOptions.lr_decay, help="per-iteration decay")
    s.add_argument("--max-iters", type=int, default=SolveOptions.max_iters)
    s.add_argument("--tol", type=float, default=SolveOptions.tol, help="stop when L_total drops below")
    _add_loss(s)
    _add_common(s)

    t = sub.add_parser("train", help="train the correspondence regressor")
    t.add_argument("--dataset", required=True)
    _add_loss(t)
    _add_train(t)
    _add_common(t)

    e = sub.add_parser("evaluate", help="MAE table of predictions against a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--predictions", required=True,
                   help="JSON Lines, one object of the ten parameters per sample, in dataset order")
    e.add_argument("--name", default="predictions", help="row label")
    e.add_argument("--reference", action="store_true", help="append the published reference rows")
    _add_common(e)

    a = sub.add_parser("ablate", help="train one regressor per ladder rung")
    a.add_argument("--dataset", required=True)
    a.add_argument("--variant", default="disentangled", choices=("plain", "disentangled"))
    a.add_argument("--weights", default="fixed", choices=("fixed", "learnable"))
    _add_train(a)
    _add_common(a)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss configuration")
    c.add_argument("--trials", type=int, default=100)
    _add_common(c, out=False)

    k = sub.add_parser("check", help="constraint residuals of a 3x4 matrix or a parameter file")
    k.add_argument("file", help="whitespace-separated 3x4 matrix, or JSON with the ten parameters (theta_p in radians)")
    return parser


# -- helpers ----------------------------------------------------------------


def _setup_out(out: str | os.PathLike, args: argparse.Namespace, extra: dict) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    cfg = {"subcommand": args.command}
    cfg.update({k: v for k, v in sorted(vars(args).items()) if k != "command"})
    cfg.update(extra)
    (path / "run_config").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    handler = logging.FileHandler(path / "log.txt", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    _LOG.addHandler(handler)
    return path


def _loss_config(args: argparse.Namespace) -> LossConfig:
    return LossConfig(
        variant=args.variant,
        constraints=frozenset(args.config.split("-")),
        weights=args.weights,
        include_axis_planes=getattr(args, "axis_planes", False),
    )


def _load(path: str):
    header, samples = read_dataset(path)
    if not samples:
        raise InvalidInput("dataset is empty")
    return header, samples


def _train_options(args: argparse.Namespace) -> TrainOptions:
    if args.epochs < 1 or args.batch < 1 or not args.lr > 0:
        raise InvalidInput("epochs and batch must be >= 1 and lr > 0")
    return TrainOptions(epochs=args.epochs, batch=args.batch, lr=args.lr,
                        freeze_omega=args.freeze_omega, seed=args.seed)


# -- subcommands ------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    if args.count < 1:
        raise InvalidInput(f"--count must be >= 1, got {args.count}")
    data = {}
    if args.range_file:
        data = json.loads(Path(args.range_file).read_text())
        if not isinstance(data, dict):
            raise InvalidInput("range file must hold a JSON object")
    if args.pitch_deg:
        data.pop("pitch", None)
        data["pitch_deg"] = list(args.pitch_deg)
    if args.fov_deg:
        data.pop("fov", None)
        data["fov_deg"] = list(args.fov_deg)
    if args.points is not None:
        data["points"] = args.points
    rng_range = ConfigRange.from_dict(data)
    configs = sample_configs(rng_range, args.count, args.seed)
    samples = (generate_sample(c, rng_range, sample_rng(args.seed, i), i) for i, c in enumerate(configs))
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    digest = write_dataset(out, samples, rng_range, args.seed, count=args.count)
    print(f"wrote {args.count} samples to {out}")
    for name, (lo, hi) in rng_range.param_bounds().items():
        print(f"  {name:8s} [{lo:.6g}, {hi:.6g}] {geo.PARAM_UNITS[name]}")
    print(f"checksum {digest}")
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    header, samples = _load(args.dataset)
    cfg = _loss_config(args)
    opts = SolveOptions(lr=args.lr, lr_decay=args.lr_decay, max_iters=args.max_iters,
                        tol=args.tol, perturb=args.perturb)
    samples = samples[: args.limit]
    out = _setup_out(args.out, args, {"loss": cfg.to_dict(), "solver": opts.to_dict(),
                                      "range": header.range.to_dict()})
    preds, curves = [], ["sample,iteration,L_total,L_Cam,L_3D,L_con"]
    for s in samples:
        rng = np.random.default_rng([args.seed, s.id])
        init = initial_guess(s.gt, args.init, header.range, rng, args.perturb)
        res = solve_sample(s, cfg, init, opts, header.range)
        preds.append(res.params)
        for i, r in enumerate(res.trace):
            curves.append(f"{s.id},{i},{r.L_total!r},{r.L_Cam!r},{r.L_3D!r},{r.L_con!r}")
        _LOG.info("sample %d: %d iterations, final L_total %.6g", s.id, res.iterations, res.trace[-1].L_total)
    table = MaeTable(metadata={"dataset": header.checksum, "samples": len(samples), "seed": args.seed,
                               "model": "per-sample solve", "init": args.init})
    name = f"solve-{cfg.rung}"
    table.add_row(name, evaluate(preds, samples))
    (out / "mae_table.txt").write_text(table.to_text())
    (out / "mae_table.csv").write_text(table.to_csv())
    (out / f"curves_{name}.csv").write_text("\n".join(curves) + "\n")
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    header, samples = _load(args.dataset)
    cfg = _loss_config(args)
    opts = _train_options(args)
    out = _setup_out(args.out, args, {"loss": cfg.to_dict(), "train": opts.to_dict(),
                                      "range": header.range.to_dict()})

    def progress(row: dict) -> None:
        _LOG.info("epoch %d: val L_total %.6g", row["epoch"], row["L_total"])

    model, log = train_regressor(samples, cfg, opts, header.range, progress)
    _, val_idx = split_indices(len(samples), opts.seed, opts.val_fraction)
    val = [samples[i] for i in val_idx]
    table = MaeTable(metadata={"dataset": header.checksum, "samples": len(samples),
                               "validation_samples": len(val), "seed": opts.seed,
                               "model": "desk-scale correspondence regressor"})
    name = f"UGCL-{cfg.rung}"
    table.add_row(name, evaluate(model.predict(val), val))
    (out / "mae_table.txt").write_text(table.to_text())
    (out / "mae_table.csv").write_text(table.to_csv())
    (out / f"curves_{name}.csv").write_text(log.to_csv())
    for epoch in log.collapsed_epochs:
        _LOG.warning("weight collapse at epoch %d", epoch)
    print(table.to_text(), end="")
    return EXIT_OK


def _read_predictions(path: str) -> list[CameraParams]:
    preds = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                preds.append(CameraParams.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InvalidInput(f"{path}:{n}: {exc}") from exc
    return preds


def cmd_evaluate(args: argparse.Namespace) -> int:
    header, samples = _load(args.dataset)
    preds = _read_predictions(args.predictions)
    out = _setup_out(args.out, args, {})
    table = MaeTable(metadata={"dataset": header.checksum, "samples": len(samples), "seed": args.seed})
    table.add_row(args.name, evaluate(preds, samples))
    if args.reference:
        for name, row in REFERENCE_ROWS.items():
            table.add_row(f"reference:{name}", row)
    (out / "mae_table.txt").write_text(table.to_text())
    (out / "mae_table.csv").write_text(table.to_csv())
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    header, samples = _load(args.dataset)
    opts = _train_options(args)
    out = _setup_out(args.out, args, {"train": opts.to_dict(), "ladder": list(LADDER),
                                      "range": header.range.to_dict()})
    result = ablate(samples, LADDER, opts, header.range, args.variant, args.weights, out,
                    metadata={"dataset": header.checksum})
    for name, log in result.logs.items():
        _LOG.info("%s: final val L_total %.6g", name, log.rows[-1]["L_total"])
    print(result.table.to_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.trials < 1:
        raise InvalidInput("--trials must be >= 1")
    report = run_gradcheck(args.trials, args.seed)
    for line in report.lines():
        print(line)
    print(f"re-drawn points near abs kinks: {report.resamples}")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def _read_check_input(path: str) -> geo.ProjectionModel:
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
            params = CameraParams.from_dict(data.get("params", data))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InvalidInput(f"bad parameter file: {exc}") from exc
        return geo.compose_projection(params)
    try:
        vals = [float(v) for v in text.split()]
    except ValueError as exc:
        raise InvalidInput(f"bad matrix file: {exc}") from exc
    if len(vals) != 12:
        raise InvalidInput(f"expected 12 numbers (3x4 matrix), got {len(vals)}")
    try:
        return geo.model_from_matrix([vals[0:4], vals[4:8], vals[8:12]])
    except geo.GeometryError as exc:
        raise InvalidInput(str(exc)) from exc


def _fmt_point(pt, finite: bool) -> str:
    if not finite:
        return "infinite (divisor below threshold)"
    return f"({pt[0]:.10g}, {pt[1]:.10g}) finite"


def cmd_check(args: argparse.Namespace) -> int:
    model = _read_check_input(args.file)
    rot = geo.rotation_residuals(model.R)
    axis = geo.axis_plane_residuals(model)
    tg = geo.constraint_targets(model)
    names = ("r1.r2", "r1.r3", "r2.r3", "|RR^T-I|_F", "det(R)-1")
    print("rotation residuals")
    for n, v in zip(names, rot):
        print(f"  {n:12s} {v: .10g}")
    print("axis-plane residuals")
    for n, v in zip(("rows 1,2", "rows 1,3", "rows 2,3"), axis):
        print(f"  {n:12s} {v: .10g}")
    print("vanishing points and world center")
    for n, pt, ok in zip(("V_x", "V_y", "V_z", "W_c"), (tg.V_x, tg.V_y, tg.V_z, tg.W_c), tg.finite):
        print(f"  {n:12s} {_fmt_point(pt, ok)}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "check": cmd_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _LOG.setLevel(logging.INFO)
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = default_seed()
        if getattr(args, "threads", 1) < 1:
            raise InvalidInput("--threads must be >= 1")
        start = time.perf_counter()
        code = COMMANDS[args.command](args)
        print(f"done in {time.perf_counter() - start:.1f} s", file=sys.stderr)
        return code
    except (InvalidInput, DatagenError, LossError, AlignmentMismatch, geo.GeometryError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        for h in list(_LOG.handlers):
            _LOG.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
