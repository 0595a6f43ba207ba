"""MAE tables, the ablation ladder and the recovery experiment."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import ConfigRange, Sample
from .geometry import PARAM_NAMES, PARAM_UNITS, TABLE_ORDER, CameraParams
from .loss import LADDER, LossConfig
from .solver import Normalizer, SolveOptions, TrainOptions, solve_sample, split_indices, train_regressor

__all__ = [
    "AlignmentMismatch",
    "MaeTable",
    "evaluate",
    "REFERENCE_ROWS",
    "ablate",
    "AblationResult",
    "RecoveryReport",
    "recovery_experiment",
    "INTRINSICS",
    "mean_intrinsic_mae",
]

INTRINSICS = ("fx", "fy", "px", "py")
COLUMN_LABELS = {"theta_p": "tp"}
REGRESSOR_NOTE = "desk-scale correspondence regressor (stand-in for an image backbone)"

# Published MAE rows, kept for side-by-side reading only; they are not targets.
REFERENCE_ROWS = {
    "headline/UGCL-VP-WC-R": (1.747, 1.804, 0.139, 0.089, 0.143, 2.542, 0.200, 0.125, 0.126, 0.009),
    "ablation/UGCL-VP": (1.979, 1.973, 0.334, 0.438, 0.143, 2.616, 0.200, 0.125, 0.126, 0.009),
    "ablation/UGCL-VP-WC": (1.875, 1.900, 0.253, 0.129, 0.143, 2.640, 0.200, 0.125, 0.125, 0.013),
    "ablation/UGCL-VP-WC-R": (1.747, 1.804, 0.139, 0.089, 0.143, 2.542, 0.200, 0.125, 0.126, 0.009),
}


class AlignmentMismatch(ValueError):
    pass


@dataclass
class MaeTable:
    """Per-method MAE rows; columns in ``TABLE_ORDER`` and raw units."""

    rows: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add_row(self, name: str, values: Sequence[float]) -> None:
        values = tuple(float(v) for v in values)
        if len(values) != len(TABLE_ORDER):
            raise ValueError(f"expected {len(TABLE_ORDER)} values, got {len(values)}")
        if any(not v >= 0.0 for v in values):
            raise ValueError("MAE values must be non-negative")
        self.rows[name] = values

    def row(self, name: str) -> dict[str, float]:
        return dict(zip(TABLE_ORDER, self.rows[name]))

    @staticmethod
    def header() -> list[str]:
        return [COLUMN_LABELS.get(n, n) for n in TABLE_ORDER]

    @staticmethod
    def units() -> list[str]:
        return [PARAM_UNITS[n] for n in TABLE_ORDER]

    def to_text(self) -> str:
        width = max([len("method")] + [len(n) for n in self.rows]) + 2
        lines = [f"# {k}: {v}" for k, v in sorted(self.metadata.items())]
        lines.append("method".ljust(width) + "".join(h.rjust(11) for h in self.header()))
        lines.append("units".ljust(width) + "".join(u.rjust(11) for u in self.units()))
        for name, vals in self.rows.items():
            lines.append(name.ljust(width) + "".join(f"{v:11.4f}" for v in vals))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for k, v in sorted(self.metadata.items()):
            w.writerow([f"# {k}", v])
        w.writerow(["method"] + self.header())
        w.writerow(["units"] + self.units())
        for name, vals in self.rows.items():
            w.writerow([name] + [repr(v) for v in vals])
        return buf.getvalue()


def evaluate(predictions: Sequence[CameraParams], samples: Sequence[Sample]) -> tuple[float, ...]:
    """Per-parameter MAE in raw units, ``TABLE_ORDER`` columns."""
    if len(predictions) != len(samples):
        raise AlignmentMismatch(f"{len(predictions)} predictions for {len(samples)} samples")
    if not samples:
        raise AlignmentMismatch("nothing to evaluate")
    pred = np.array([p.values() for p in predictions])
    gt = np.array([s.gt.values() for s in samples])
    err = np.abs(pred - gt).mean(axis=0)
    return tuple(float(err[PARAM_NAMES.index(n)]) for n in TABLE_ORDER)


def mean_intrinsic_mae(row: Sequence[float]) -> float:
    return float(np.mean([row[TABLE_ORDER.index(n)] for n in INTRINSICS]))


@dataclass
class AblationResult:
    table: MaeTable
    logs: dict  # rung -> TrainLog
    models: dict  # rung -> TinyRegressor


def ablate(
    dataset: Sequence[Sample],
    ladder: Sequence[str] = LADDER,
    opts: TrainOptions = TrainOptions(),
    rng_range: ConfigRange | None = None,
    variant: str = "disentangled",
    weights: str = "fixed",
    out_dir: str | Path | None = None,
    metadata: dict | None = None,
) -> AblationResult:
    """Train one regressor per ladder rung with identical data, split and seed.

    Rows are the validation-split MAE of each rung, in ladder order.  With
    ``out_dir`` the table and one loss-curve CSV per rung are written there.
    """
    rng_range = rng_range or ConfigRange()
    _, val_idx = split_indices(len(dataset), opts.seed, opts.val_fraction)
    val = [dataset[i] for i in val_idx]
    table = MaeTable(metadata={
        "model": REGRESSOR_NOTE,
        "samples": len(dataset),
        "validation_samples": len(val),
        "seed": opts.seed,
        "epochs": opts.epochs,
        "variant": variant,
        "weights": weights,
        **(metadata or {}),
    })
    logs, models = {}, {}
    for rung in ladder:
        cfg = LossConfig.from_ladder(rung, variant=variant, weights=weights)
        model, log = train_regressor(dataset, cfg, opts, rng_range)
        name = f"UGCL-{rung}"
        table.add_row(name, evaluate(model.predict(val), val))
        logs[name] = log
        models[name] = model
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "mae_table.txt").write_text(table.to_text())
        (out / "mae_table.csv").write_text(table.to_csv())
        for name, log in logs.items():
            (out / f"curves_{name}.csv").write_text(log.to_csv())
    return AblationResult(table, logs, models)


@dataclass
class RecoveryReport:
    errors: np.ndarray  # (n_solved, 10) normalized absolute errors, PARAM_NAMES order
    tolerance: float
    elapsed: float
    requested: int
    iterations: list

    @property
    def solved(self) -> int:
        return len(self.errors)

    @property
    def successes(self) -> int:
        if not self.solved:
            return 0
        return int(np.sum(self.errors.max(axis=1) < self.tolerance))


def recovery_experiment(
    samples: Sequence[Sample],
    cfg: LossConfig,
    opts: SolveOptions = SolveOptions(),
    rng_range: ConfigRange | None = None,
    seed: int = 0,
    tolerance: float = 1e-3,
    time_budget: float | None = None,
) -> RecoveryReport:
    """Solve every sample from a perturbed start and record normalized errors.

    With ``time_budget`` (seconds) the run stops once the budget is spent;
    unsolved samples then count as failures.
    """
    rng_range = rng_range or ConfigRange()
    norm = Normalizer(rng_range)
    errors, iterations = [], []
    start = time.perf_counter()
    for s in samples:
        if time_budget is not None and time.perf_counter() - start > time_budget:
            break
        rng = np.random.default_rng([seed, s.id])
        res = solve_sample(s, cfg, "perturbed", opts, rng_range, rng)
        errors.append(np.abs(norm.to_unit(res.params.values()) - norm.to_unit(s.gt.values())))
        iterations.append(res.iterations)
    elapsed = time.perf_counter() - start
    arr = np.array(errors) if errors else np.zeros((0, 10))
    return RecoveryReport(arr, tolerance, elapsed, len(samples), iterations)
