"""Gradient-based calibration: per-sample solves and a small regressor.

Both paths minimize ``L_total`` with adaptive-moment gradient descent.  The
per-sample solver optimizes the ten camera parameters of one sample directly,
in coordinates normalized to [0, 1] by the sampling ranges.  The regressor is
a one-hidden-layer network from stereo correspondences to parameters; it is a
desk-scale stand-in for an image backbone, not a model of one.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datagen import ConfigRange, Sample
from .diff import Tape
from .geometry import PARAM_NAMES, CameraParams
from .loss import N_OMEGA, LossConfig, LossReport, evaluate_loss, loss_and_grad

__all__ = [
    "SolverError",
    "NonFiniteLoss",
    "OptimState",
    "SolveOptions",
    "SolveResult",
    "Normalizer",
    "initial_guess",
    "solve_sample",
    "TinyRegressor",
    "TrainOptions",
    "TrainLog",
    "train_regressor",
    "split_indices",
    "features",
    "TRAINLOG_HEADER",
    "POSITIVE_PARAMS",
]

_LOG = logging.getLogger(__name__)

POSITIVE_PARAMS = ("fx", "fy", "b", "d")
_POS_IDX = tuple(PARAM_NAMES.index(n) for n in POSITIVE_PARAMS)


class SolverError(RuntimeError):
    pass


class NonFiniteLoss(SolverError):
    """Raised when a loss or gradient stops being finite; carries the trace so far."""

    def __init__(self, message: str, trace: Sequence = ()) -> None:
        super().__init__(message)
        self.trace = list(trace)


@dataclass
class OptimState:
    """Adam state over a flat parameter vector."""

    params: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step_count: int = 0
    epoch: int = 0

    def __post_init__(self) -> None:
        self.params = np.array(self.params, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(self.params)
        if self.v is None:
            self.v = np.zeros_like(self.params)
        if self.m.shape != self.params.shape or self.v.shape != self.params.shape:
            raise ValueError("moment shapes must match the parameter vector")

    def step(self, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        """One update in place; returns the new parameters."""
        grad = np.asarray(grad, dtype=float)
        if grad.shape != self.params.shape:
            raise ValueError(f"gradient shape {grad.shape} != {self.params.shape}")
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** t)
        v_hat = self.v / (1.0 - self.beta2 ** t)
        self.params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return self.params


# -- per-sample solve -------------------------------------------------------


class Normalizer:
    """Affine map between raw parameters and [0, 1] over the sampling ranges."""

    def __init__(self, rng_range: ConfigRange) -> None:
        bounds = rng_range.param_bounds()
        self.lo = np.array([bounds[n][0] for n in PARAM_NAMES], dtype=float)
        hi = np.array([bounds[n][1] for n in PARAM_NAMES], dtype=float)
        span = hi - self.lo
        # collapsed intervals still need a usable scale
        self.span = np.where(span > 0.0, span, np.maximum(np.abs(self.lo), 1.0))

    def to_unit(self, raw: Sequence[float]) -> np.ndarray:
        return (np.asarray(raw, dtype=float) - self.lo) / self.span

    def to_raw(self, unit: Sequence[float]) -> np.ndarray:
        return self.lo + self.span * np.asarray(unit, dtype=float)


@dataclass(frozen=True)
class SolveOptions:
    lr: float = 0.01  # in normalized units
    lr_decay: float = 0.995  # per-iteration multiplicative decay
    min_lr: float = 1e-7
    max_iters: int = 2000
    tol: float = 1e-8
    perturb: float = 0.2

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "lr_decay", "min_lr", "max_iters", "tol", "perturb")}


@dataclass
class SolveResult:
    params: CameraParams
    trace: list  # LossReport per iteration, initial point first
    iterations: int
    converged: bool


def initial_guess(gt: CameraParams, mode: str, rng_range: ConfigRange,
                  rng: np.random.Generator | None = None, perturb: float = 0.2) -> CameraParams:
    """``"gt"``, ``"perturbed"`` (each parameter scaled by 1 +/- perturb, random sign) or ``"midpoint"``."""
    if mode == "gt":
        return gt
    if mode == "perturbed":
        if rng is None:
            raise ValueError("perturbed init needs an rng")
        signs = np.where(rng.random(10) < 0.5, -1.0, 1.0)
        return CameraParams.from_sequence((np.array(gt.values()) * (1.0 + perturb * signs)).tolist())
    if mode == "midpoint":
        bounds = rng_range.param_bounds()
        return CameraParams.from_sequence([0.5 * (bounds[n][0] + bounds[n][1]) for n in PARAM_NAMES])
    raise ValueError(f"unknown init mode {mode!r}")


def _check_finite(report: LossReport, grad, trace) -> None:
    if not math.isfinite(report.L_total) or not all(math.isfinite(g) for g in grad):
        raise NonFiniteLoss(f"non-finite loss or gradient (L_total={report.L_total!r})", trace)


def solve_sample(
    sample: Sample,
    cfg: LossConfig,
    init: CameraParams | str = "perturbed",
    opts: SolveOptions = SolveOptions(),
    rng_range: ConfigRange | None = None,
    rng: np.random.Generator | None = None,
    omega: Sequence[float] | None = None,
) -> SolveResult:
    """Minimize ``L_total`` over the camera parameters of one sample.

    ``init`` is a CameraParams or an :func:`initial_guess` mode.  Returns the
    best iterate seen; the trace holds one report per evaluated iterate.
    """
    rng_range = rng_range or ConfigRange()
    if isinstance(init, str):
        init = initial_guess(sample.gt, init, rng_range, rng, opts.perturb)
    norm = Normalizer(rng_range)
    targets = sample.targets
    tape = Tape()
    floor = 1e-9 * norm.span[list(_POS_IDX)]

    state = OptimState(norm.to_unit(init.values()), lr=opts.lr)
    trace: list[LossReport] = []
    best_x, best_loss = None, math.inf
    lr = opts.lr
    converged = False
    for it in range(opts.max_iters + 1):
        raw = norm.to_raw(state.params)
        res = loss_and_grad(raw.tolist(), targets, cfg, omega, tape)
        trace.append(res.report)
        _check_finite(res.report, res.params, trace)
        loss = res.report.L_total
        if loss < best_loss:
            best_loss, best_x = loss, raw
        if loss < opts.tol:
            converged = True
            break
        if it == opts.max_iters:
            break
        state.step(np.asarray(res.params) * norm.span, lr)
        lr = max(lr * opts.lr_decay, opts.min_lr)
        # keep focal lengths, baseline and disparity strictly positive
        raw_next = norm.to_raw(state.params)
        pos = raw_next[list(_POS_IDX)]
        if np.any(pos <= floor):
            raw_next[list(_POS_IDX)] = np.maximum(pos, floor)
            state.params = norm.to_unit(raw_next)
    return SolveResult(CameraParams.from_sequence(best_x.tolist()), trace, len(trace) - 1, converged)


# -- regressor --------------------------------------------------------------


def features(sample: Sample, width: float, height: float) -> np.ndarray:
    """Flattened ``(xl/W, yl/H, xr/W, yr/H)`` per correspondence."""
    out = np.empty(4 * len(sample.left))
    for i, (l, r) in enumerate(zip(sample.left, sample.right)):
        out[4 * i: 4 * i + 4] = (l[0] / width, l[1] / height, r[0] / width, r[1] / height)
    return out


class TinyRegressor:
    """``4N -> 64 (tanh) -> 10`` network; outputs squashed into the parameter ranges.

    Output ``k`` is ``lo_k + (hi_k - lo_k) * sigmoid(z_k)``, so every
    prediction lies inside the sampling interval of its parameter.
    """

    def __init__(self, n_points: int, rng_range: ConfigRange, hidden: int = 64, seed: int = 0) -> None:
        self.n_points = n_points
        self.hidden = hidden
        self.width = float(rng_range.width)
        self.height = float(rng_range.height)
        bounds = rng_range.param_bounds()
        self.lo = np.array([bounds[n][0] for n in PARAM_NAMES], dtype=float)
        self.span = np.array([bounds[n][1] for n in PARAM_NAMES], dtype=float) - self.lo
        rng = np.random.default_rng(seed)
        n_in = 4 * n_points
        self.W1 = rng.normal(0.0, 1.0 / math.sqrt(n_in), (hidden, n_in))
        self.b1 = np.zeros(hidden)
        self.W2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (10, hidden))
        self.b2 = np.zeros(10)
        self.omega = None  # learned loss weights, set by train_regressor

    # flat view for the optimizer
    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def set_flat(self, flat: np.ndarray) -> None:
        h, n_in = self.W1.shape
        cuts = np.cumsum([h * n_in, h, 10 * h])
        w1, b1, w2, b2 = np.split(np.asarray(flat, dtype=float), cuts)
        self.W1 = w1.reshape(h, n_in).copy()
        self.b1 = b1.copy()
        self.W2 = w2.reshape(10, h).copy()
        self.b2 = b2.copy()

    @property
    def n_weights(self) -> int:
        return self.get_flat().size

    def features(self, samples: Sequence[Sample]) -> np.ndarray:
        return np.stack([features(s, self.width, self.height) for s in samples])

    def forward(self, X: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Predicted raw parameters ``(B, 10)`` and the cache for :meth:`backward`."""
        a = X @ self.W1.T + self.b1
        h = np.tanh(a)
        z = h @ self.W2.T + self.b2
        s = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free sigmoid
        return self.lo + self.span * s, (X, h, s)

    def backward(self, cache: tuple, d_params: np.ndarray) -> np.ndarray:
        """Flat weight gradient given ``dL/d(params)`` of shape ``(B, 10)``."""
        X, h, s = cache
        dz = d_params * self.span * s * (1.0 - s)
        dW2 = dz.T @ h
        db2 = dz.sum(axis=0)
        da = (dz @ self.W2) * (1.0 - h * h)
        dW1 = da.T @ X
        db1 = da.sum(axis=0)
        return np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2])

    def predict(self, samples: Sequence[Sample]) -> list[CameraParams]:
        out, _ = self.forward(self.features(samples))
        return [CameraParams.from_sequence(row.tolist()) for row in out]

    def to_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "hidden": self.hidden,
            "W1": self.W1.tolist(),
            "b1": self.b1.tolist(),
            "W2": self.W2.tolist(),
            "b2": self.b2.tolist(),
        }


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 100
    batch: int = 32
    lr: float = 0.001
    val_fraction: float = 0.1
    freeze_omega: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("epochs", "batch", "lr", "val_fraction", "freeze_omega", "seed")}


MAE_COLUMNS = ("fx", "fy", "px", "py", "b", "d", "tx", "ty", "tz", "tp")
TRAINLOG_HEADER = (
    ("epoch", "L_total", "L_Cam", "L_3D", "L_con")
    + tuple(f"mae_{c}" for c in MAE_COLUMNS)
    + tuple(f"omega_{i}" for i in range(1, N_OMEGA + 1))
)
COLLAPSE_THRESHOLD = 0.05


@dataclass
class TrainLog:
    """Validation metrics per epoch, plus optimizer step count and collapse events."""

    rows: list = field(default_factory=list)
    steps: int = 0
    collapsed_epochs: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epochs must increase")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAINLOG_HEADER)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in TRAINLOG_HEADER[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != TRAINLOG_HEADER:
            raise ValueError("unexpected TrainLog header")
        log = cls()
        for row in reader:
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} fields, expected {len(header)}")
            vals = {"epoch": int(row[0])}
            vals.update({k: float(v) for k, v in zip(header[1:], row[1:])})
            log.append(vals)
        return log


def split_indices(n: int, seed: int, val_fraction: float = 0.1) -> tuple[list[int], list[int]]:
    """Deterministic train/validation split."""
    if n < 2:
        raise ValueError("need at least two samples to split")
    perm = np.random.default_rng([seed, 0x5B1]).permutation(n).tolist()
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    return sorted(perm[n_val:]), sorted(perm[:n_val])


def _validation_row(epoch: int, model: TinyRegressor, val: Sequence[Sample], val_X: np.ndarray,
                    cfg: LossConfig, omega: np.ndarray | None) -> dict:
    preds, _ = model.forward(val_X)
    sums = {"L_total": 0.0, "L_Cam": 0.0, "L_3D": 0.0, "L_con": 0.0}
    weights = None
    for s, p in zip(val, preds):
        rep = evaluate_loss(CameraParams.from_sequence(p.tolist()), s.targets, cfg,
                            None if omega is None else omega.tolist())
        for k in sums:
            sums[k] += getattr(rep, k)
        weights = rep.weights
    n = len(val)
    row = {"epoch": epoch}
    row.update({k: v / n for k, v in sums.items()})
    gt = np.array([s.gt.values() for s in val])
    err = np.abs(preds - gt).mean(axis=0)
    for col, name in zip(MAE_COLUMNS, ("fx", "fy", "px", "py", "b", "d", "tx", "ty", "tz", "theta_p")):
        row[f"mae_{col}"] = float(err[PARAM_NAMES.index(name)])
    for i, w in enumerate(weights, start=1):
        row[f"omega_{i}"] = float(w)
    return row


def train_regressor(
    dataset: Sequence[Sample],
    cfg: LossConfig,
    opts: TrainOptions = TrainOptions(),
    rng_range: ConfigRange | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[TinyRegressor, TrainLog]:
    """Mini-batch training of a :class:`TinyRegressor` on ``L_total``.

    The batch loss is the mean per-sample ``L_total``.  With learnable weights
    (and ``freeze_omega`` off) the 19 omega values are optimized jointly.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng_range = rng_range or ConfigRange()
    n_points = len(dataset[0].left)
    train_idx, val_idx = split_indices(len(dataset), opts.seed, opts.val_fraction)
    train = [dataset[i] for i in train_idx]
    val = [dataset[i] for i in val_idx]
    model = TinyRegressor(n_points, rng_range, seed=opts.seed)
    train_X = model.features(train)
    val_X = model.features(val)

    learn_omega = cfg.weights == "learnable" and not opts.freeze_omega
    omega = np.zeros(N_OMEGA) if cfg.weights == "learnable" else None
    n_w = model.n_weights
    flat = model.get_flat()
    if learn_omega:
        flat = np.concatenate([flat, omega])
    state = OptimState(flat, lr=opts.lr)
    tape = Tape()
    log = TrainLog()

    for epoch in range(1, opts.epochs + 1):
        state.epoch = epoch
        order = np.random.default_rng([opts.seed, epoch]).permutation(len(train))
        for start in range(0, len(train), opts.batch):
            idx = order[start: start + opts.batch]
            preds, cache = model.forward(train_X[idx])
            d_params = np.empty_like(preds)
            d_omega = np.zeros(N_OMEGA)
            omega_list = None if omega is None else omega.tolist()
            for row, k in enumerate(idx):
                res = loss_and_grad(preds[row].tolist(), train[k].targets, cfg, omega_list, tape)
                if not math.isfinite(res.report.L_total):
                    raise NonFiniteLoss(f"epoch {epoch}: non-finite loss on sample {train[k].id}", log.rows)
                d_params[row] = res.params
                if learn_omega:
                    d_omega += res.omega
            scale = 1.0 / len(idx)
            grad = model.backward(cache, d_params * scale)
            if learn_omega:
                grad = np.concatenate([grad, d_omega * scale])
            if not np.all(np.isfinite(grad)):
                raise NonFiniteLoss(f"epoch {epoch}: non-finite gradient", log.rows)
            state.step(grad)
            model.set_flat(state.params[:n_w])
            if learn_omega:
                omega = state.params[n_w:].copy()
        row = _validation_row(epoch, model, val, val_X, cfg, omega)
        log.append(row)
        if learn_omega and all(row[f"omega_{i}"] < COLLAPSE_THRESHOLD for i in range(1, N_OMEGA + 1)):
            log.collapsed_epochs.append(epoch)
            _LOG.warning("epoch %d: weight collapse, every sigmoid(omega) < %.2f", epoch, COLLAPSE_THRESHOLD)
        if progress is not None:
            progress(row)
    log.steps = state.step_count
    model.omega = omega
    return model, log
