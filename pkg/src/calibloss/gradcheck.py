"""Finite-difference verification of loss gradients.

Analytic gradients from the tape are compared with central differences using
``h = 1e-6 * max(1, |x|)``.  ``|.|`` is not differentiable at 0, so a point is
re-drawn whenever an abs argument lies within ``KINK_EPS`` of zero at some
stencil point or changes sign across a stencil.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datagen import ConfigRange, Sample, generate_sample, sample_configs, sample_rng
from .diff import Tape, value_of
from .geometry import PARAM_NAMES, CameraParams
from .loss import (
    AXIS_TERMS,
    N_OMEGA,
    POINT_TERMS,
    ROTATION_TERMS,
    VANISHING_TERMS,
    LossConfig,
    LossTargets,
    all_configs,
    combine,
    effective_weights,
    loss_and_grad,
    loss_terms,
)

__all__ = [
    "REL_TOL",
    "KINK_EPS",
    "step_size",
    "relative_error",
    "ConfigCheck",
    "GradcheckReport",
    "check_point",
    "run_gradcheck",
]

REL_TOL = 1e-5
KINK_EPS = 1e-7
# abs arguments below this stay numerically zero over the stencil (e.g. the
# off-diagonal products of an exact rotation); they carry no kink
ZERO_RESIDUAL = 1e-12
# gradients smaller than FLOOR * |L| / max(1, |x|) are compared absolutely
FLOOR = 1e-4
MAX_RESAMPLES = 50


def step_size(x: float) -> float:
    return 1e-6 * max(1.0, abs(x))


def relative_error(analytic: float, numeric: float, floor: float = 0.0) -> float:
    den = max(abs(analytic), abs(numeric), floor)
    if den == 0.0:
        return 0.0
    return abs(analytic - numeric) / den


def _full_config(variant: str, include_axis_planes: bool) -> LossConfig:
    return LossConfig(variant=variant, constraints=frozenset({"VP", "WC", "R"}),
                      include_axis_planes=include_axis_planes)


def _select(terms: dict, cfg: LossConfig) -> dict:
    keys = list(PARAM_NAMES) + list(POINT_TERMS)
    if "VP" in cfg.constraints:
        keys += VANISHING_TERMS
    if "WC" in cfg.constraints:
        keys.append("W_c")
    if "R" in cfg.constraints:
        keys += ROTATION_TERMS
    if cfg.include_axis_planes:
        keys += AXIS_TERMS
    return {k: terms[k] for k in keys}


def _total(terms: dict, cfg: LossConfig, omega: Sequence[float] | None) -> float:
    return value_of(combine(_select(terms, cfg), effective_weights(omega, cfg), cfg)[3])


def _recorded_terms(x: Sequence[float], targets: LossTargets, cfg: LossConfig) -> tuple[dict, list]:
    """Term values and abs arguments with every parameter live on a tape."""
    tape = Tape()
    p = CameraParams.from_sequence(tape.vars(x))
    terms = loss_terms(p, targets, cfg)
    return {k: value_of(v) for k, v in terms.items()}, list(tape.abs_args)


def _near_kink(*arg_lists: list) -> bool:
    if len({len(a) for a in arg_lists}) != 1:
        return True  # graph structure changed inside the stencil
    for vals in zip(*arg_lists):
        hi = max(abs(v) for v in vals)
        if hi <= ZERO_RESIDUAL:
            continue
        if min(abs(v) for v in vals) < KINK_EPS:
            return True
        if min(vals) < 0.0 < max(vals):
            return True
    return False


@dataclass
class ConfigCheck:
    config: str
    points: int = 0
    components: int = 0
    max_rel_error: float = 0.0
    failures: list = field(default_factory=list)  # (point, component, analytic, numeric, rel)

    @property
    def passed(self) -> bool:
        return not self.failures and self.points > 0


@dataclass
class GradcheckReport:
    checks: dict  # config name -> ConfigCheck
    resamples: int
    elapsed: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def lines(self) -> list[str]:
        out = []
        for name, c in self.checks.items():
            status = "PASS" if c.passed else "FAIL"
            out.append(f"{status} {name}: {c.points} points, {c.components} components, "
                       f"max rel error {c.max_rel_error:.3e}, {len(c.failures)} failures")
        return out


def check_point(
    x: Sequence[float],
    targets: LossTargets,
    configs: Sequence[LossConfig],
    omega: Sequence[float],
    tol: float = REL_TOL,
) -> dict | None:
    """Compare analytic and numeric gradients at one point for several configs.

    Returns ``None`` when the point sits too close to an abs kink, otherwise
    ``{config name: [(component, analytic, numeric, rel), ...]}``.  Term values
    are shared between configs that differ only in ladder rung or weight mode.
    """
    x = [float(v) for v in x]
    variants = sorted({(c.variant, c.include_axis_planes) for c in configs})
    stencils = {}
    for variant, axis in variants:
        full = _full_config(variant, axis)
        base_terms, base_args = _recorded_terms(x, targets, full)
        rows = []
        for j in range(len(x)):
            h = step_size(x[j])
            xp, xm = list(x), list(x)
            xp[j] += h
            xm[j] -= h
            tp, ap = _recorded_terms(xp, targets, full)
            tm, am = _recorded_terms(xm, targets, full)
            if _near_kink(base_args, ap, am):
                return None
            rows.append((h, tp, tm))
        stencils[(variant, axis)] = (base_terms, rows)

    out = {}
    for cfg in configs:
        base_terms, rows = stencils[(cfg.variant, cfg.include_axis_planes)]
        w = list(omega) if cfg.weights == "learnable" else None
        res = loss_and_grad(x, targets, cfg, w)
        loss = abs(res.report.L_total)
        results = []
        for j, (h, tp, tm) in enumerate(rows):
            num = (_total(tp, cfg, w) - _total(tm, cfg, w)) / (2.0 * h)
            floor = FLOOR * loss / max(1.0, abs(x[j]))
            results.append((PARAM_NAMES[j], res.params[j], num, relative_error(res.params[j], num, floor)))
        if w is not None:
            for i in range(N_OMEGA):
                h = step_size(w[i])
                wp, wm = list(w), list(w)
                wp[i] += h
                wm[i] -= h
                num = (_total(base_terms, cfg, wp) - _total(base_terms, cfg, wm)) / (2.0 * h)
                floor = FLOOR * loss / max(1.0, abs(w[i]))
                results.append((f"omega_{i + 1}", res.omega[i], num, relative_error(res.omega[i], num, floor)))
        out[cfg.name] = results
    return out


def _random_point(rng_range: ConfigRange, rng: np.random.Generator) -> list[float]:
    bounds = rng_range.param_bounds()
    return [float(rng.uniform(*bounds[n])) for n in PARAM_NAMES]


def run_gradcheck(
    trials: int = 100,
    seed: int = 0,
    configs: Sequence[LossConfig] | None = None,
    rng_range: ConfigRange | None = None,
    samples: Sequence[Sample] | None = None,
    tol: float = REL_TOL,
) -> GradcheckReport:
    """Gradient check over ``trials`` random (sample, prediction, omega) draws."""
    rng_range = rng_range or ConfigRange()
    configs = list(configs) if configs is not None else all_configs()
    if samples is None:
        cams = sample_configs(rng_range, trials, seed)
        samples = [generate_sample(c, rng_range, sample_rng(seed, i), i) for i, c in enumerate(cams)]
    checks = {c.name: ConfigCheck(c.name) for c in configs}
    rng = np.random.default_rng([seed, 0x6C])
    resamples = 0
    start = time.perf_counter()
    for t in range(trials):
        targets = samples[t % len(samples)].targets
        for _ in range(MAX_RESAMPLES):
            x = _random_point(rng_range, rng)
            omega = rng.normal(0.0, 1.0, N_OMEGA).tolist()
            result = check_point(x, targets, configs, omega, tol)
            if result is not None:
                break
            resamples += 1
        else:
            raise RuntimeError(f"trial {t}: no kink-free point after {MAX_RESAMPLES} draws")
        for name, rows in result.items():
            c = checks[name]
            c.points += 1
            for comp, a, n, rel in rows:
                c.components += 1
                c.max_rel_error = max(c.max_rel_error, rel)
                if rel >= tol:
                    c.failures.append((t, comp, a, n, rel))
    return GradcheckReport(checks, resamples, time.perf_counter() - start)
