"""Constraint-augmented multi-task loss.

Three parameter sets are compared against their ground truth with MAE:

* ``s1``: the ten camera parameters,
* ``s2``: 3D points reconstructed from the stereo observations,
* ``s3``: the vanishing points of the three world axes.

``s2`` and ``s3`` are never free outputs; they are derived from whichever
camera parameters are being scored.  Per-term losses are gated by
``sigmoid(omega)`` weights and grouped into camera, reconstruction and
constraint losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from . import geometry as geo
from .diff import Scalar, Tape, absolute, sigmoid, sum_abs_diff, value_of
from .geometry import PARAM_NAMES, CameraParams, ConstraintTargets, Point3

POINT_TERMS = ("X", "Y", "Z")
VANISHING_TERMS = ("V_x", "V_y", "V_z")
# omega_1..omega_16 gate these, omega_17..19 gate the three groups
WEIGHTED_TERMS = PARAM_NAMES + POINT_TERMS + VANISHING_TERMS
N_OMEGA = 19
ROTATION_TERMS = ("R_12", "R_13", "R_23", "R_orth", "R_det")
AXIS_TERMS = ("A_12", "A_13", "A_23")

CONSTRAINT_GROUPS = ("VP", "WC", "R")
LADDER = ("VP", "VP-WC", "VP-WC-R")


class LossError(ValueError):
    pass


class LengthMismatch(LossError):
    pass


class UnknownParameter(LossError):
    pass


class InvalidConfig(LossError):
    pass


@dataclass(frozen=True)
class LossConfig:
    variant: str = "disentangled"  # "plain" | "disentangled"
    constraints: frozenset = frozenset({"VP", "WC", "R"})
    weights: str = "fixed"  # "fixed" | "learnable"
    include_axis_planes: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "constraints", frozenset(self.constraints))
        if self.variant not in ("plain", "disentangled"):
            raise InvalidConfig(f"unknown variant {self.variant!r}")
        if self.weights not in ("fixed", "learnable"):
            raise InvalidConfig(f"unknown weights mode {self.weights!r}")
        unknown = self.constraints - set(CONSTRAINT_GROUPS)
        if unknown:
            raise InvalidConfig(f"unknown constraint groups {sorted(unknown)}")
        if self.constraints and "VP" not in self.constraints:
            raise InvalidConfig("WC and R require VP (cumulative ladder)")

    @classmethod
    def from_ladder(cls, rung: str, variant: str = "disentangled", weights: str = "fixed") -> "LossConfig":
        groups = frozenset(g for g in rung.split("-") if g)
        return cls(variant=variant, constraints=groups, weights=weights)

    @property
    def rung(self) -> str:
        return "-".join(g for g in CONSTRAINT_GROUPS if g in self.constraints)

    @property
    def name(self) -> str:
        extra = "+AP" if self.include_axis_planes else ""
        return f"{self.variant}/{self.rung or 'none'}{extra}/{self.weights}"

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "constraints": [g for g in CONSTRAINT_GROUPS if g in self.constraints],
            "weights": self.weights,
            "include_axis_planes": self.include_axis_planes,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "LossConfig":
        return cls(
            variant=data.get("variant", "disentangled"),
            constraints=frozenset(data.get("constraints", CONSTRAINT_GROUPS)),
            weights=data.get("weights", "fixed"),
            include_axis_planes=bool(data.get("include_axis_planes", False)),
        )

    @property
    def n_constraint_terms(self) -> int:
        n = 3 if "VP" in self.constraints else 0
        n += 1 if "WC" in self.constraints else 0
        n += len(ROTATION_TERMS) if "R" in self.constraints else 0
        n += len(AXIS_TERMS) if self.include_axis_planes else 0
        return n


def all_configs(include_axis_planes: bool = False) -> list[LossConfig]:
    """Every shipped configuration: variant x ladder rung x weight mode."""
    return [
        LossConfig(variant=v, constraints=frozenset(r.split("-")), weights=w,
                   include_axis_planes=include_axis_planes)
        for v in ("plain", "disentangled")
        for r in LADDER
        for w in ("fixed", "learnable")
    ]


def mae(pred: Sequence[Scalar], actual: Sequence[Scalar]) -> Scalar:
    if len(pred) != len(actual):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(actual)} targets")
    if not pred:
        raise LengthMismatch("empty input")
    return sum_abs_diff(pred, actual) / len(pred)


@dataclass(frozen=True)
class Derived:
    """Quantities derived from one set of camera parameters."""

    params: CameraParams
    points: tuple  # of Point3
    constraints: ConstraintTargets
    rotation: tuple | None = None
    axis_planes: tuple | None = None


@dataclass(frozen=True)
class LossTargets:
    """Ground truth and observations of one sample, ready for scoring."""

    gt: CameraParams
    observations: tuple  # left image points
    disparity_ratio: tuple  # per-point disparity / mean disparity
    actual: Derived

    @classmethod
    def from_observations(
        cls,
        gt: CameraParams,
        left: Sequence[Sequence[float]],
        disparities: Sequence[float],
    ) -> "LossTargets":
        mean = math.fsum(disparities) / len(disparities)
        ratio = tuple(float(d) / mean for d in disparities)
        obs = tuple(geo.PointImage(float(p[0]), float(p[1])) for p in left)
        actual = derive(gt, obs, ratio, rotation=True, axis_planes=True)
        return cls(gt=gt, observations=obs, disparity_ratio=ratio, actual=actual)

    def derive(self, params: CameraParams, rotation: bool = False, axis_planes: bool = False) -> Derived:
        return derive(params, self.observations, self.disparity_ratio, rotation, axis_planes)


def derive(
    params: CameraParams,
    observations: Sequence[Sequence[float]],
    disparity_ratio: Sequence[float],
    rotation: bool = False,
    axis_planes: bool = False,
) -> Derived:
    """Reconstructed points and constraint targets implied by ``params``.

    Rotation and axis-plane residuals are only evaluated on request.
    """
    points = geo.reconstruct_points(params, observations, disparity_ratio)
    model = geo.compose_projection(params)
    return Derived(
        params=params,
        points=points,
        constraints=geo.constraint_targets(model),
        rotation=geo.rotation_residuals(model.R) if rotation else None,
        axis_planes=geo.axis_plane_residuals(model) if axis_planes else None,
    )


def _vanishing_pairs(pred: ConstraintTargets, actual: ConstraintTargets) -> list[tuple[int, Scalar, float]]:
    """(axis index, predicted, actual) for every component finite on both sides."""
    out = []
    for k, (vp, va) in enumerate(zip(pred.vanishing, actual.vanishing)):
        if pred.finite[k] and actual.finite[k]:
            out.append((k, vp[0], va[0]))
            out.append((k, vp[1], va[1]))
    return out


def _flat_points(points: Iterable[Point3]) -> list:
    return [c for p in points for c in p]


def set_losses(pred: Derived, actual: Derived) -> tuple:
    """``(L1, L2, L3, L_T)``: parameter, reconstruction and vanishing-point MAE and their mean."""
    l1 = mae(pred.params.as_tuple(), actual.params.as_tuple())
    l2 = mae(_flat_points(pred.points), _flat_points(actual.points))
    pairs = _vanishing_pairs(pred.constraints, actual.constraints)
    l3 = mae([p for _, p, _ in pairs], [a for _, _, a in pairs]) if pairs else 0.0
    return l1, l2, l3, (l1 + l2 + l3) / 3.0


def camera_term(which: str, pred: CameraParams, targets: LossTargets, variant: str = "disentangled") -> Scalar:
    """Loss term for one camera parameter.

    Disentangled: the pipeline sees only ``which`` from the prediction, every
    other input is ground truth.  Plain: the pipeline sees the whole prediction.
    """
    if which not in PARAM_NAMES:
        raise UnknownParameter(which)
    if variant == "plain":
        return set_losses(targets.derive(pred), targets.actual)[3]
    mixed = targets.gt.with_value(which, getattr(pred, which))
    return set_losses(targets.derive(mixed), targets.actual)[3]


def point_term(axis: str, pred_points: Sequence[Point3], actual_points: Sequence[Point3]) -> Scalar:
    """``L_T`` of the pipeline where only one point coordinate comes from the prediction.

    Parameters and vanishing points are then exact, so only ``L2`` is nonzero.
    """
    k = POINT_TERMS.index(axis)
    s = sum_abs_diff([p[k] for p in pred_points], [a[k] for a in actual_points])
    return s / (9 * len(actual_points))


def vanishing_term(axis: str, pred: ConstraintTargets, actual: ConstraintTargets) -> Scalar:
    """``L_T`` of the pipeline where only vanishing point ``axis`` is predicted (only ``L3`` is nonzero)."""
    k = VANISHING_TERMS.index(axis)
    pairs = _vanishing_pairs(pred, actual)
    if not pairs:
        return 0.0
    s = sum_abs_diff([p for j, p, _ in pairs if j == k], [a for j, _, a in pairs if j == k])
    return s / (3 * len(pairs))


def world_center_term(pred: ConstraintTargets, actual: ConstraintTargets) -> Scalar:
    if not (pred.finite[3] and actual.finite[3]):
        return 0.0
    return mae(pred.W_c, actual.W_c)


def disentangled_param_loss(which: str, pred_value, targets: LossTargets) -> Scalar:
    """Single-quantity loss with everything else held at ground truth.

    ``which`` is a camera parameter name (``pred_value`` a scalar), a point
    axis ``X``/``Y``/``Z`` (``pred_value`` the N predicted coordinates) or a
    vanishing point ``V_x``/``V_y``/``V_z`` (``pred_value`` a 2-vector).
    """
    if which in PARAM_NAMES:
        mixed = targets.gt.with_value(which, pred_value)
        return set_losses(targets.derive(mixed), targets.actual)[3]
    actual = targets.actual
    if which in POINT_TERMS:
        k = POINT_TERMS.index(which)
        if len(pred_value) != len(actual.points):
            raise LengthMismatch("one coordinate per observed point expected")
        pts = [p[:k] + (v,) + p[k + 1:] for p, v in zip(actual.points, pred_value)]
        return point_term(which, pts, actual.points)
    if which in VANISHING_TERMS:
        k = VANISHING_TERMS.index(which)
        c = actual.constraints
        vs = list(c.vanishing)
        vs[k] = geo.PointImage(pred_value[0], pred_value[1])
        mixed = ConstraintTargets(vs[0], vs[1], vs[2], c.W_c, c.finite)
        return vanishing_term(which, mixed, c)
    raise UnknownParameter(which)


def loss_terms(pred: CameraParams, targets: LossTargets, cfg: LossConfig) -> dict[str, Scalar]:
    """Every per-term loss enabled by ``cfg`` (unweighted)."""
    derived = targets.derive(pred, rotation="R" in cfg.constraints, axis_planes=cfg.include_axis_planes)
    actual = targets.actual
    terms: dict[str, Scalar] = {}
    if cfg.variant == "plain":
        lt = set_losses(derived, actual)[3]
        for q in PARAM_NAMES:
            terms[q] = lt
    else:
        for q in PARAM_NAMES:
            terms[q] = camera_term(q, pred, targets, "disentangled")
    for ax in POINT_TERMS:
        terms[ax] = point_term(ax, derived.points, actual.points)
    if "VP" in cfg.constraints:
        for ax in VANISHING_TERMS:
            terms[ax] = vanishing_term(ax, derived.constraints, actual.constraints)
    if "WC" in cfg.constraints:
        terms["W_c"] = world_center_term(derived.constraints, actual.constraints)
    if "R" in cfg.constraints:
        for name, r in zip(ROTATION_TERMS, derived.rotation):
            # the Frobenius residual is already non-negative
            terms[name] = r if name == "R_orth" else absolute(r)
    if cfg.include_axis_planes:
        for name, a in zip(AXIS_TERMS, derived.axis_planes):
            terms[name] = a
    return terms


def effective_weights(omega: Sequence[Scalar] | None, cfg: LossConfig) -> list[Scalar]:
    if cfg.weights == "fixed" or omega is None:
        return [0.5] * N_OMEGA
    if len(omega) != N_OMEGA:
        raise LengthMismatch(f"expected {N_OMEGA} omega values, got {len(omega)}")
    return [sigmoid(w) for w in omega]


def combine(terms: Mapping[str, Scalar], weights: Sequence[Scalar], cfg: LossConfig) -> tuple:
    """``(L_Cam, L_3D, L_con, L_total)`` from per-term values and effective weights."""
    w = weights
    l_cam = 0.0
    for i, q in enumerate(PARAM_NAMES):
        l_cam = l_cam + w[i] * terms[q]
    l_cam = l_cam / len(PARAM_NAMES)
    l_3d = 0.0
    for i, ax in enumerate(POINT_TERMS):
        l_3d = l_3d + w[10 + i] * terms[ax]
    l_3d = l_3d / len(POINT_TERMS)
    n_con = cfg.n_constraint_terms
    l_con = 0.0
    if n_con:
        if "VP" in cfg.constraints:
            for i, ax in enumerate(VANISHING_TERMS):
                l_con = l_con + w[13 + i] * terms[ax]
        extra = 0.0
        for name in ("W_c",) + ROTATION_TERMS + AXIS_TERMS:
            if name in terms:
                extra = extra + terms[name]
        # ablation-added terms share the constraint-group weight
        l_con = (l_con + w[18] * extra) / n_con
    l_total = (w[16] * l_cam + w[17] * l_3d + w[18] * l_con) / 3.0
    return l_cam, l_3d, l_con, l_total


@dataclass(frozen=True)
class LossReport:
    L_Cam: float
    L_3D: float
    L_con: float
    L_total: float
    L_T: float
    terms: dict = field(default_factory=dict)
    weights: tuple = ()

    def row(self) -> dict[str, float]:
        return {"L_total": self.L_total, "L_Cam": self.L_Cam, "L_3D": self.L_3D, "L_con": self.L_con}


def group_losses(terms: Mapping[str, Scalar], omega: Sequence[float] | None, cfg: LossConfig, l_t: float = math.nan) -> LossReport:
    weights = effective_weights(omega, cfg)
    l_cam, l_3d, l_con, l_total = combine(terms, weights, cfg)
    return LossReport(
        L_Cam=value_of(l_cam),
        L_3D=value_of(l_3d),
        L_con=value_of(l_con),
        L_total=value_of(l_total),
        L_T=value_of(l_t),
        terms={k: value_of(v) for k, v in terms.items()},
        weights=tuple(value_of(x) for x in weights),
    )


def evaluate_loss(pred: CameraParams, targets: LossTargets, cfg: LossConfig, omega: Sequence[float] | None = None) -> LossReport:
    """Float-only evaluation (no tape)."""
    terms = loss_terms(pred, targets, cfg)
    l_t = set_losses(targets.derive(pred), targets.actual)[3]
    return group_losses(terms, omega, cfg, l_t)


@dataclass
class LossGradient:
    report: LossReport
    params: list  # dL_total / d(camera params), PARAM_NAMES order
    omega: list | None  # dL_total / d(omega) in learnable mode


def loss_and_grad(
    pred: Sequence[float],
    targets: LossTargets,
    cfg: LossConfig,
    omega: Sequence[float] | None = None,
    tape: Tape | None = None,
) -> LossGradient:
    """Evaluate ``L_total`` on a tape and differentiate it."""
    tape = tape if tape is not None else Tape()
    tape.reset()
    leaves = tape.vars(pred)
    p = CameraParams.from_sequence(leaves)
    terms = loss_terms(p, targets, cfg)
    w_leaves = tape.vars(omega) if (cfg.weights == "learnable" and omega is not None) else None
    weights = effective_weights(w_leaves, cfg)
    l_cam, l_3d, l_con, l_total = combine(terms, weights, cfg)
    wrt = leaves + (w_leaves or [])
    g = tape.gradient(l_total, wrt)
    report = LossReport(
        L_Cam=value_of(l_cam),
        L_3D=value_of(l_3d),
        L_con=value_of(l_con),
        L_total=value_of(l_total),
        L_T=math.nan,
        terms={k: value_of(v) for k, v in terms.items()},
        weights=tuple(value_of(x) for x in weights),
    )
    return LossGradient(report, g[:10], g[10:] if w_leaves is not None else None)


def term_gradients(pred: Sequence[float], targets: LossTargets, cfg: LossConfig) -> dict[str, list[float]]:
    """Gradient of each camera term with respect to all ten predicted parameters.

    Used to inspect cross-talk: in disentangled mode the term for ``q`` depends
    on ``q`` alone.
    """
    out = {}
    for q in PARAM_NAMES:
        tape = Tape()
        leaves = tape.vars(pred)
        p = CameraParams.from_sequence(leaves)
        term = camera_term(q, p, targets, cfg.variant)
        out[q] = tape.gradient(term, leaves)
    return out
