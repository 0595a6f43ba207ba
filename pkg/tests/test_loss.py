from __future__ import annotations

import functools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from calibloss import loss as L
from calibloss.datagen import ConfigRange, generate_dataset
from calibloss.diff import Tape
from calibloss.geometry import PARAM_NAMES, CameraParams


def all_terms(value: float, cfg: L.LossConfig) -> dict:
    keys = list(PARAM_NAMES) + list(L.POINT_TERMS)
    if "VP" in cfg.constraints:
        keys += L.VANISHING_TERMS
    if "WC" in cfg.constraints:
        keys.append("W_c")
    if "R" in cfg.constraints:
        keys += L.ROTATION_TERMS
    return {k: value for k in keys}


def test_mae_examples():
    assert L.mae([1, 2, 3], [1, 2, 3]) == 0
    assert L.mae([0, 0], [1, 3]) == 2
    assert L.mae([5], [2]) == 3
    with pytest.raises(L.LengthMismatch):
        L.mae([1, 2], [1])
    with pytest.raises(L.LengthMismatch):
        L.mae([], [])


def test_set_losses_zero_at_truth(small_dataset):
    t = small_dataset[0].targets
    assert L.set_losses(t.actual, t.actual) == (0, 0, 0, 0)


@pytest.mark.parametrize("cfg", L.all_configs(), ids=lambda c: c.name)
def test_group_losses_examples(cfg):
    omega = [0.3 * i - 2.0 for i in range(L.N_OMEGA)]
    assert L.group_losses(all_terms(0.0, cfg), omega, cfg).L_total == 0.0
    if cfg.weights == "fixed":
        rep = L.group_losses(all_terms(1.0, cfg), None, cfg)
        assert (rep.L_Cam, rep.L_3D, rep.L_con) == (0.5, 0.5, 0.5)
        assert rep.L_total == 0.25


def test_disentangled_term_zero_at_truth(small_dataset):
    t = small_dataset[3].targets
    for q in PARAM_NAMES:
        assert L.disentangled_param_loss(q, getattr(t.gt, q), t) == 0.0
    for ax in L.POINT_TERMS:
        k = L.POINT_TERMS.index(ax)
        assert L.disentangled_param_loss(ax, [p[k] for p in t.actual.points], t) == 0.0
    assert L.disentangled_param_loss("V_z", t.actual.constraints.vanishing[2], t) == 0.0
    with pytest.raises(L.UnknownParameter):
        L.disentangled_param_loss("focal", 1.0, t)


def test_translation_offset_term_value(small_dataset):
    # oracle: tz + 1: one of ten parameters off by 1, every Z off by 1, vanishing points unchanged
    t = small_dataset[5].targets
    got = L.disentangled_param_loss("tz", t.gt.tz + 1.0, t)
    assert got == pytest.approx((0.1 + 1.0 / 3.0) / 3.0, rel=1e-12)


def test_point_and_vanishing_terms_match_pipeline(small_dataset):
    t = small_dataset[2].targets
    pts = [p[0] + 0.5 for p in t.actual.points]
    assert L.disentangled_param_loss("X", pts, t) == pytest.approx(0.5 / 9.0, rel=1e-12)
    vz = t.actual.constraints.vanishing[2]
    pairs = L._vanishing_pairs(t.actual.constraints, t.actual.constraints)
    got = L.disentangled_param_loss("V_z", (vz[0] + 2.0, vz[1]), t)
    assert got == pytest.approx(2.0 / len(pairs) / 3.0, rel=1e-12)


@pytest.mark.parametrize("cfg", L.all_configs(), ids=lambda c: c.name)
def test_loss_zero_at_ground_truth(cfg, small_dataset):
    for s in small_dataset[:5]:
        rep = L.evaluate_loss(s.gt, s.targets, cfg, [0.1] * L.N_OMEGA)
        assert rep.L_total == pytest.approx(0.0, abs=1e-12)


def test_config_validation():
    with pytest.raises(L.InvalidConfig):
        L.LossConfig(variant="tangled")
    with pytest.raises(L.InvalidConfig):
        L.LossConfig(weights="adaptive")
    with pytest.raises(L.InvalidConfig):
        L.LossConfig(constraints=frozenset({"WC"}))
    with pytest.raises(L.InvalidConfig):
        L.LossConfig(constraints=frozenset({"VP", "XX"}))
    cfg = L.LossConfig.from_ladder("VP-WC", variant="plain", weights="learnable")
    assert L.LossConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.rung == "VP-WC"
    assert len(L.all_configs()) == 12
    with pytest.raises(L.UnknownParameter):
        L.camera_term("zz", CameraParams(*[1.0] * 10), None)


def test_learnable_weights_length_checked(small_dataset):
    cfg = L.LossConfig(weights="learnable")
    with pytest.raises(L.LengthMismatch):
        L.evaluate_loss(small_dataset[0].gt, small_dataset[0].targets, cfg, [0.0] * 3)


@functools.lru_cache(maxsize=1)
def _dataset():
    return generate_dataset(ConfigRange(), 40, 11)


def perturbed(s, rng, scale=0.2):
    v = np.array(s.gt.values())
    return (v * (1.0 + scale * rng.uniform(-1, 1, 10))).tolist()


def test_ladder_leaves_camera_and_point_groups_unchanged(small_dataset):
    rng = np.random.default_rng(3)
    for s in small_dataset[:8]:
        x = CameraParams.from_sequence(perturbed(s, rng))
        reps = [L.evaluate_loss(x, s.targets, L.LossConfig.from_ladder(r)) for r in L.LADDER]
        assert len({(r.L_Cam, r.L_3D) for r in reps}) == 1


def test_disentangled_cross_gradients_are_exactly_zero(small_dataset):
    rng = np.random.default_rng(4)
    for s in small_dataset[:10]:
        x = perturbed(s, rng)
        grads = L.term_gradients(x, s.targets, L.LossConfig(variant="disentangled"))
        for i, q in enumerate(PARAM_NAMES):
            assert all(g == 0.0 for j, g in enumerate(grads[q]) if j != i)
        plain = L.term_gradients(x, s.targets, L.LossConfig(variant="plain"))
        assert any(g != 0.0 for i, q in enumerate(PARAM_NAMES) for j, g in enumerate(plain[q]) if j != i)


def test_omega_gradient_sign(small_dataset):
    # raising any omega raises its weight, so a positive term raises L_total
    s = small_dataset[1]
    x = perturbed(s, np.random.default_rng(5))
    res = L.loss_and_grad(x, s.targets, L.LossConfig(weights="learnable"), [0.0] * L.N_OMEGA)
    assert len(res.omega) == L.N_OMEGA
    assert all(g >= 0.0 for g in res.omega)


@given(st.integers(0, 39), st.integers(0, 2**31), st.integers(0, 18), st.floats(-3, 3))
def test_total_is_monotone_in_each_omega(idx, seed, k, delta):
    s = _dataset()[idx]
    x = CameraParams.from_sequence(perturbed(s, np.random.default_rng(seed)))
    cfg = L.LossConfig(weights="learnable")
    base = [0.0] * L.N_OMEGA
    up = list(base)
    up[k] = abs(delta) + 0.1
    a = L.evaluate_loss(x, s.targets, cfg, base).L_total
    b = L.evaluate_loss(x, s.targets, cfg, up).L_total
    assert b >= a




@given(st.integers(0, 39), st.integers(0, 2**31))
def test_loss_non_negative(idx, seed):
    s = _dataset()[idx]
    x = CameraParams.from_sequence(perturbed(s, np.random.default_rng(seed), 0.5))
    for cfg in L.all_configs():
        rep = L.evaluate_loss(x, s.targets, cfg, np.random.default_rng(seed).normal(size=19).tolist())
        assert rep.L_total >= 0.0 and math.isfinite(rep.L_total)


def test_tape_and_float_paths_agree(small_dataset):
    s = small_dataset[7]
    x = perturbed(s, np.random.default_rng(8))
    for cfg in L.all_configs():
        om = [0.2] * L.N_OMEGA
        a = L.loss_and_grad(x, s.targets, cfg, om, Tape()).report.L_total
        b = L.evaluate_loss(CameraParams.from_sequence(x), s.targets, cfg, om).L_total
        assert a == pytest.approx(b, rel=1e-14)
