from __future__ import annotations

import numpy as np
import pytest

from calibloss import gradcheck as gc
from calibloss.datagen import ConfigRange
from calibloss.loss import N_OMEGA, LossConfig, all_configs


def test_step_and_relative_error():
    assert gc.step_size(0.5) == 1e-6
    assert gc.step_size(-300.0) == pytest.approx(3e-4)
    assert gc.relative_error(1.0, 1.0) == 0.0
    assert gc.relative_error(0.0, 0.0) == 0.0
    assert gc.relative_error(1.0, 0.5) == 0.5
    assert gc.relative_error(1e-9, 0.0, floor=1e-3) == pytest.approx(1e-6)


def test_kink_rule():
    assert gc._near_kink([1.0], [1.1], [0.9]) is False
    assert gc._near_kink([1e-8], [2e-8], [1e-8]) is True
    assert gc._near_kink([1e-3], [-1e-3], [2e-3]) is True
    assert gc._near_kink([1e-14], [0.0], [-1e-14]) is False
    assert gc._near_kink([1.0], [1.0, 2.0], [1.0]) is True


def test_check_point_detects_wrong_gradient(small_dataset, monkeypatch):
    s = small_dataset[0]
    cfg = [LossConfig()]
    rng = np.random.default_rng(0)
    for _ in range(gc.MAX_RESAMPLES):
        x = gc._random_point(ConfigRange(), rng)
        ok = gc.check_point(x, s.targets, cfg, [0.0] * N_OMEGA)
        if ok is not None:
            break
    assert ok is not None and all(r < gc.REL_TOL for *_, r in ok[cfg[0].name])
    real = gc.loss_and_grad

    def doubled(*args, **kwargs):
        res = real(*args, **kwargs)
        res.params = [2.0 * g for g in res.params]
        return res

    monkeypatch.setattr(gc, "loss_and_grad", doubled)
    bad = gc.check_point(x, s.targets, cfg, [0.0] * N_OMEGA)
    assert max(r for *_, r in bad[cfg[0].name]) > 0.3


def test_small_run_passes_every_config():
    rep = gc.run_gradcheck(trials=4, seed=3)
    assert set(rep.checks) == {c.name for c in all_configs()}
    assert rep.passed
    assert all(line.startswith("PASS") for line in rep.lines())
