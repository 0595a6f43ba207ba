from __future__ import annotations

import pytest

from calibloss import evaluation as ev
from calibloss.datagen import ConfigRange, generate_dataset
from calibloss.geometry import TABLE_ORDER
from calibloss.loss import LossConfig
from calibloss.solver import SolveOptions, TrainLog, TrainOptions


def test_perfect_predictions_give_zero_row(small_dataset):
    assert ev.evaluate([s.gt for s in small_dataset], small_dataset) == (0.0,) * 10


def test_constant_focal_offset(small_dataset):
    preds = [s.gt.with_value("fx", s.gt.fx + 1.0) for s in small_dataset]
    row = ev.evaluate(preds, small_dataset)
    assert row[0] == pytest.approx(1.0, rel=1e-12)
    assert row[1:] == (0.0,) * 9


def test_alignment_checked(small_dataset):
    with pytest.raises(ev.AlignmentMismatch):
        ev.evaluate([s.gt for s in small_dataset[:3]], small_dataset[:4])
    with pytest.raises(ev.AlignmentMismatch):
        ev.evaluate([], [])


def test_table_rendering():
    t = ev.MaeTable(metadata={"seed": 7})
    t.add_row("a", range(10))
    assert t.row("a")["theta_p"] == 9.0
    assert t.header()[-1] == "tp" and len(t.units()) == 10
    text = t.to_text()
    assert "# seed: 7" in text and "rad" in text
    assert t.to_csv().splitlines()[-1].split(",")[0] == "a"
    with pytest.raises(ValueError):
        t.add_row("b", [-1.0] + [0.0] * 9)
    with pytest.raises(ValueError):
        t.add_row("b", [0.0] * 9)
    assert ev.mean_intrinsic_mae(range(10)) == 1.5


def test_reference_rows():
    # published ablation and headline rows
    assert ev.REFERENCE_ROWS["ablation/UGCL-VP"][:4] == (1.979, 1.973, 0.334, 0.438)
    assert ev.REFERENCE_ROWS["ablation/UGCL-VP-WC"][:4] == (1.875, 1.900, 0.253, 0.129)
    assert ev.REFERENCE_ROWS["ablation/UGCL-VP-WC-R"] == ev.REFERENCE_ROWS["headline/UGCL-VP-WC-R"]
    assert all(len(r) == len(TABLE_ORDER) for r in ev.REFERENCE_ROWS.values())


def test_ablate_writes_three_rows_and_curves(tmp_path):
    ds = generate_dataset(ConfigRange(points=4), 60, 3)
    res = ev.ablate(ds, opts=TrainOptions(epochs=1), out_dir=tmp_path)
    assert list(res.table.rows) == ["UGCL-VP", "UGCL-VP-WC", "UGCL-VP-WC-R"]
    for name in res.table.rows:
        assert TrainLog.from_csv((tmp_path / f"curves_{name}.csv").read_text()).rows == res.logs[name].rows
    assert (tmp_path / "mae_table.txt").read_text() == res.table.to_text()
    assert (tmp_path / "mae_table.csv").exists()


def test_recovery_report(small_dataset):
    cfg = LossConfig.from_ladder("VP")
    rep = ev.recovery_experiment(small_dataset[:2], cfg, SolveOptions(max_iters=5), seed=1)
    assert rep.solved == 2 and rep.requested == 2
    assert rep.errors.shape == (2, 10)
    assert 0 <= rep.successes <= 2
    budget = ev.recovery_experiment(small_dataset[:5], cfg, SolveOptions(max_iters=5), time_budget=0.0)
    assert budget.solved <= 1 and budget.requested == 5
