from __future__ import annotations

import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from calibloss import datagen as dg
from calibloss import geometry as geo


def test_fov_to_focal():
    r = dg.ConfigRange(fov=(math.radians(90), math.radians(90)))
    assert r.focal(math.radians(90)) == pytest.approx(75.0, rel=1e-15)
    cams = dg.sample_configs(r, 5, 1)
    assert all(c.fx == pytest.approx(75.0) and c.fy == c.fx for c in cams)


def test_degenerate_interval():
    r = dg.ConfigRange(tx=(1.5, 1.5), pitch=(0.1, 0.1))
    cams = dg.sample_configs(r, 20, 3)
    assert {c.tx for c in cams} == {1.5}
    assert {c.theta_p for c in cams} == {0.1}


def test_sample_configs_deterministic_default_count():
    r = dg.ConfigRange()
    a = dg.sample_configs(r, dg.DEFAULT_CONFIG_COUNT, 7)
    b = dg.sample_configs(r, dg.DEFAULT_CONFIG_COUNT, 7)
    assert len(a) == 900 and a == b
    assert dg.sample_configs(r, 5, 8) != a[:5]


def test_invalid_ranges():
    with pytest.raises(dg.EmptyRange):
        dg.ConfigRange(tx=(2.0, 1.0))
    with pytest.raises(dg.EmptyRange):
        dg.ConfigRange(baseline=(0.0, 1.0))
    with pytest.raises(dg.EmptyRange):
        dg.sample_configs(dg.ConfigRange(), 0, 1)
    with pytest.raises(dg.EmptyRange):
        dg.ConfigRange.from_dict({"bogus": [1, 2]})
    r = dg.ConfigRange.from_dict({"fov_deg": [70, 80], "points": 4})
    assert r.fov == pytest.approx((math.radians(70), math.radians(80)))
    assert dg.ConfigRange.from_dict(r.to_dict()) == r


def test_unfillable():
    # disparity far exceeds the image width, so no right observation is ever in frame
    r = dg.ConfigRange(baseline=(1000.0, 1000.0), depth=(4.0, 5.0), points=2)
    cam = dg.sample_configs(r, 1, 0)[0]
    with pytest.raises(dg.Unfillable):
        dg.generate_sample(cam, r, dg.sample_rng(0, 0))


def test_generate_sample_deterministic(rng_range):
    cam = dg.sample_configs(rng_range, 1, 4)[0]
    a = dg.generate_sample(cam, rng_range, dg.sample_rng(4, 0))
    b = dg.generate_sample(cam, rng_range, dg.sample_rng(4, 0))
    assert a == b and a.to_dict() == b.to_dict()


def test_sample_invariants(small_dataset, rng_range):
    W, H = rng_range.width, rng_range.height
    for s in small_dataset:
        assert len(s.points3d) == rng_range.points
        for l, r, d in zip(s.left, s.right, s.disparity):
            assert 0 <= l[0] <= W and 0 <= l[1] <= H
            assert 0 <= r[0] <= W and 0 <= r[1] <= H
            assert d > 0 and l[0] - r[0] == pytest.approx(d, abs=1e-9)
        assert s.gt.d == pytest.approx(np.mean(s.disparity), rel=1e-14)


def test_reconstruction_round_trip(small_dataset):
    for s in small_dataset:
        for Q, l, d in zip(s.points3d, s.left, s.disparity):
            got = geo.reconstruct_3d(s.gt.with_value("d", d), l)
            assert np.linalg.norm(np.subtract(got, Q)) <= 1e-8 * max(1.0, np.linalg.norm(Q))
        recon = s.reconstructed
        for Q, R in zip(s.points3d, recon):
            assert np.allclose(R, Q, rtol=1e-8, atol=1e-8)


def test_pixel_uniformity(rng_range):
    # chi-square on left-image x over 10 bins; 15 critical value is about the 0.91 quantile of chi2(9)
    ds = dg.generate_dataset(rng_range, 150, 21)
    xs = np.array([p[0] for s in ds for p in s.left])
    counts, _ = np.histogram(xs, bins=10, range=(0, rng_range.width))
    expected = len(xs) / 10
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < 21.67  # 0.99 quantile of chi2 with 9 dof


def test_fnv_reference():
    def ref(data: bytes) -> str:
        h = 0xCBF29CE484222325
        for b in data:
            h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return f"{h:016x}"

    assert dg.fnv1a64(b"") == "cbf29ce484222325"
    assert dg.fnv1a64(b"a") == "af63dc4c8601ec8c"
    for data in (b"hello world", bytes(range(256)) * 3):
        assert dg.fnv1a64(data) == ref(data)
    h = dg.Fnv1a64()
    h.update(b"hello ")
    h.update(b"world")
    assert h.hexdigest() == ref(b"hello world")


def test_write_read_round_trip(tmp_path, small_dataset, rng_range):
    path = tmp_path / "ds.jsonl"
    digest = dg.write_dataset(path, small_dataset, rng_range, 11)
    header, back = dg.read_dataset(path)
    assert header.checksum == digest and header.count == 40 and header.seed == 11
    assert header.range == rng_range
    assert back == small_dataset
    assert dg.write_dataset(tmp_path / "again.jsonl", small_dataset, rng_range, 11) == digest
    assert path.read_bytes() == (tmp_path / "again.jsonl").read_bytes()
    lines = path.read_bytes().splitlines()
    assert len(lines) == 42


@pytest.mark.parametrize("cut", [0.0, 0.3, 0.999])
def test_truncated_file_rejected(tmp_path, small_dataset, rng_range, cut):
    path = tmp_path / "ds.jsonl"
    dg.write_dataset(path, small_dataset, rng_range, 11)
    data = path.read_bytes()
    path.write_bytes(data[: int(cut * len(data))])
    with pytest.raises((dg.ChecksumMismatch, dg.SchemaVersionMismatch)):
        dg.read_dataset(path)


def test_corruption_and_version(tmp_path, small_dataset, rng_range):
    path = tmp_path / "ds.jsonl"
    dg.write_dataset(path, small_dataset[:3], rng_range, 11)
    data = path.read_bytes()
    lines = data.splitlines(keepends=True)
    lines[2] = lines[2].replace(b'"id":1', b'"id":7', 1)
    path.write_bytes(b"".join(lines))
    with pytest.raises((dg.ChecksumMismatch, dg.SchemaVersionMismatch)):
        dg.read_dataset(path)
    path.write_bytes(data.replace(b'"version":1', b'"version":9', 1))
    with pytest.raises(dg.SchemaVersionMismatch):
        dg.read_dataset(path)


def test_streaming_large_count_constant_memory(tmp_path):
    # 63,600 samples written and streamed back without holding them in memory
    r = dg.ConfigRange(points=1)
    n, seed = 63_600, 5

    def stream():
        for i, c in enumerate(dg.sample_configs(r, n, seed)):
            yield dg.generate_sample(c, r, dg.sample_rng(seed, i), i)

    path = tmp_path / "big.jsonl"
    tracemalloc.start()
    dg.write_dataset(path, stream(), r, seed, count=n)
    _, peak_write = tracemalloc.get_traced_memory()
    tracemalloc.reset_peak()
    seen = sum(1 for _ in dg.iter_dataset(path))
    _, peak_read = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert seen == n
    assert peak_read < 5_000_000


@given(st.integers(0, 2**32 - 1))
def test_generated_sample_invariants_any_seed(seed):
    r = dg.ConfigRange(points=4)
    cam = dg.sample_configs(r, 1, seed)[0]
    s = dg.generate_sample(cam, r, dg.sample_rng(seed, 0))
    bounds = r.param_bounds()
    for name in ("fx", "px", "py", "b", "theta_p", "tx", "ty", "tz"):
        lo, hi = bounds[name]
        assert lo <= getattr(s.gt, name) <= hi
    assert all(d > 0 for d in s.disparity)
