import json
from fractions import Fraction

import numpy as np
import pytest

from priorsr.core import ShapeError, downsample_avg, from_unit_range, to_unit_range
from priorsr.degrade import (DegradationRanges, DegradationRecord, EmptySourceDir, NoiseParams, apply,
                             build_dataset, identity_record, load_dataset, make_toy_source,
                             make_toy_sources, sample_record)
from priorsr.metrics import psnr_y


@pytest.fixture(scope="module")
def hr():
    return make_toy_source(64, 5)[0]


def test_sample_record_deterministic():
    r = DegradationRanges()
    assert sample_record(r, 42) == sample_record(r, 42)
    assert sample_record(r, 42) != sample_record(r, 43)


def test_identity_ranges_give_identity_record():
    rec = sample_record(DegradationRanges.identity(), 7)
    assert rec.stage2 is None
    assert rec.stage1.blur.kernel_kind == "none"
    assert rec.stage1.noise.kind == "none"
    assert rec.stage1.jpeg is None
    assert rec.scale_product() == Fraction(1, 4)
    assert not rec.final_sinc.applied


def test_record_ranges_monte_carlo():
    r = DegradationRanges(sinc_enabled=True)
    recs = [sample_record(r, s) for s in range(10_000)]
    s1 = np.array([max(x.stage1.blur.sigma) for x in recs])
    s2 = np.array([max(x.stage2.blur.sigma) for x in recs if x.stage2 and x.stage2.blur.kernel_kind != "none"])
    gauss = np.array([st.noise.sigma_or_scale for x in recs for st in x.stages() if st.noise.kind == "gaussian"])
    q = np.array([st.jpeg for x in recs for st in x.stages() if st.jpeg is not None])
    for vals, (lo, hi) in ((s1, (0.2, 3.0)), (s2, (0.2, 1.5)), (gauss, (1 / 255, 25 / 255))):
        assert vals.min() >= lo and vals.max() <= hi
        # coverage: samples reach within 2% of each end
        assert vals.min() < lo + 0.02 * (hi - lo) and vals.max() > hi - 0.02 * (hi - lo)
    assert q.min() == 30 and q.max() == 95
    frac2 = np.mean([x.stage2 is not None for x in recs])
    assert abs(frac2 - 0.8) < 0.02
    assert all(x.scale_product() == Fraction(1, 4) for x in recs)
    assert any(x.final_sinc.applied for x in recs)


def test_record_json_roundtrip():
    rec = sample_record(DegradationRanges(sinc_enabled=True), 3)
    assert DegradationRecord.from_json(rec.to_json()) == rec


def test_identity_apply_equals_block_average(hr):
    lr = apply(hr, identity_record(4))
    expected = from_unit_range(downsample_avg(to_unit_range(hr), 4))
    assert lr.shape == (16, 16, 3)
    assert np.array_equal(lr, expected)


def test_apply_replays_bit_exactly(hr):
    rec = sample_record(DegradationRanges(sinc_enabled=True), 11)
    assert apply(hr, rec).tobytes() == apply(hr, rec).tobytes()


def test_apply_shape_error():
    with pytest.raises(ShapeError):
        apply(np.zeros((30, 30, 3), np.uint8), identity_record(4))


def _noise_record(sigma):
    rec = identity_record(4, seed=123)
    rec.stage1.noise = NoiseParams("gaussian", sigma)
    return rec


def test_gaussian_noise_statistics():
    flat = np.full((512, 512, 3), 128, np.uint8)
    s = 10 / 255
    clean = apply(flat, identity_record(4)).astype(np.float64) / 255
    noisy = apply(flat, _noise_record(s)).astype(np.float64) / 255
    std = np.std(noisy - clean)
    assert abs(std - s) / s < 0.05


def test_noise_monotonically_lowers_psnr(hr):
    from priorsr.metrics import bicubic_baseline
    values = [psnr_y(bicubic_baseline(apply(hr, _noise_record(s / 255))), hr) for s in (2, 10, 25)]
    assert values[0] > values[1] > values[2]


def test_build_dataset(tmp_path):
    make_toy_sources(tmp_path / "src", 3, 64, 0)
    assert build_dataset(tmp_path / "src", tmp_path / "empty", 0, DegradationRanges(), 0, 64)["pairs"] == []
    assert not (tmp_path / "empty").exists()
    m = build_dataset(tmp_path / "src", tmp_path / "d", 8, DegradationRanges(), 5, 64)
    assert len(m["pairs"]) == 8
    assert len({p["seed"] for p in m["pairs"]}) == 8
    on_disk = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert on_disk == m
    first = {p["lr_path"]: (tmp_path / "d" / p["lr_path"]).read_bytes() for p in m["pairs"]}
    build_dataset(tmp_path / "src", tmp_path / "d2", 8, DegradationRanges(), 5, 64)
    for rel, data in first.items():
        assert (tmp_path / "d2" / rel).read_bytes() == data
    pairs = load_dataset(tmp_path / "d")
    assert all(p.lr.shape == (16, 16, 3) and p.hr.shape == (64, 64, 3) for p in pairs)
    assert all(p.scene_tags for p in pairs)


def test_regenerate_from_record(tmp_path):
    make_toy_sources(tmp_path / "src", 2, 64, 1)
    build_dataset(tmp_path / "src", tmp_path / "d", 2, DegradationRanges(sinc_enabled=True), 9, 64)
    for pair, lr_file in zip(load_dataset(tmp_path / "d"), sorted((tmp_path / "d" / "lr").glob("*.png"))):
        original = lr_file.read_bytes()
        lr_file.unlink()
        from priorsr.core import write_png
        write_png(lr_file, apply(pair.hr, pair.record))
        assert lr_file.read_bytes() == original


def test_empty_source_dir(tmp_path):
    (tmp_path / "src").mkdir()
    with pytest.raises(EmptySourceDir):
        build_dataset(tmp_path / "src", tmp_path / "d", 2, DegradationRanges(), 0, 64)
