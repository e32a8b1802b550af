import json
import math

import numpy as np
import pytest

from cavm.metrics import evaluate, psnr, render_table, split_regions, ssim

from helpers import psnr_oracle, ssim_oracle


def test_psnr_identical_is_infinite():
    a = np.random.default_rng(0).uniform(size=(8, 8))
    assert psnr(a, a) == math.inf


def test_psnr_offset_example():
    a = np.random.default_rng(1).uniform(size=(10, 10))
    assert psnr(a, a + 0.1, data_range=1.0) == pytest.approx(20.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_psnr_matches_oracle_with_region(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 12, 9))
    region = rng.uniform(size=(12, 9)) > 0.4
    assert abs(psnr(a, b, region, 2.0) - psnr_oracle(a, b, region, 2.0)) < 1e-9


def test_psnr_symmetric_and_errors():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(2, 8, 8))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, b, np.zeros((8, 8), bool))
    with pytest.raises(ValueError):
        psnr(a, b[:4])
    with pytest.raises(ValueError):
        psnr(a, b, data_range=0)


def test_ssim_identical_is_one():
    a = np.random.default_rng(3).uniform(size=(16, 16))
    region = np.zeros((16, 16), bool)
    region[5:9, 4:12] = True
    assert ssim(a, a) == 1.0
    assert ssim(a, a, region) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_oracle_8x8(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 8, 8))
    assert abs(ssim(a, b) - ssim_oracle(a, b, np.ones((8, 8), bool), 1.0)) < 1e-9


def test_ssim_region_uses_window_centres():
    rng = np.random.default_rng(9)
    a, b = rng.uniform(size=(2, 14, 14))
    region = rng.uniform(size=(14, 14)) > 0.5
    assert abs(ssim(a, b, region, data_range=1.5) - ssim_oracle(a, b, region, 1.5)) < 1e-9


def test_ssim_anticorrelated_noise_is_near_minus_one():
    noise = np.random.default_rng(4).normal(scale=0.2, size=(16, 16))
    assert ssim(0.5 + noise, 0.5 - noise) < -0.9


def test_ssim_affine_rescaling():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(2, 12, 12))
    assert ssim(a, b, data_range=1.0) == pytest.approx(ssim(3 * a, 3 * b, data_range=3.0), abs=1e-12)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.ones((5, 5)), np.ones((5, 5)))
    region = np.zeros((8, 8), bool)
    region[0, 0] = True  # no full window centred here
    with pytest.raises(ValueError):
        ssim(np.ones((8, 8)), np.ones((8, 8)), region)


def test_region_partition():
    target = np.zeros((20, 20))
    target[2:18, 2:18] = 1.0
    mask = np.zeros((20, 20))
    mask[3, 3] = 1.0
    mask[10, 10] = 1.0
    tumor, healthy = split_regions(mask, target, dilation=2)
    brain = target > 0
    assert not (tumor & healthy).any()
    assert np.array_equal(tumor | healthy, brain)
    assert tumor[10, 12] and not tumor[10, 13] and not tumor[12, 12]  # radius-2 disk
    assert not tumor[1, 3]  # clipped to the brain


def _dataset(n, seed=0):
    rng = np.random.default_rng(seed)
    targets, masks = [], []
    for _ in range(n):
        t = np.zeros((24, 24))
        t[2:22, 2:22] = rng.uniform(0.5, 1.0, size=(20, 20))
        m = np.zeros((24, 24))
        m[9:14, 10:15] = 1.0
        targets.append(t)
        masks.append(m)
    return targets, masks


def test_evaluate_identical_predictions():
    targets, masks = _dataset(3)
    report = evaluate(targets, targets, masks)
    assert report.tumor.ssim_mean == 100.0 and report.tumor.psnr_mean == math.inf
    assert report.healthy.ssim_mean == 100.0 and report.count == 3


def test_evaluate_aggregates_per_sample_values():
    targets, masks = _dataset(4, seed=1)
    rng = np.random.default_rng(7)
    preds = [t + rng.normal(scale=0.05, size=t.shape) for t in targets]
    report = evaluate(preds, targets, masks)
    tumor_psnr = []
    for p, t, m in zip(preds, targets, masks):
        tumor, _ = split_regions(m, t)
        tumor_psnr.append(psnr_oracle(p, t, tumor, t.max()))
    assert report.tumor.psnr_mean == pytest.approx(np.mean(tumor_psnr), abs=1e-9)
    assert report.tumor.psnr_std == pytest.approx(np.std(tumor_psnr), abs=1e-9)
    assert report.per_sample["tumor_psnr"] == pytest.approx(tumor_psnr, abs=1e-9)


def test_evaluate_length_mismatch():
    targets, masks = _dataset(2)
    with pytest.raises(ValueError):
        evaluate(targets[:1], targets, masks)


def test_report_renderings():
    targets, masks = _dataset(2)
    preds = [t * 0.9 for t in targets]
    reports = {"A": evaluate(preds, targets, masks), "B": evaluate(targets, targets, masks)}
    lines = reports["A"].to_json("A", seed=3).splitlines()
    records = [json.loads(line) for line in lines]
    assert [r["region"] for r in records] == ["tumor", "healthy"]
    assert all(r["method"] == "A" and r["seed"] == 3 for r in records)
    assert json.loads(reports["B"].to_json("B").splitlines()[0])["psnr_mean"] == "inf"
    table = render_table(reports).splitlines()
    assert len(table) == 4 and table[0].startswith("Method")
    assert "inf" in table[3]
