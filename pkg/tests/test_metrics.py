from __future__ import annotations

import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import psnr_loop, ssim_loop, tv_loop
from spdrecon.errors import InputDomainError
from spdrecon.metrics import (
    CSV_COLUMNS,
    MetricReport,
    MetricRow,
    normalize_pair,
    psnr,
    ssim,
    temporal_consistency,
    total_variation,
)
from spdrecon.scenes import band_limited_texture

unit_images = arrays(np.float64, (8, 8), elements=st.floats(0, 1))


# ------------------------------------------------------------ PSNR


def test_psnr_offset_0_1_is_20db():
    a = np.random.default_rng(0).uniform(0, 0.9, (10, 10))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_identical_is_inf():
    a = np.ones((4, 4))
    assert psnr(a, a) == math.inf


def test_psnr_zero_vs_one():
    assert psnr(np.zeros((3, 3)), np.ones((3, 3))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_peak_and_errors():
    a = np.zeros((2, 2))
    assert psnr(a, a + 2, peak=2.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InputDomainError):
        psnr(a, np.zeros((2, 3)))
    with pytest.raises(InputDomainError):
        psnr(a, a + 1, peak=0)


@given(a=unit_images, b=unit_images)
def test_psnr_matches_loop_and_symmetric(a, b):
    p = psnr(a, b)
    ref = psnr_loop(a, b)
    if math.isinf(ref):
        assert math.isinf(p)
    else:
        assert p == pytest.approx(ref, rel=1e-9)
        assert psnr(b, a) == p


# ------------------------------------------------------------ SSIM


def test_ssim_identical_is_one():
    a = np.random.default_rng(1).uniform(0, 1, (16, 16))
    assert ssim(a, a) == 1.0


def test_ssim_negative_pattern_low():
    # checkerboard of 0.1 / 0.9: no mid-gray, so x and 1 - x anti-correlate
    a = np.where((np.add.outer(np.arange(24), np.arange(24)) % 2) == 0, 0.1, 0.9)
    assert ssim(a, 1 - a) < 0.2


@pytest.mark.parametrize("a,b", [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0), (0.9, 0.1)])
def test_ssim_constants_closed_form(a, b):
    c1 = 0.01 ** 2
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    got = ssim(np.full((12, 12), a), np.full((12, 12), b))
    if a == b:
        assert got == 1.0
    else:
        assert got == pytest.approx(expected, rel=1e-12)


def test_ssim_too_small():
    with pytest.raises(InputDomainError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


def test_ssim_matches_loop_16x16():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0, 1, (2, 16, 16))
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(a=unit_images, b=unit_images)
def test_ssim_loop_oracle_8x8_window_7(a, b):
    # an 11-pixel window does not fit 8x8 images, so the oracle uses 7
    got = ssim(a, b, window_size=7)
    ref = ssim_loop(a, b, window=7)
    assert got == pytest.approx(ref, rel=1e-9, abs=1e-12)
    assert ssim(b, a, window_size=7) == pytest.approx(got, rel=1e-12, abs=1e-15)
    assert -1.0 <= got <= 1.0


# ------------------------------------------------------------ TV


def test_tv_constant_zero():
    assert total_variation(np.full((5, 6), 3.0)) == 0.0


def test_tv_unit_step_column():
    img = np.zeros((7, 9))
    img[:, 4:] = 1.0
    assert total_variation(img) == 7


def test_tv_checkerboard():
    img = (np.add.outer(np.arange(6), np.arange(9)) % 2).astype(float)
    assert total_variation(img) == tv_loop(img) == 6 * 8 + 5 * 9


@given(a=arrays(np.float64, (8, 8), elements=st.floats(-10, 10)))
def test_tv_matches_loop(a):
    assert total_variation(a) == pytest.approx(tv_loop(a), rel=1e-9, abs=1e-12)


# ------------------------------------------------------------ temporal


def _zero_flows(n, shape):
    return [np.zeros(shape + (2,)) for _ in range(n - 1)]


def test_temporal_static_zero():
    frame = np.random.default_rng(3).uniform(size=(16, 16))
    video = np.stack([frame] * 4)
    assert temporal_consistency(video, _zero_flows(4, (16, 16))) < 1e-6


def test_temporal_corrupted_frame_scores_higher():
    frame = np.random.default_rng(4).uniform(size=(16, 16))
    video = np.stack([frame] * 4)
    bad = video.copy()
    bad[2] += np.random.default_rng(5).normal(0, 0.2, (16, 16))
    flows = _zero_flows(4, (16, 16))
    assert temporal_consistency(bad, flows) > temporal_consistency(video, flows)


def test_temporal_pan_with_true_flows_close_to_static():
    # both videos carry the same independent per-frame noise
    tex = band_limited_texture((48, 48), seed=6)
    rng = np.random.default_rng(7)
    noise = rng.normal(0, 0.02, (5, 48, 48))
    static = np.stack([tex()] * 5) + noise
    pan = np.stack([tex((1.5 * k, -0.5 * k)) for k in range(5)]) + noise
    flow = np.zeros((48, 48, 2))
    flow[..., 0], flow[..., 1] = 1.5, -0.5
    base = temporal_consistency(static, _zero_flows(5, (48, 48)))
    moved = temporal_consistency(pan, [flow] * 4)
    assert moved <= 2 * base


def test_temporal_length_mismatch():
    with pytest.raises(InputDomainError):
        temporal_consistency(np.zeros((3, 4, 4)), _zero_flows(4, (4, 4)))


def test_temporal_single_frame():
    assert temporal_consistency(np.zeros((1, 4, 4)), []) == 0.0


# ------------------------------------------------------------ report


def test_normalize_pair_clamps():
    t, e = normalize_pair(np.array([[0.0, 4.0]]), np.array([[-1.0, 6.0]]))
    np.testing.assert_array_equal(t, [[0.0, 1.0]])
    np.testing.assert_array_equal(e, [[0.0, 1.0]])
    with pytest.raises(InputDomainError):
        normalize_pair(np.zeros((2, 2)), np.zeros((2, 2)))


def test_report_json_and_csv():
    rep = MetricReport(parameters={"seed": 1})
    rep.add(MetricRow("average", 3.25, 5, 20.0, 0.5, 10.0))
    rep.add(MetricRow("qudi", 3.25, 5, math.inf, 1.0, 9.0, 0.01))
    doc = json.loads(rep.to_json())
    assert doc["rows"][1]["psnr"] == "inf"
    assert doc["mean"]["average"]["psnr"] == 20.0
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[1][:3] == ["average", "3.25", "5"] and rows[1][6] == ""
    assert rows[2][3] == "inf"
    assert math.isnan(rep.mean("align-merge")["psnr"])
