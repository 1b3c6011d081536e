import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from polar_pfcd.dataset import SceneSpec, synthesize_scene
from polar_pfcd.imagecore import ContractError
from polar_pfcd.metrics import (
    AOP_ERROR,
    IDENTICAL,
    PUBLISHED_REFERENCE,
    QUANTITIES,
    REPORT_COLUMNS,
    EvalReport,
    angle_rmse,
    compare_to_reference,
    cpsnr,
    evaluate,
    psnr,
    reports_to_frame,
    summarize,
    write_report_csv,
)


def report(scene, method, noise_level, score, aop_error=10.0):
    return EvalReport(
        scene, method, noise_level, {quantity: score for quantity in QUANTITIES}, aop_error
    )


def test_psnr():
    ref = np.zeros((12, 12))
    assert psnr(ref, ref) == math.inf
    assert_allclose(psnr(ref, np.full((12, 12), 0.1)), 20.0)
    assert_allclose(psnr(ref, np.full((12, 12), 0.1), peak=2.0), 20.0 + 20 * math.log10(2))


def test_psnr_excludes_border():
    ref = np.zeros((12, 12))
    test = ref.copy()
    test[:4] = 1.0
    test[:, -4:] = 1.0
    assert psnr(ref, test, border=4) == math.inf
    assert psnr(ref, test, border=0) < 10.0
    with pytest.raises(ContractError):
        psnr(ref, test, border=6)
    with pytest.raises(ContractError):
        psnr(ref, np.zeros((12, 10)))
    with pytest.raises(ContractError):
        psnr(ref, test, peak=0.0)


def test_cpsnr_pools_squared_error():
    ref = [np.zeros((10, 10))] * 3
    test = [np.full((10, 10), value) for value in (0.1, 0.2, 0.0)]
    expected = 10 * math.log10(1.0 / ((0.01 + 0.04) / 3))
    assert_allclose(cpsnr(ref, test, border=2), expected)
    with pytest.raises(ContractError):
        cpsnr(ref[:2], test[:2])


def test_angle_rmse_wraps_around():
    assert_allclose(angle_rmse(np.full((3, 3), 179.0), np.full((3, 3), 1.0), border=0), 2.0)
    assert_allclose(angle_rmse(np.full((3, 3), 90.0), np.full((3, 3), 0.0), border=0), 90.0)
    with pytest.raises(ContractError):
        angle_rmse(np.full((3, 3), 180.0), np.zeros((3, 3)), border=0)
    with pytest.raises(ContractError):
        angle_rmse(np.full((3, 3), -1.0), np.zeros((3, 3)), border=0)


def test_angle_rmse_mask():
    ref = np.zeros((2, 2))
    test = np.array([[10.0, 0.0], [0.0, 0.0]])
    mask = np.array([[True, False], [False, False]])
    assert_allclose(angle_rmse(ref, test, border=0, mask=mask), 10.0)
    assert_allclose(angle_rmse(ref, test, border=0), 5.0)
    with pytest.raises(ContractError):
        angle_rmse(ref, test, border=0, mask=np.zeros((2, 2), dtype=bool))


def test_evaluate_identical_mono():
    stack = synthesize_scene(SceneSpec(seed=1, height=16, width=16))
    result = evaluate(stack, stack, "scene", "method", "High")
    assert set(result.scores) == set(QUANTITIES)
    assert all(score == math.inf for score in result.scores.values())
    assert result.aop_error == 0.0


def test_evaluate_color():
    gt = synthesize_scene(SceneSpec(seed=2, height=16, width=16, color=True))
    test = gt.map(lambda channel, plane: plane + (0.01 if channel.color == "R" else 0.0))
    result = evaluate(gt, test, "scene", "method", "Low", border=2)
    # only one of three colors is off by 0.01 in every intensity
    assert_allclose(result.scores["I0"], 10 * math.log10(3 / 0.01**2))
    # the offset cancels in S1 = I0 - I90
    assert result.scores["S1"] > 100.0
    with pytest.raises(ContractError):
        evaluate(gt, gt.select_color("G"), "scene", "method", "Low")


def test_evaluate_dop_threshold():
    gt = synthesize_scene(SceneSpec(seed=3, height=16, width=16, dop=0.5))
    with pytest.raises(ContractError):
        evaluate(gt, gt, "scene", "method", "Low", dop_threshold=0.9)
    assert evaluate(gt, gt, "scene", "method", "Low", dop_threshold=0.1).aop_error == 0.0


def test_reports_to_frame_and_summary():
    reports = [
        report("b", "ours", "High", 30.0),
        report("a", "ours", "High", 32.0, aop_error=20.0),
        report("a", "plain", "High", 25.0),
    ]
    frame = reports_to_frame(reports)
    assert list(frame.columns) == list(REPORT_COLUMNS)
    assert list(frame["scene"]) == ["a", "a", "b"]
    assert list(frame["method"]) == ["ours", "plain", "ours"]

    summary = summarize(frame)
    ours = summary[summary["method"] == "ours"].iloc[0]
    assert ours["scenes"] == 2
    assert_allclose(ours["S0"], 31.0)
    assert_allclose(ours[AOP_ERROR], 15.0)


def test_compare_to_reference():
    frame = reports_to_frame([report("a", "ours", "High", 40.0, aop_error=31.0)])
    comparison = compare_to_reference(summarize(frame), PUBLISHED_REFERENCE["mpfa"])
    assert len(comparison) == len(QUANTITIES) + 1
    s0 = comparison[comparison["quantity"] == "S0"].iloc[0]
    assert_allclose(s0["delta"], 40.0 - 41.18)
    aop = comparison[comparison["quantity"] == AOP_ERROR].iloc[0]
    assert_allclose(aop["published"], 30.24)


def test_write_report_csv(tmp_path):
    reports = [report("a", "ours", "High", 31.123456), report("b", "ours", "High", math.inf)]
    path = tmp_path / "report.csv"
    write_report_csv(reports_to_frame(reports), str(path))
    text = path.read_text()
    assert "31.1235" in text
    assert IDENTICAL in text
    loaded = pd.read_csv(path)
    assert list(loaded.columns) == list(REPORT_COLUMNS)
    assert len(loaded) == 2
