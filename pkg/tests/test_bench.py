import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mprbfn.bench import (
    ACCURACY_COLUMNS,
    TIMING_COLUMNS,
    EvalReport,
    ModelRow,
    Timing,
    YawBinned,
    accuracy_csv,
    emit_report,
    evaluate_generator,
    rmse,
    text_table,
    time_inference,
    time_per_call,
    yaw_bin_index,
    yaw_binned_error,
)


def test_rmse_examples():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(3, 31, 5))
    assert rmse(t, t) == 0.0
    p = t.copy()
    p[..., 0] += 1.0
    assert rmse(p, t) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rmse(np.zeros((0, 31, 5)), np.zeros((0, 31, 5)))
    with pytest.raises(ValueError):
        rmse(p, t, "acceleration")


def test_rmse_hand_computed():
    t = np.zeros((2, 2, 5))
    p = np.zeros((2, 2, 5))
    p[0, 0, :2] = (3, 4)  # 5 m
    p[1, 1, 0] = 1.0  # 1 m
    p[0, 1, 2] = 2.0
    p[1, 0, 4] = -0.5
    assert rmse(p, t) == pytest.approx(math.sqrt((25 + 1) / 4), abs=1e-12)
    assert rmse(p, t, "velocity") == pytest.approx(math.sqrt(4 / 4), abs=1e-12)
    assert rmse(p, t, "orientation") == pytest.approx(math.sqrt(0.25 / 4), abs=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_rmse_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(6, 4, 5)), rng.normal(size=(6, 4, 5))
    perm = rng.permutation(6)
    for g in ("position", "velocity", "orientation"):
        assert rmse(p[perm], t[perm], g) == pytest.approx(rmse(p, t, g), rel=1e-12)


def test_yaw_bins():
    np.testing.assert_array_equal(yaw_bin_index(np.array([0.0, 0.39, 0.41, -0.9, 1.3, -1.6])), [0, 0, 1, 1, 2, 2])
    t = np.zeros((4, 3, 5))
    p = t.copy()
    p[:, :, 0] = [[1], [2], [3], [4]]
    q = np.zeros((4, 5))
    res = yaw_binned_error(p, t, q)
    assert list(res.mean_error) == [0.0] and res.mean_error[0.0] == 2.5
    assert res.valid_share is None
    q[2:, 4] = 1.6
    res = yaw_binned_error(p, t, q, valid=np.ones(4, bool))
    assert res.valid_share == {0.0: 1.0, 1.6: 1.0}
    assert 0.8 not in res.mean_error
    res = yaw_binned_error(p, t, q, valid=np.array([True, True, False, True]))
    assert res.valid_share[1.6] == 0.5 and res.mean_error[1.6] == 4.0


def test_evaluate_generator_excludes_invalid():
    t = np.zeros((2, 3, 5))
    p = t.copy()
    p[1, :, 0] = 100.0
    row = evaluate_generator("x", p, t, np.zeros((2, 5)), valid=np.array([True, False]))
    assert row.position_rmse == 0.0 and row.n_evaluated == 1
    row = evaluate_generator("x", p, t, np.zeros((2, 5)), valid=np.zeros(2, bool))
    assert math.isnan(row.position_rmse)


def test_timing():
    calls = []
    res = time_inference(lambda b: calls.append(len(b)), np.zeros((3, 5)), batch_sizes=(2, 7), repetitions=4)
    assert [r.batch for r in res] == [2, 7]
    assert calls == [2] * 5 + [7] * 5
    assert all(r.mean_s >= 0 and r.repetitions == 4 for r in res)
    assert Timing(10, 1.0, 0.6, 30).unstable and not Timing(10, 1.0, 0.1, 30).unstable
    assert Timing(10, 1.0, 0.0, 30).per_trajectory_s == 0.1
    with pytest.raises(ValueError):
        time_inference(len, np.zeros((1, 5)), repetitions=0)
    t = time_per_call(lambda x: x, [1, 2, 3])
    assert t.batch == 1 and t.repetitions == 3


def toy_report():
    yaw = YawBinned({0.0: 1.0, 1.6: 3.0}, {0.0: 2, 1.6: 1}, {0.0: 1.0, 1.6: 0.5})
    return EvalReport(
        rows=[ModelRow("mp_rbfn", 0.25, 0.125, 0.0625, 3, YawBinned({0.0: 0.5}, {0.0: 3})),
              ModelRow("analytic", 1.5, 0.75, 0.5, 2, yaw)],
        timing={"mp_rbfn": [Timing(50, 0.001, 0.0001, 30)]},
        metadata={"dataset_sha256": "abc"},
    )


GOLDEN_ACCURACY = (
    ",".join(ACCURACY_COLUMNS) + "\n"
    "mp_rbfn,3,0.25,0.125,0.0625,0.5,,,,,\n"
    "analytic,2,1.5,0.75,0.5,1,,3,1,,0.5\n"
)


def test_accuracy_csv_golden():
    assert accuracy_csv(toy_report()) == GOLDEN_ACCURACY


def test_emit_report_idempotent(tmp_path):
    rep = toy_report()
    paths = emit_report(rep, tmp_path / "a")
    assert sorted(p.name for p in paths) == ["accuracy.csv", "report.txt", "rmse.svg", "timing.csv", "timing.svg"]
    first = {p.name: p.read_bytes() for p in paths}
    again = {p.name: p.read_bytes() for p in emit_report(rep, tmp_path / "a")}
    assert first == again
    assert first["timing.csv"].decode().splitlines()[0] == ",".join(TIMING_COLUMNS)
    assert "Euclidean" in first["report.txt"].decode()


def test_skip_timing_has_no_timing_outputs(tmp_path):
    rep = toy_report()
    rep.timing = {}
    names = sorted(p.name for p in emit_report(rep, tmp_path))
    assert names == ["accuracy.csv", "report.txt", "rmse.svg"]
    assert "batch" not in text_table(rep)


def test_report_does_not_mutate_inputs():
    rng = np.random.default_rng(1)
    p, t, q = rng.normal(size=(5, 3, 5)), rng.normal(size=(5, 3, 5)), rng.normal(size=(5, 5))
    copies = [a.copy() for a in (p, t, q)]
    evaluate_generator("m", p, t, q)
    for a, b in zip((p, t, q), copies):
        np.testing.assert_array_equal(a, b)
