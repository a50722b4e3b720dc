import numpy as np
import pytest

from handprior.metrics import (DEFAULT_THRESHOLDS, avg_joint_error, evaluate, fraction_within,
                               read_curve_csv)


def test_perfect_predictions():
    g = np.random.default_rng(0).normal(size=(5, 16, 3))
    per_joint, overall = avg_joint_error(g, g)
    assert overall == 0.0 and not per_joint.any()
    assert np.all(fraction_within(g, g, [0.0, 1.0]) == 1.0)


def test_three_four_five():
    g = np.zeros((1, 3, 3))
    p = g.copy()
    p[0, 1] = [3.0, 4.0, 0.0]
    per_joint, overall = avg_joint_error(p, g)
    np.testing.assert_allclose(per_joint, [0.0, 5.0, 0.0])
    assert overall == pytest.approx(5.0 / 3)


def test_matches_loop_oracle():
    rng = np.random.default_rng(1)
    p, g = rng.normal(size=(30, 14, 3)) * 10, rng.normal(size=(30, 14, 3)) * 10
    ref = np.zeros(14)
    for f in range(30):
        for j in range(14):
            ref[j] += np.sqrt(sum((p[f, j, k] - g[f, j, k]) ** 2 for k in range(3))) / 30
    per_joint, overall = avg_joint_error(p, g)
    assert np.max(np.abs(per_joint - ref)) <= 1e-10
    assert abs(overall - ref.mean()) <= 1e-10


def test_fraction_examples():
    g = np.zeros((2, 2, 3))
    p = g.copy()
    p[0, 0, 0] = 5.0
    p[1, 1, 2] = 15.0
    assert fraction_within(p, g, [10.0])[0] == 0.5
    assert fraction_within(p, g, [np.inf])[0] == 1.0
    assert fraction_within(p, g, [0.0])[0] == 0.0


def test_fraction_below_each_joint_curve():
    rng = np.random.default_rng(2)
    p, g = rng.normal(size=(50, 6, 3)) * 20, np.zeros((50, 6, 3))
    curve = fraction_within(p, g)
    for j in range(6):
        joint = fraction_within(p[:, j:j + 1], g[:, j:j + 1])
        assert np.all(curve <= joint)


def test_monotone_bounded_permutation_invariant():
    rng = np.random.default_rng(3)
    p, g = rng.normal(size=(40, 16, 3)) * 15, np.zeros((40, 16, 3))
    c = fraction_within(p, g)
    assert np.all(np.diff(c) >= 0) and c.min() >= 0 and c.max() <= 1
    perm = rng.permutation(40)
    np.testing.assert_array_equal(fraction_within(p[perm], g[perm]), c)
    assert avg_joint_error(p[perm], g[perm])[1] == pytest.approx(avg_joint_error(p, g)[1], abs=1e-12)


def test_mismatch_rejected():
    with pytest.raises(ValueError):
        avg_joint_error(np.zeros((2, 3, 3)), np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        fraction_within(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)))
    with pytest.raises(ValueError):
        fraction_within(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), [2.0, 1.0])


def test_report_csvs(tmp_path):
    rng = np.random.default_rng(4)
    p, g = rng.normal(size=(10, 3, 3)) * 5, np.zeros((10, 3, 3))
    rep = evaluate(p, g, joint_names=["a", "b", "c"])
    assert rep.frames == 10
    assert rep.overall == pytest.approx(rep.per_joint.mean())
    rep.write_curve_csv(tmp_path / "curve.csv")
    rep.write_joint_csv(tmp_path / "joints.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "threshold_mm,fraction" and len(lines) == len(DEFAULT_THRESHOLDS) + 1
    t, f = read_curve_csv(tmp_path / "curve.csv")
    np.testing.assert_array_equal(t, DEFAULT_THRESHOLDS)
    assert np.all(np.diff(f) >= 0)
    assert (tmp_path / "joints.csv").read_text().splitlines()[0] == "joint,mean_error_mm"
    assert (tmp_path / "joints.csv").read_text().splitlines()[1].startswith("a,")
