import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from anatomy_da.evaluation import (
    correlation_study,
    evaluate_poses,
    format_report,
    format_table,
    mean_pose_baseline,
    mpjpe,
    pearson,
    plausibility_report,
)
from anatomy_da.skeleton import derive_bounds

from conftest import random_pose


def test_mpjpe_hand_value():
    pred = np.zeros((1, 2, 3))
    gt = np.array([[[3, 4, 0], [0, 0, 1.0]]])
    per_joint, mean = mpjpe(pred, gt)
    np.testing.assert_allclose(per_joint, [5, 1])
    assert mean == 3.0
    assert mpjpe(pred, gt, joints=[1])[1] == 1.0


def test_mpjpe_errors():
    with pytest.raises(ValueError):
        mpjpe(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)))
    with pytest.raises(ValueError):
        mpjpe(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), joints=[])


def test_mean_pose_baseline_root_centred():
    train = np.array([[[0, 0, 0], [1, 0, 0.0]], [[5, 5, 5], [6, 5, 5.0]]])
    test = np.array([[[2, 2, 2], [3, 2, 2.0]]])
    report = mean_pose_baseline(train, test, root=0)
    assert report.mean == 0.0
    with pytest.raises(ValueError):
        mean_pose_baseline(train[:0], test, 0)


def test_pearson_against_scipy(rng):
    for n in (3, 10, 100):
        x, y = rng.normal(size=n), rng.normal(size=n)
        y = y + 0.5 * x
        r, p = pearson(x, y)
        ref = stats.pearsonr(x, y)
        assert r == pytest.approx(ref[0], abs=1e-12)
        assert p == pytest.approx(ref[1], rel=1e-9, abs=1e-300)


def test_pearson_edge_cases():
    assert pearson([1, 2, 3, 4], [2, 4, 6, 8]) == (1.0, 0.0)
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2])
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=20), rng.normal(size=20)
    r1, p1 = pearson(x, y)
    r2, p2 = pearson(a * x + b, y)
    assert r1 == pytest.approx(r2, abs=1e-9)
    assert -1 <= r1 <= 1 and 0 <= p1 <= 1


def test_evaluate_and_format(spec, rng):
    gt = np.stack([random_pose(spec, rng) for _ in range(5)])
    pred = gt + 0.01
    bounds = derive_bounds(pred, spec)  # the shift rounds bone lengths, so derive from pred
    report = evaluate_poses(pred, gt, spec, bounds, joints=[0, 1])
    assert report.mean == pytest.approx(np.sqrt(3) * 0.01)
    assert set(report.group_means) == set(spec.joint_groups)
    text = format_report(report, spec, {"checkpoint": "x.ckpt"})
    assert "mpjpe_mm: 17.321" in text and "checkpoint: x.ckpt" in text
    assert "subset_joints: pelvis,spine" in text
    assert report.violation_rates["length"] == 0.0


def test_plausibility_report(spec, rng):
    poses = np.stack([random_pose(spec, rng) for _ in range(10)])
    bounds = derive_bounds(poses[:5], spec)
    rates, means = plausibility_report(poses, spec, bounds)
    assert 0 < rates["length"] <= 1
    assert means["anat"] == pytest.approx(means["sym"] + means["length"] + means["angle"])


def test_correlation_study_rows(spec, rng):
    gt = np.stack([random_pose(spec, rng) for _ in range(30)])
    bounds = derive_bounds(gt, spec)
    pred = gt + rng.normal(size=gt.shape) * rng.uniform(0, 0.1, size=(30, 1, 1))
    rows = correlation_study(pred, gt, spec, bounds)
    assert [r[0] for r in rows] == ["sym", "length", "angle", "anat"]


def test_format_table():
    out = format_table([("a", 1.23456), ("bb", 2)], ["name", "value"])
    assert out.splitlines()[1].startswith("a     1.235")


def test_mpjpe_single_joint_offset():
    gt = np.zeros((1, 5, 3))
    pred = gt.copy()
    pred[0, 2] = (3, 0, 4)
    per_joint, mean = mpjpe(pred, gt)
    assert per_joint[2] == 5.0 and mean == 1.0
    assert mpjpe(pred, gt, joints=[2])[1] == 5.0
    assert mpjpe(gt, gt)[1] == 0.0


def test_baseline_mirror_pair_averages():
    left = np.array([[0, 0, 0], [1, 2, 0], [-1, 2, 0.0]])
    right = left * np.array([-1, 1, 1.0])
    right[[1, 2]] = right[[2, 1]]
    right[1, 0] += 0.4  # break the mirror so the mean is not trivially the input
    report = mean_pose_baseline(np.stack([left, right]), left[None], root=0)
    expected = (left + right) / 2
    np.testing.assert_allclose(report.per_joint, np.linalg.norm(expected - left, axis=-1))
    assert report.per_joint[0] == 0.0
    single = mean_pose_baseline(left[None], left[None], root=0)
    assert single.mean == 0.0


def test_pearson_exact_lines():
    assert pearson([1, 2, 3], [2, 4, 6])[0] == pytest.approx(1.0, abs=1e-12)
    assert pearson([1, 2, 3], [6, 4, 2])[0] == pytest.approx(-1.0, abs=1e-12)


def test_pearson_p_value_against_t_distribution(rng):
    n, r = 20, 0.56
    a = rng.normal(size=n)
    b = rng.normal(size=n)
    a = (a - a.mean()) / np.linalg.norm(a - a.mean())
    b = b - b.mean()
    b -= (b @ a) * a
    b /= np.linalg.norm(b)
    y = r * a + np.sqrt(1 - r * r) * b
    R, p = pearson(a, y)
    assert R == pytest.approx(r, abs=1e-12)
    t = r * np.sqrt((n - 2) / (1 - r * r))
    assert p == pytest.approx(2 * stats.t.sf(t, n - 2), rel=1e-9)
    assert p < 0.05


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pearson_symmetric(seed):
    g = np.random.default_rng(seed)
    x, y = g.normal(size=(2, 8))
    assert pearson(x, y)[0] == pytest.approx(pearson(y, x)[0], abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mpjpe_rigid_invariance(seed):
    g = np.random.default_rng(seed)
    pred, gt = g.normal(size=(2, 4, 6, 3))
    q, _ = np.linalg.qr(g.normal(size=(3, 3)))
    t = g.normal(size=3)
    _, base = mpjpe(pred, gt)
    _, moved = mpjpe(pred @ q.T + t, gt @ q.T + t)
    assert abs(base - moved) < 1e-10


def test_plausibility_single_symmetry_violation(spec):
    from anatomy_da.skeleton import AnatomicalBounds

    pose = random_pose(spec, np.random.default_rng(3))
    bounds = derive_bounds(pose[None], spec)
    lengths = np.linalg.norm(pose[spec.children] - pose[spec.parents], axis=-1)
    i, j = spec.symmetric_pairs[0]
    # a tolerance below the actual asymmetry of one pair, lengths and angles untouched
    tol = np.array(bounds.sym_tol, dtype=float)
    tol[0] = abs(lengths[i] - lengths[j]) / 2
    tight = AnatomicalBounds(tol, bounds.length_lo, bounds.length_hi, bounds.angle_lo, bounds.angle_hi)
    rates, _ = plausibility_report(pose[None], spec, tight)
    assert (rates["sym"], rates["length"], rates["angle"]) == (1.0, 0.0, 0.0)


def test_plausibility_empty_rejected(spec):
    bounds = derive_bounds(random_pose(spec, np.random.default_rng(0))[None], spec)
    with pytest.raises(ValueError):
        plausibility_report(np.zeros((0, spec.n_joints, 3)), spec, bounds)
