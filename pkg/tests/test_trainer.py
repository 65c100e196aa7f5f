import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anatomy_da import trainer
from anatomy_da.datagen import default_template, render_cloud, sample_pose
from anatomy_da.model import ModelConfig, PoseNet, checkpoint_bytes
from anatomy_da.skeleton import derive_bounds
from anatomy_da.trainer import (
    AugmentationRecord,
    TrainConfig,
    TrainingDiverged,
    adapt_sfda,
    adapt_uda,
    apply_record,
    augment,
    consistency_filter_baseline,
    consistency_loss,
    ema_update,
    ramp_weight,
    reverse_pose,
    target_terms,
    task_loss,
    train_source,
)

import gradcheck


# ---- losses ------------------------------------------------------------------

def test_task_loss_hand_value():
    pred = np.array([[0.0, 0, 0], [1, 1, 1]])
    gt = np.array([[0.1, 0, 0], [1, 1, 0.7]])
    value, grad = task_loss(pred, gt)
    assert value == pytest.approx(0.2, abs=1e-12)
    np.testing.assert_array_equal(grad, [[-0.5, 0, 0], [0, 0, 0.5]])


def test_task_loss_shape_mismatch():
    with pytest.raises(ValueError):
        task_loss(np.zeros((3, 3)), np.zeros((4, 3)))


def test_consistency_loss_respects_filter():
    s = np.ones((3, 2, 3))
    t = np.zeros((3, 2, 3))
    value, grad = consistency_loss(s, t, [True, False, True])
    np.testing.assert_allclose(value, [3.0, 0, 3.0])  # six unit residuals over K=2
    assert not np.any(grad[1])


def test_task_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    assert max(gradcheck.check_task(rng) for _ in range(20)) < 1e-6


@pytest.mark.parametrize("kind", ["l1", "l2"])
def test_target_objective_gradient(kind):
    rng = np.random.default_rng(5)
    assert max(gradcheck.check_target_objective(rng, kind) for _ in range(3)) < 1e-6


# ---- EMA and ramp ----------------------------------------------------------------

def _scalar_net(v):
    return PoseNet(ModelConfig(n_joints=1), {"x.weight": np.array([v])})


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.5, 0.9999), st.integers(1, 300))
def test_ema_contraction(t0, s, mu, n):
    teacher, student = _scalar_net(t0), _scalar_net(s)
    for _ in range(n):
        ema_update(teacher, student, mu)
    gap = abs(teacher.params["x.weight"][0] - s)
    assert gap == pytest.approx(mu ** n * abs(t0 - s), abs=1e-10)


def test_ema_fixed_point_exact(rng):
    net = PoseNet.init(ModelConfig(n_joints=3, enc_dims=(4,), dec_hidden=4), 0)
    teacher = net.copy()
    ema_update(teacher, net, 0.9996)
    for k in net.params:
        np.testing.assert_array_equal(teacher.params[k], net.params[k])


def test_ema_rejects_bad_momentum():
    with pytest.raises(ValueError):
        ema_update(_scalar_net(0), _scalar_net(1), 1.5)


def test_ramp_endpoints_and_monotone():
    assert ramp_weight(0, 40) == math.exp(-5)
    assert ramp_weight(40, 40) == 1.0
    assert ramp_weight(400, 40) == 1.0
    vals = [ramp_weight(t, 40) for t in range(41)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    mt = [ramp_weight(t, 40, "mean_teacher") for t in range(41)]
    assert mt[0] == math.exp(-5) and mt[-1] == 1.0
    assert all(a <= b for a, b in zip(mt, mt[1:]))
    with pytest.raises(ValueError):
        ramp_weight(1, 0)


# ---- augmentation ----------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.floats(-math.pi, math.pi), st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.integers(0, 2**31))
def test_reverse_undoes_augmentation(angle, t, seed):
    pose = np.random.default_rng(seed).normal(size=(16, 3))
    rec = AugmentationRecord(angle, np.asarray(t), None)
    np.testing.assert_allclose(reverse_pose(apply_record(pose, rec), rec), pose, atol=1e-12)


def test_augment_subsamples_and_records(rng):
    cfg = TrainConfig(subsample_points=50)
    cloud = rng.normal(size=(200, 3))
    out, rec = augment(cloud, cfg, rng)
    assert out.shape == (50, 3) and len(set(rec.indices.tolist())) == 50
    np.testing.assert_allclose(out, apply_record(cloud, rec))
    small, rec = augment(cloud[:10], cfg, rng)
    assert small.shape == (50, 3)


def test_consistency_filter_baseline():
    a = np.zeros((2, 3))
    assert consistency_filter_baseline((a, a + 1), (a, a + 0.5))
    assert not consistency_filter_baseline((a, a + 1), (a, a + 1))


def test_target_terms_use_given_acceptance(spec, rng):
    poses = np.stack([sample_pose(default_template(), 1.0, rng) for _ in range(4)])
    bounds = derive_bounds(poses, spec)
    recs = [AugmentationRecord(0.1 * i, np.zeros(3), None) for i in range(4)]
    aug = np.stack([apply_record(p, r) for p, r in zip(poses, recs)])
    terms = target_terms(aug, recs, poses + 0.01, spec, bounds, TrainConfig(), np.array([1, 0, 1, 0], bool))
    np.testing.assert_allclose(terms.anat, 0.0, atol=1e-12)
    assert terms.con[1] == 0 and terms.con[0] > 0
    assert terms.grad_con.shape == aug.shape


# ---- config ----------------------------------------------------------------

def test_config_validation_and_roundtrip():
    cfg = TrainConfig(epochs=3, enc_dims=[8, 8])
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    for bad in ({"lambda1": -1}, {"filter_mode": "x"}, {"penalty": "l3"}, {"ramp_epochs": 0}, {"lr": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig().resolved("sfda").ema_momentum == 0.9996
    assert TrainConfig().resolved("uda").ema_momentum == 0.99
    assert TrainConfig().resolved("sfda").epochs == 80


# ---- loops ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_data():
    rng = np.random.default_rng(0)
    t = default_template()
    poses = np.stack([sample_pose(t, 1.0, rng) for _ in range(12)])
    clouds = [render_cloud(p, t, 6, 0.005, rng) for p in poses]
    tgt = [c + np.array([0, 0, 0.03]) for c in clouds[6:]]
    return clouds[:6], poses[:6], tgt, t.spec, derive_bounds(poses[:6], t.spec)


def _cfg(**kw):
    base = dict(epochs=2, subsample_points=24, enc_dims=(8, 8), dec_hidden=8, ramp_epochs=1,
                batch_source=3, batch_target=3)
    base.update(kw)
    return TrainConfig(**base)


def test_train_source_logs_and_learns(tiny_data, tmp_path):
    clouds, poses, *_ = tiny_data
    records = []
    state = train_source(clouds, poses, _cfg(epochs=3, lr=1e-2), log_path=tmp_path / "log.jsonl", callback=records.append)
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3 and [json.loads(l)["epoch"] for l in lines] == [1, 2, 3]
    assert records[-1]["task"] < records[0]["task"]
    assert state.epoch == 3


def test_uda_deterministic_and_resumable(tiny_data):
    src, sp, tgt, spec, bounds = tiny_data
    a = adapt_uda(src, sp, tgt, spec, bounds, _cfg(epochs=2))
    b = adapt_uda(src, sp, tgt, spec, bounds, _cfg(epochs=2))
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    half = adapt_uda(src, sp, tgt, spec, bounds, _cfg(epochs=1))
    resumed = adapt_uda(src, sp, tgt, spec, bounds, _cfg(epochs=2), state=half)
    assert checkpoint_bytes(resumed) == checkpoint_bytes(a)


@pytest.mark.parametrize("mode", ["none", "anat_sum", "consistency"])
def test_uda_filter_modes_run(tiny_data, mode):
    src, sp, tgt, spec, bounds = tiny_data
    logs = []
    adapt_uda(src, sp, tgt, spec, bounds, _cfg(epochs=1, filter_mode=mode), callback=logs.append)
    assert 0 <= logs[0]["accept_rate"] <= 1
    if mode == "none":
        assert logs[0]["accept_rate"] == 1


def test_sfda_freezes_head(tiny_data):
    src, sp, tgt, spec, bounds = tiny_data
    pre = train_source(src, sp, _cfg())
    post = adapt_sfda(pre, tgt, spec, bounds, _cfg(epochs=2))
    for k in pre.student.params:
        same = np.array_equal(post.student.params[k], pre.student.params[k])
        assert same == (not k.startswith("enc"))
        if not k.startswith("enc"):
            assert post.student.params[k].tobytes() == pre.student.params[k].tobytes()


def test_sfda_zero_epochs_is_identity(tiny_data):
    src, sp, tgt, spec, bounds = tiny_data
    pre = train_source(src, sp, _cfg(epochs=1))
    post = adapt_sfda(pre, tgt, spec, bounds, _cfg(epochs=0))
    assert checkpoint_bytes(post) == checkpoint_bytes(pre)


def test_sfda_rejects_wrong_skeleton(tiny_data):
    src, sp, tgt, spec, bounds = tiny_data
    pre = train_source(src, sp, _cfg(epochs=1))
    from anatomy_da.skeleton import skeleton_from_edges

    other = skeleton_from_edges(["a", "b"], [(0, 1)])
    with pytest.raises(ValueError):
        adapt_sfda(pre, tgt, other, derive_bounds([np.array([[0, 0, 0], [1.0, 0, 0]])], other), _cfg())


def test_divergence_saves_batch(tiny_data, tmp_path, monkeypatch):
    clouds, poses, *_ = tiny_data
    monkeypatch.setattr(trainer, "task_loss", lambda p, g: (np.full(len(p), np.nan), np.zeros_like(p)))
    with pytest.raises(TrainingDiverged) as err:
        train_source(clouds, poses, _cfg(), fail_dir=tmp_path)
    assert (tmp_path / "diverged_batch.npz").exists()
    assert err.value.batch_path.endswith("diverged_batch.npz")


def test_empty_inputs_rejected(tiny_data):
    src, sp, tgt, spec, bounds = tiny_data
    with pytest.raises(ValueError):
        train_source([], sp[:0], _cfg())
    with pytest.raises(ValueError):
        adapt_uda(src, sp, [], spec, bounds, _cfg())
