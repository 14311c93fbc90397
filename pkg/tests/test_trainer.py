import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monorigid import trainer as tr
from monorigid.diffcore import ContractError, Tensor, load_checkpoint, precision, save_checkpoint
from monorigid.losses import LossConfig, total_loss
from monorigid.nets import HeadConfig, ModelConfig, MonoRigidModel, apply_ablation
from monorigid.synthscene import SceneConfig, generate_sequence, write_dataset
from monorigid.trainer import (
    OptimizerState, TrainConfig, TrainingError, adam_step, augment, colour_jitter, ema_update,
    flip_batch, instance_slots, load_model, make_batch, mirror_pose_params, train, triplet_index,
)


def tiny_model_config(**kw):
    d = dict(feature_channels=8, encoder_channels=(8, 8, 12, 12, 16), decoder_channels=(8, 8, 8, 8),
             ego_channels=8, instance=HeadConfig(N=3, embed_dim=16, heads=2, layers=1, roi_size=3,
                                                 roi_channels=8))
    d.update(kw)
    return ModelConfig(**d)


SMALL = dict(width=96, height=32)


@pytest.fixture(scope="module")
def sequences():
    cfg = SceneConfig(frames=4, n_objects=2, seed=5, **SMALL)
    return [generate_sequence(cfg, i) for i in range(2)]


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.betas, c.ema_decay, c.batch, c.flip_prob) == (1e-4, (0.9, 0.999), 0.995, 2, 0.5)
        assert c.lr_at(14) == 1e-4 and c.lr_at(15) == 1e-5

    @pytest.mark.parametrize("kw", [dict(lr=0), dict(ema_decay=1.0), dict(epochs=10, lr_drop_epoch=10),
                                    dict(sources=(0, 1)), dict(batch=0)])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            TrainConfig(**kw)

    def test_run_config_round_trip(self, tmp_path):
        mc, tc = apply_ablation(tiny_model_config(), "A5"), TrainConfig(epochs=3, lr_drop_epoch=2, seed=4)
        (tmp_path / "c.json").write_text(tr.dump_run_config(mc, tc))
        assert tr.load_run_config(tmp_path / "c.json") == (mc, tc)

    def test_run_config_rejects_unknown(self, tmp_path):
        (tmp_path / "c.json").write_text('{"model": {"wings": 2}}')
        with pytest.raises(ContractError):
            tr.load_run_config(tmp_path / "c.json")


class TestAdam:
    def test_single_step_closed_form(self):
        x = np.zeros(1)
        state = OptimizerState.create([x])
        cfg = TrainConfig()
        assert adam_step([x], [np.ones(1)], state, cfg)
        # m_hat = v_hat = 1 after bias correction
        assert abs(x[0] - (-cfg.lr / (1.0 + cfg.adam_eps))) < 1e-12
        assert state.step == 1

    def test_two_step_reference(self):
        cfg = TrainConfig(lr=0.01)
        x = np.array([0.5])
        state = OptimizerState.create([x])
        ref, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate((0.3, -1.2), 1):
            adam_step([x], [np.array([g])], state, cfg)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
        assert abs(x[0] - ref) < 1e-12

    def test_zero_gradient(self):
        x = np.array([1.0, 2.0])
        state = OptimizerState.create([x])
        adam_step([x], [np.array([1.0, 1.0])], state, TrainConfig())
        before, m_before = x.copy(), state.m[0].copy()
        adam_step([x], [np.zeros(2)], state, TrainConfig())
        np.testing.assert_allclose(state.m[0], 0.9 * m_before, rtol=1e-15)
        # the bias-corrected first moment is still non-zero, so the update is not zero;
        # with a fresh state a zero gradient leaves parameters unchanged
        y = np.array([1.0, 2.0])
        fresh = OptimizerState.create([y])
        adam_step([y], [np.zeros(2)], fresh, TrainConfig())
        assert np.array_equal(y, [1.0, 2.0]) and not np.array_equal(x, before)

    def test_non_finite_rejected(self):
        x = np.zeros(2)
        state = OptimizerState.create([x])
        assert not adam_step([x], [np.array([np.nan, 1.0])], state, TrainConfig())
        assert state.rejected_steps == 1 and state.step == 0 and np.array_equal(x, [0, 0])

    def test_tensor_params_and_shape_check(self):
        p = Tensor(np.ones((2, 2)), requires_grad=True, dtype=np.float32)
        state = OptimizerState.create([p])
        adam_step([p], [np.ones((2, 2))], state, TrainConfig())
        assert p.data.dtype == np.float32 and np.all(p.data < 1)
        with pytest.raises(ContractError):
            adam_step([p], [np.ones(3)], state, TrainConfig())

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(0)
            x = [rng.normal(size=(3, 4)), rng.normal(size=5)]
            st_ = OptimizerState.create(x)
            for _ in range(10):
                adam_step(x, [np.sin(a) for a in x], st_, TrainConfig(lr=1e-2))
            return x
        a, b = run(), run()
        assert all(np.array_equal(u, v) for u, v in zip(a, b))


class TestEMA:
    def test_decay_zero_copies(self):
        s = [np.zeros(3)]
        ema_update(s, [np.array([1.0, 2.0, 3.0])], 0.0)
        assert np.array_equal(s[0], [1.0, 2.0, 3.0])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 0.999), st.integers(1, 50), st.floats(-5, 5), st.floats(-5, 5))
    def test_geometric_series(self, decay, k, s0, p):
        s = [np.array([s0])]
        for _ in range(k):
            ema_update(s, [np.array([p])], decay)
        expected = s0 * decay ** k + p * (1 - decay ** k)
        assert abs(s[0][0] - expected) < 1e-12
        assert np.all(np.isfinite(s[0]))


class TestData:
    def test_triplets_exclude_endpoints(self, sequences):
        items = triplet_index(sequences, (-1, 1))
        assert items == [(0, 1), (0, 2), (1, 1), (1, 2)]
        assert triplet_index(sequences, (-2, 1)) == [(0, 2), (1, 2)]

    def test_instance_slots(self, sequences):
        f = sequences[0][1]
        masks, boxes, valid = instance_slots(f, 3)
        n = sum(1 for i in f.gt_instances.instances if i.mask.any())
        assert valid.sum() == n and not masks[~valid].any()
        for k in np.nonzero(valid)[0]:
            ys, xs = np.nonzero(masks[k])
            assert np.array_equal(boxes[k], [xs.min() - 0.5, ys.min() - 0.5, xs.max() + 0.5, ys.max() + 0.5])

    def test_instance_slots_keep_largest(self, sequences):
        f = sequences[0][1]
        sizes = sorted((int(i.mask.sum()) for i in f.gt_instances.instances), reverse=True)
        masks, _, valid = instance_slots(f, 1)
        assert valid.sum() == 1 and masks[0].sum() == sizes[0]

    def test_flip_twice_is_identity(self, sequences):
        b = make_batch(sequences, [(0, 1), (1, 2)], (-1, 1), 3)
        bb = flip_batch(flip_batch(b))
        assert np.array_equal(bb.target, b.target) and np.array_equal(bb.boxes, b.boxes)
        assert np.array_equal(bb.masks, b.masks) and bb.K == b.K

    def test_flipped_boxes_bound_flipped_masks(self, sequences):
        b = flip_batch(make_batch(sequences, [(0, 1)], (-1, 1), 3))
        for k in np.nonzero(b.valid[0])[0]:
            ys, xs = np.nonzero(b.masks[0, k])
            assert np.array_equal(b.boxes[0, k], [xs.min() - 0.5, ys.min() - 0.5, xs.max() + 0.5, ys.max() + 0.5])

    def test_jitter_consistent_within_sample(self):
        img = np.random.default_rng(0).random((2, 4, 5, 3)).astype(np.float32)
        a, b = colour_jitter([img, img.copy()], np.random.default_rng(1))
        assert np.array_equal(a, b) and not np.array_equal(a, img)

    def test_augment_leaves_loss_images_clean(self, sequences):
        b = make_batch(sequences, [(0, 1), (1, 1)], (-1, 1), 3)
        cfg = TrainConfig(flip_prob=0.0)
        out = augment(b, np.random.default_rng(0), cfg)
        assert np.array_equal(out.target, b.target)
        assert not np.array_equal(out.net_target, out.target)


class TestFlipInvariance:
    @pytest.mark.parametrize("rigid", [True, False])
    def test_loss_equal_on_flipped_batch(self, sequences, rigid):
        mc = tiny_model_config(piecewise_rigid=rigid)
        model = MonoRigidModel(mc, seed=0)
        batch = make_batch(sequences, [(0, 1), (1, 2)], (-1, 1), 3)
        out = model(batch.target, batch.sources, batch.boxes, batch.valid)
        depths = [d.data for d in out.depths]
        ego = [e.data for e in out.ego]
        inst = [out.instances.data[:, :, i] for i in range(2)] if rigid else None
        masks = batch.masks if rigid else None
        cfg = LossConfig()
        with precision(np.float64):
            base = total_loss(batch.target, batch.sources, depths, batch.K, ego, masks, inst, cfg)
            fb = flip_batch(batch)
            fl = total_loss(fb.target, fb.sources, [np.ascontiguousarray(d[:, :, ::-1]) for d in depths],
                            fb.K, [mirror_pose_params(e) for e in ego], fb.masks if rigid else None,
                            [mirror_pose_params(p) for p in inst] if rigid else None, cfg)
        assert abs(float(base.total.data) - float(fl.total.data)) < 1e-5

    def test_mirrored_non_identity_pose(self, sequences):
        # flip equivariance holds for any motion once the pose is mirrored
        batch = make_batch(sequences, [(0, 1)], (-1, 1), 3)
        depth = [np.full((1, 32 // 2 ** k, 96 // 2 ** k), 8.0) for k in range(4)]
        ego = [np.array([[0.01, 0.02, -0.01, 0.1, 0.0, 0.3]]), np.array([[0.0, -0.02, 0.01, -0.1, 0.05, -0.3]])]
        with precision(np.float64):
            a = total_loss(batch.target, batch.sources, depth, batch.K, ego, None, None, LossConfig())
            fb = flip_batch(batch)
            b = total_loss(fb.target, fb.sources, depth, fb.K, [mirror_pose_params(e) for e in ego],
                           None, None, LossConfig())
        assert abs(float(a.total.data) - float(b.total.data)) < 1e-5


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = SceneConfig(frames=4, n_objects=2, seed=9, **SMALL)
    write_dataset([generate_sequence(cfg, i) for i in range(2)], root, cfg)
    return root


class TestTrain:
    def test_zero_epochs_is_initialisation(self, data_root, tmp_path):
        mc = tiny_model_config()
        ck = train(data_root, mc, TrainConfig(epochs=0, seed=3), tmp_path)
        tensors, meta = load_checkpoint(ck)
        init = MonoRigidModel(mc, seed=3).state_dict()
        assert list(tensors) == list(init)
        assert all(np.array_equal(tensors[k], init[k]) for k in init)
        assert meta["weights"] == "ema" and meta["steps"] == 0

    def test_reproducible_and_logged(self, data_root, tmp_path):
        mc, tc = tiny_model_config(), TrainConfig(epochs=2, lr_drop_epoch=1, seed=1)
        a = train(data_root, mc, tc, tmp_path / "a")
        b = train(data_root, mc, tc, tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()
        rows = list(csv.DictReader(open(tmp_path / "a" / tr.LOG_NAME)))
        assert list(rows[0]) == tr.TRAIN_LOG_FIELDS
        assert len(rows) == 4 and [float(r["lr"]) for r in rows] == [1e-4, 1e-4, 1e-5, 1e-5]
        init = MonoRigidModel(mc, seed=1).state_dict()
        tensors, _ = load_checkpoint(a)
        assert any(not np.array_equal(tensors[k], init[k]) for k in init)

    def test_rigid_only_variant(self, data_root, tmp_path):
        mc = apply_ablation(tiny_model_config(), "A5")
        ck = train(data_root, mc, TrainConfig(epochs=1, lr_drop_epoch=0), tmp_path)
        model, meta = load_model(ck)
        assert model.instance_head is None and meta["model_config"]["piecewise_rigid"] is False

    def test_empty_dataset(self, tmp_path):
        cfg = SceneConfig(frames=3, n_objects=0, **SMALL)
        seqs = [generate_sequence(cfg)]
        with pytest.raises(ContractError):
            train(None, tiny_model_config(), TrainConfig(sources=(-2, 1)), tmp_path, sequences=seqs)

    def test_nan_loss_aborts_with_dump(self, data_root, tmp_path, monkeypatch):
        real = tr.batch_loss

        def poisoned(model, batch, cfg):
            bd, out = real(model, batch, cfg)
            bd.total = bd.total * float("nan")
            return bd, out

        monkeypatch.setattr(tr, "batch_loss", poisoned)
        with pytest.raises(TrainingError, match="nan_dump_step0"):
            train(data_root, tiny_model_config(), TrainConfig(epochs=1, lr_drop_epoch=0), tmp_path)
        dump = np.load(tmp_path / "nan_dump_step0.npz")
        assert dump["target"].shape[1:] == (32, 96, 3)
        assert (tmp_path / "nan_dump_step0.json").exists()

    def test_checkpoint_round_trip_forward(self, sequences, tmp_path):
        mc = tiny_model_config()
        model = MonoRigidModel(mc, seed=2)
        save_checkpoint(tmp_path / "m.ckpt", model.state_dict(), {"model_config": mc.to_dict(), "weights": "raw"})
        back, _ = load_model(tmp_path / "m.ckpt")
        batch = make_batch(sequences, [(0, 1)], (-1, 1), 3)
        a = model(batch.target, batch.sources, batch.boxes, batch.valid)
        b = back(batch.target, batch.sources, batch.boxes, batch.valid)
        for x, y in zip(a.depths + a.ego + [a.instances], b.depths + b.ego + [b.instances]):
            assert np.array_equal(x.data, y.data)


def _fixed_loss(model, batches):
    return float(np.mean([float(tr.batch_loss(model, b, LossConfig())[0].total.data) for b in batches]))


@pytest.mark.parametrize("seed", range(3))
def test_static_scene_loss_decreases(seed, tmp_path):
    cfg = SceneConfig(frames=5, n_objects=0, seed=100 + seed, **SMALL)
    seqs = [generate_sequence(cfg, i) for i in range(4)]
    mc = apply_ablation(tiny_model_config(), "A5")
    # 12 triplets, batch 2: 6 steps per epoch, 204 steps in total
    tc = TrainConfig(epochs=34, lr_drop_epoch=33, lr=1e-3, seed=seed, ema_decay=0.9)
    items = triplet_index(seqs)
    batches = [make_batch(seqs, items[i:i + 2], (-1, 1), 3) for i in range(0, len(items), 2)]
    before = _fixed_loss(MonoRigidModel(mc, seed=seed), batches)
    model, _ = load_model(train(None, mc, tc, tmp_path, sequences=seqs))
    after = _fixed_loss(model, batches)
    assert after < before
