import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monorigid.diffcore import ContractError, Tensor, grad_check, ops, precision
from monorigid.geometry import CameraIntrinsics, pose_to_params
from monorigid.losses import (
    SSIM_C1, SSIM_C2, LossConfig, photometric_loss, smoothness_loss, ssim_map, total_loss,
    write_loss_log,
)
from monorigid.synthscene import SceneConfig, generate_sequence, loss_inputs


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def ssim_oracle(a, b):
    """Windowed SSIM by explicit loops over reflect-padded 3 x 3 windows."""
    h, w, c = a.shape
    pa = np.pad(a, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    pb = np.pad(b, ((1, 1), (1, 1), (0, 0)), mode="reflect")
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for ch in range(c):
                wa = pa[y:y + 3, x:x + 3, ch].ravel()
                wb = pb[y:y + 3, x:x + 3, ch].ravel()
                ma, mb = wa.mean(), wb.mean()
                va = ((wa - ma) ** 2).mean()
                vb = ((wb - mb) ** 2).mean()
                cov = ((wa - ma) * (wb - mb)).mean()
                acc += ((2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2)) / \
                       ((ma ** 2 + mb ** 2 + SSIM_C1) * (va + vb + SSIM_C2))
            out[y, x] = acc / c
    return out


class TestSSIM:
    def test_identical_is_one(self):
        a = np.random.default_rng(0).random((9, 11, 3))
        np.testing.assert_allclose(ssim_map(a, a).data, 1.0, atol=1e-6)

    def test_constant_images_closed_form(self):
        a, b = np.zeros((5, 6, 3)), np.ones((5, 6, 3))
        expected = (SSIM_C1 * SSIM_C2) / ((0 + 1 + SSIM_C1) * (0 + 0 + SSIM_C2))
        np.testing.assert_allclose(ssim_map(a, b).data, expected, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((7, 9, 3)), rng.random((7, 9, 3))
        with precision(np.float64):
            np.testing.assert_allclose(ssim_map(a, b).data, ssim_oracle(a, b), atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            ssim_map(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    @pytest.mark.parametrize("shape", [(5, 6, 3), (2, 4, 5, 2), (2, 2, 1)])
    def test_grad_check_both_inputs(self, shape):
        rng = np.random.default_rng(len(shape))
        a, b = t64(rng.random(shape), True), t64(rng.random(shape), True)
        w = rng.normal(size=shape[:-1])
        with precision(np.float64):
            rep = grad_check(lambda: ops.sum(ops.mul(ssim_map(a, b), w)), [a, b], eps=1e-6)
        assert rep.max_rel_error < 1e-6, str(rep)

    def test_batched_matches_per_image(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((3, 6, 7, 3)), rng.random((3, 6, 7, 3))
        with precision(np.float64):
            whole = ssim_map(a, b).data
            for i in range(3):
                np.testing.assert_array_equal(whole[i], ssim_map(a[i], b[i]).data)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        s = ssim_map(rng.random((6, 6, 3)), rng.random((6, 6, 3))).data
        assert np.all(s <= 1.0 + 1e-6) and np.all(s >= -1.0 - 1e-6)


class TestPhotometric:
    def test_perfect_reconstruction(self):
        a = np.random.default_rng(1).random((8, 8, 3))
        assert float(photometric_loss(a, a, np.ones((8, 8), bool)).data) < 1e-6

    def test_alpha_one_is_l1(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((8, 10, 3)), rng.random((8, 10, 3))
        valid = rng.random((8, 10)) > 0.3
        with precision(np.float64):
            got = float(photometric_loss(a, b, valid, alpha=1.0).data)
        assert got == pytest.approx(np.abs(a - b).mean(-1)[valid].mean(), abs=1e-12)

    def test_composition_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((7, 9, 3)), rng.random((7, 9, 3))
        valid = np.ones((7, 9), bool)
        alpha = 0.15
        expected = ((1 - alpha) * (1 - ssim_oracle(a, b)) / 2 + alpha * np.abs(a - b).mean(-1)).mean()
        with precision(np.float64):
            assert float(photometric_loss(a, b, valid, alpha).data) == pytest.approx(expected, abs=1e-6)

    def test_invalid_pixels_have_no_influence(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        valid = np.ones((8, 8), bool)
        valid[:, :3] = False
        b2 = b.copy()
        b2[:, :3] = rng.random((8, 3, 3))
        with precision(np.float64):
            r = t64(b, grad=True)
            loss = photometric_loss(a, r, valid)
            loss.backward()
            assert float(loss.data) == float(photometric_loss(a, b2, valid).data)
        assert np.all(r.grad[:, :3] == 0)
        assert np.any(r.grad[:, 3:] != 0)

    def test_empty_mask(self):
        with pytest.raises(ContractError):
            photometric_loss(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 4), bool))


class TestSmoothness:
    def test_constant_disparity(self):
        img = np.random.default_rng(5).random((6, 7, 3))
        assert float(smoothness_loss(np.full((6, 7), 0.3), img).data) == 0.0

    def test_ramp_on_flat_image(self):
        h, w = 5, 8
        a, b = 1.0, 0.25
        d = np.tile(a + b * np.arange(w), (h, 1))
        with precision(np.float64):
            got = float(smoothness_loss(d, np.full((h, w, 3), 0.5)).data)
        # normalised slope; the y term vanishes
        assert got == pytest.approx(b / d.mean(), rel=1e-12)

    def test_image_edge_discounts_disparity_edge(self):
        d = np.ones((6, 8))
        d[:, 4:] = 2.0
        flat = np.full((6, 8, 3), 0.5)
        edged = flat.copy()
        edged[:, 4:] = 1.0
        assert float(smoothness_loss(d, edged).data) < float(smoothness_loss(d, flat).data)

    def test_non_positive(self):
        with pytest.raises(ContractError):
            smoothness_loss(np.zeros((4, 4)), np.zeros((4, 4, 3)))


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------

KS = CameraIntrinsics(fx=20.0, fy=20.0, cx=7.5, cy=5.5, width=16, height=12)


def smooth_image(rng, h, w):
    """Low-frequency colour image; keeps bilinear kinks mild for finite differences."""
    ys, xs = np.mgrid[0:h, 0:w]
    img = np.full((h, w, 3), 0.5)
    for _ in range(3):
        fx, fy = rng.uniform(0.2, 0.6, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=3)
        img += 0.1 * np.sin(fx * xs[..., None] + fy * ys[..., None] + ph)
    return img[None]


def small_problem(seed, scales=2, n_inst=1):
    rng = np.random.default_rng(seed)
    h, w = KS.height, KS.width
    tgt = smooth_image(rng, h, w)
    srcs = [smooth_image(rng, h, w) for _ in range(2)]
    depths = [rng.uniform(4, 6, size=(1, h // 2 ** k, w // 2 ** k)) for k in range(scales)]
    egos = [rng.normal(scale=[0.02] * 3 + [0.3] * 3, size=(1, 6)) for _ in range(2)]
    masks = np.zeros((1, n_inst, h, w), bool)
    if n_inst:
        masks[0, 0, 3:8, 4:10] = True
    inst = [rng.normal(scale=[0.01] * 3 + [0.1] * 3, size=(1, n_inst, 6)) for _ in range(2)]
    return tgt, srcs, depths, egos, masks, inst


class TestTotalLoss:
    def test_breakdown_invariant_and_sign(self):
        tgt, srcs, depths, egos, masks, inst = small_problem(0)
        cfg = LossConfig(scales=2, alpha_d=0.05)
        with precision(np.float64):
            lb = total_loss(tgt, srcs, depths, KS, egos, masks, inst, cfg)
        assert float(lb.total.data) == pytest.approx(
            float(lb.photometric.data) + 0.05 * float(lb.smoothness.data), abs=1e-6)
        assert float(lb.total.data) >= 0
        assert len(lb.per_scale) == 2 and len(lb.per_source) == 2

    def test_alpha_d_zero(self):
        tgt, srcs, depths, egos, masks, inst = small_problem(1)
        lb = total_loss(tgt, srcs, depths, KS, egos, masks, inst, LossConfig(scales=2, alpha_d=0.0))
        assert float(lb.total.data) == float(lb.photometric.data)

    def test_smoothness_scale_weighting(self):
        tgt, srcs, depths, egos, masks, inst = small_problem(2)
        with precision(np.float64):
            lb = total_loss(tgt, srcs, depths, KS, egos, masks, inst, LossConfig(scales=2))
            s0 = float(smoothness_loss(1 / depths[0], tgt).data)
            img1 = tgt.reshape(1, 6, 2, 8, 2, 3).mean(axis=(2, 4))
            s1 = float(smoothness_loss(1 / depths[1], img1).data)
        assert float(lb.smoothness.data) == pytest.approx((s0 + s1 / 2) / 2, rel=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradcheck(self, seed):
        tgt, srcs, depths, egos, masks, inst = small_problem(seed)
        with precision(np.float64):
            d = [t64(x, True) for x in depths]
            e = [t64(x, True) for x in egos]
            p = [t64(x, True) for x in inst]
            cfg = LossConfig(scales=2, alpha_d=0.01)
            f = lambda: total_loss(tgt, srcs, d, KS, e, masks, p, cfg).total  # noqa: E731
            # step sizes scaled to the parameter magnitudes (depth ~5, poses ~0.1)
            rep_d = grad_check(f, d, eps=1e-4)
            rep_p = grad_check(f, e + p, eps=1e-6)
        assert rep_d.max_rel_error < 1e-4, str(rep_d)
        assert rep_p.max_rel_error < 1e-4, str(rep_p)

    def test_all_terms_skipped(self):
        tgt, srcs, depths, egos, masks, inst = small_problem(3)
        far = [np.array([[0, 0, 0, 1000.0, 0, 0]]) for _ in range(2)]
        with pytest.raises(ContractError):
            total_loss(tgt, srcs, depths, KS, far, config=LossConfig(scales=2))

    def test_partial_skip_counted(self):
        tgt, srcs, depths, egos, masks, inst = small_problem(4)
        egos = [egos[0], np.array([[0, 0, 0, 1000.0, 0, 0]])]
        lb = total_loss(tgt, srcs, depths, KS, egos, config=LossConfig(scales=2))
        assert lb.skipped_terms == 2
        assert np.isfinite(float(lb.total.data))

    def test_scale_count_mismatch(self):
        tgt, srcs, depths, egos, masks, inst = small_problem(5)
        with pytest.raises(ContractError):
            total_loss(tgt, srcs, depths, KS, egos, config=LossConfig(scales=3))

    def test_config_validation(self):
        with pytest.raises(ContractError):
            LossConfig(alpha=1.5)
        with pytest.raises(ContractError):
            LossConfig(scales=0)

    def test_log_csv(self, tmp_path):
        tgt, srcs, depths, egos, masks, inst = small_problem(6)
        lb = total_loss(tgt, srcs, depths, KS, egos, masks, inst, LossConfig(scales=2))
        path = tmp_path / "log.csv"
        write_loss_log(path, [lb.row(0), lb.row(1)])
        rows = list(csv.DictReader(open(path)))
        assert list(rows[0]) == ["step", "total", "photometric", "smoothness", "skipped_terms"]
        assert float(rows[1]["total"]) == pytest.approx(float(lb.total.data))


# ---------------------------------------------------------------------------
# against rendered scenes
# ---------------------------------------------------------------------------

def gt_total(frames, ego_delta=None, inst_delta=None, drop_instances=False, alpha_d=0.0):
    t, srcs = frames[1], [frames[0], frames[2]]
    kw = loss_inputs(t, srcs)
    kw["ego_poses"] = [pose_to_params(T) for T in kw["ego_poses"]]
    kw["instance_poses"] = [pose_to_params(T) for T in kw["instance_poses"]]
    if ego_delta is not None:
        kw["ego_poses"][0] = kw["ego_poses"][0] + ego_delta
    if inst_delta is not None:
        kw["instance_poses"][0] = kw["instance_poses"][0] + inst_delta
    if drop_instances:
        kw["instance_masks"] = kw["instance_poses"] = None
    with precision(np.float64):
        return total_loss(depths=[t.gt_depth[None]], config=LossConfig(scales=1, alpha_d=alpha_d), **kw)


@pytest.fixture(scope="module")
def static_scenes():
    return [generate_sequence(SceneConfig(frames=3, n_objects=0, seed=s)) for s in range(4)]


@pytest.fixture(scope="module")
def mover_scenes():
    return [generate_sequence(SceneConfig(frames=3, n_objects=2, seed=s)) for s in range(10)]


class TestRenderedScenes:
    def test_static_round_trip_below_threshold(self, static_scenes):
        for fr in static_scenes:
            assert float(gt_total(fr).photometric.data) < 1e-3

    def test_removing_instances_from_static_scene(self):
        fr = generate_sequence(SceneConfig(frames=3, n_objects=2, seed=3, objects_follow_ego=False,
                                           object_motion_scale=(0.0, 0.0)))
        assert len(fr[1].gt_instances) > 0
        a = float(gt_total(fr, alpha_d=0.001).total.data)
        b = float(gt_total(fr, drop_instances=True, alpha_d=0.001).total.data)
        assert a == pytest.approx(b, abs=1e-12)

    def test_ego_translation_perturbation_increases_loss(self, mover_scenes):
        for fr in mover_scenes:
            base = float(gt_total(fr, alpha_d=0.001).total.data)
            step = 0.05 * float(np.median(fr[1].gt_depth))
            for axis in (3, 4, 5):
                delta = np.zeros((1, 6))
                delta[0, axis] = step
                assert float(gt_total(fr, ego_delta=delta, alpha_d=0.001).total.data) > base

    def test_five_percent_perturbation_static(self, static_scenes):
        cfg = SceneConfig()
        scales = [cfg.ego_motion_scale[1]] * 3 + [cfg.ego_motion_scale[0]] * 3
        for fr in static_scenes:
            base = float(gt_total(fr, alpha_d=0.001).total.data)
            for axis in range(6):
                for sign in (1, -1):
                    delta = np.zeros((1, 6))
                    delta[0, axis] = sign * 0.05 * scales[axis]
                    assert float(gt_total(fr, ego_delta=delta, alpha_d=0.001).total.data) > base

    @pytest.mark.xfail(reason="bilinear resampling biases the optimum by a few hundredths of a pixel, "
                              "which 1% steps of the rotation scale do not exceed", strict=False)
    def test_monotone_in_perturbation(self, static_scenes):
        cfg = SceneConfig()
        scales = [cfg.ego_motion_scale[1]] * 3 + [cfg.ego_motion_scale[0]] * 3
        for fr in static_scenes:
            for axis in range(6):
                vals = []
                for eps in (0.0, 0.01, 0.02, 0.05):
                    delta = np.zeros((1, 6))
                    delta[0, axis] = eps * scales[axis]
                    vals.append(float(gt_total(fr, ego_delta=delta).total.data))
                assert all(b >= a for a, b in zip(vals, vals[1:])), (axis, vals)
