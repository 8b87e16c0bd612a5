import numpy as np
import pytest

from gradcheck import SMALL, finite_difference_check, random_problem, smooth_images
from kptransfer.errors import NonFiniteGradient
from kptransfer.nets import (
    KP_PARAMS,
    WARP_FIXED,
    WARP_IDENTITY,
    WARP_PARAMS,
    Batch,
    ModelParams,
    TrainConfig,
    WarpGeometry,
    featurize,
    featurize_adjoint,
    forward_backward,
    init_params,
    joint_step,
    keypoint_loss,
    kp_net_forward,
    lr_scale_at,
    predict,
    smooth_l1,
    train,
    warp_net_forward,
)
from kptransfer.pose import KeypointSet
from kptransfer.tps import TpsTransform, control_grid, fit_tps, warp_image


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.milestones, cfg.k, cfg.grid, cfg.sample_grid) == (150, (50, 100), 5, 5, 20)
        assert (cfg.w_warp, cfg.w_kp) == (1.0, 1.0)

    @pytest.mark.parametrize("kw", [dict(lr_warp=0), dict(lr_kp=-1), dict(w_warp=-0.1),
                                    dict(size=60), dict(warp_mode="bogus")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestFeaturize:
    def test_constant_image(self):
        np.testing.assert_array_equal(featurize(np.full((32, 32), 0.7), 8), 0.0)

    def test_brightness_invariance(self, rng):
        img = rng.random((32, 32))
        np.testing.assert_allclose(featurize(img, 8), featurize(img + 0.25, 8), atol=1e-15)

    def test_block_average_oracle(self):
        img = np.arange(16.0).reshape(4, 4)
        blocks = np.array([(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4,
                           (8 + 9 + 12 + 13) / 4, (10 + 11 + 14 + 15) / 4])
        np.testing.assert_allclose(featurize(img, 2), blocks - blocks.mean())

    def test_adjoint(self, rng):
        x = rng.random((3, 16, 16))
        g = rng.normal(size=(3, 64))
        lhs = np.sum(featurize(x, 8) * g)
        rhs = np.sum(x * featurize_adjoint(g, 16, 8))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestForward:
    def params(self, rng):
        return init_params(TrainConfig(**SMALL), rng)

    def test_zero_weights_give_bias(self, rng):
        p = self.params(rng)
        p.W2[:] = 0
        p.V2[:] = 0
        x = rng.normal(size=64)
        np.testing.assert_array_equal(warp_net_forward(p, x), p.b2)
        np.testing.assert_array_equal(kp_net_forward(p, x), p.c2)

    def test_zero_input_zero_biases(self, rng):
        p = self.params(rng)
        p.W2 = rng.normal(size=p.W2.shape)
        for name in ("b1", "b2", "c1", "c2"):
            setattr(p, name, np.zeros_like(getattr(p, name)))
        np.testing.assert_array_equal(warp_net_forward(p, np.zeros(64)), 0.0)
        np.testing.assert_array_equal(kp_net_forward(p, np.zeros(64)), 0.0)

    def test_naive_matmul_oracle(self, rng):
        p = self.params(rng)
        p.W2 = rng.normal(size=p.W2.shape)
        x = rng.normal(size=64)

        def naive(W1, b1, W2, b2):
            h = [np.tanh(sum(W1[i, j] * x[j] for j in range(len(x))) + b1[i]) for i in range(len(b1))]
            return [sum(W2[o, i] * h[i] for i in range(len(h))) + b2[o] for o in range(len(b2))]

        np.testing.assert_allclose(warp_net_forward(p, x), naive(p.W1, p.b1, p.W2, p.b2), atol=1e-12)
        np.testing.assert_allclose(kp_net_forward(p, x), naive(p.V1, p.c1, p.V2, p.c2), atol=1e-12)

    def test_batched(self, rng):
        p = self.params(rng)
        X = rng.normal(size=(4, 64))
        for i in range(4):
            np.testing.assert_allclose(warp_net_forward(p, X)[i], warp_net_forward(p, X[i]))


class TestSmoothL1:
    def test_quadratic_branch(self):
        v, d = smooth_l1(0.5)
        assert (v, d) == (0.125, 0.5)

    def test_linear_branch(self):
        v, d = smooth_l1(2.0)
        assert (v, d) == (1.5, 1.0)
        v, d = smooth_l1(-3.0)
        assert (v, d) == (2.5, -1.0)

    def test_knee(self):
        v, d = smooth_l1(1.0)
        assert v == 0.5 == 0.5 * 1.0**2
        assert d == 1.0


class TestKeypointLoss:
    def test_perfect(self, rng):
        gt = KeypointSet(rng.random((5, 2)), [1, 1, 0, 1, 1])
        loss, grad = keypoint_loss(gt.points.ravel(), gt)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_all_invisible(self, rng):
        gt = KeypointSet(rng.random((5, 2)), [0] * 5)
        loss, grad = keypoint_loss(rng.normal(size=10) * 5, gt)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_oracle_and_gradient(self, rng):
        gt = KeypointSet(rng.random((5, 2)), [1, 0, 1, 0, 1])
        pred = gt.points.ravel() + rng.normal(0, 0.6, 10)
        loss, grad = keypoint_loss(pred, gt)
        expect = 0.0
        for i in (0, 2, 4):
            for c in range(2):
                r = pred[2 * i + c] - gt.points[i, c]
                expect += 0.5 * r * r if abs(r) < 1 else abs(r) - 0.5
        assert loss == pytest.approx(expect, abs=1e-12)
        eps = 1e-6
        fd = np.array([(keypoint_loss(pred + eps * e, gt)[0] - keypoint_loss(pred - eps * e, gt)[0])
                       / (2 * eps) for e in np.eye(10)])
        knee = np.abs(np.abs(pred - gt.points.ravel()) - 1) < 1e-3
        assert np.linalg.norm((fd - grad)[~knee]) < 1e-5 * np.linalg.norm(fd[~knee])

    def test_occluded_predictions_change_nothing(self, rng):
        gt = KeypointSet(rng.random((5, 2)), [1, 1, 0, 1, 0])
        pred = rng.random(10)
        moved = pred.copy()
        moved[[4, 5, 8, 9]] += rng.normal(0, 3, 4)
        l1, g1 = keypoint_loss(pred, gt)
        l2, g2 = keypoint_loss(moved, gt)
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)


class TestGradients:
    """Analytic gradients against central finite differences."""

    @pytest.mark.parametrize("seed", range(3))
    def test_joint_predicted(self, seed):
        p, batch, geom, cfg = random_problem(seed)
        err, checked, total = finite_difference_check(p, batch, geom, cfg)
        assert checked > 0.8 * total
        assert err < 1e-4

    def test_warp_net_and_warp_loss_only(self):
        p, batch, geom, cfg = random_problem(11)
        cfg = cfg.replace(w_kp=0.0)
        err, checked, total = finite_difference_check(p, batch, geom, cfg)
        assert checked == total
        assert err < 1e-6

    def test_keypoint_path_without_warp_loss(self):
        p, batch, geom, cfg = random_problem(12)
        err, checked, total = finite_difference_check(p, batch, geom, cfg.replace(w_warp=0.0))
        assert checked > 0.8 * total
        assert err < 1e-4

    def test_kp_net_identity_warp(self):
        p, batch, geom, cfg = random_problem(13)
        err, checked, total = finite_difference_check(p, batch, geom, cfg.replace(warp_mode=WARP_IDENTITY))
        assert checked == total
        assert err < 1e-6

    def test_fixed_warp(self):
        p, batch, geom, cfg = random_problem(14)
        rng = np.random.default_rng(14)
        src = control_grid(3)
        ts = [fit_tps(src, src + rng.uniform(-0.03, 0.03, src.shape)) for _ in range(len(batch))]
        batch.transforms = ts
        batch.warped = np.stack([warp_image(im, t) for im, t in zip(batch.images, ts)])
        err, checked, total = finite_difference_check(p, batch, geom, cfg.replace(warp_mode=WARP_FIXED))
        assert checked == total
        assert err < 1e-6

    def test_identity_and_fixed_modes_leave_warp_net_alone(self):
        p, batch, geom, cfg = random_problem(15)
        _, g = forward_backward(p, batch, geom, cfg.replace(warp_mode=WARP_IDENTITY))
        for n in WARP_PARAMS:
            np.testing.assert_array_equal(getattr(g, n), 0.0)


class TestJointStep:
    def test_warp_minimum_is_fixed_point(self, rng):
        p, batch, geom, cfg = random_problem(3)
        cfg = cfg.replace(w_kp=0.0)
        delta = rng.normal(0, 0.02, (25, 2))
        flow = geom.B_samp @ delta
        e = rng.normal(0, 0.01, flow.shape)
        batch.targets = np.stack([np.stack([flow + e, flow - e, flow])] * len(batch))
        batch.target_mask = np.ones((len(batch), 3), dtype=bool)
        p.W2[:] = 0.0
        p.b2 = (geom.control + delta).ravel()
        out, m = joint_step(p, batch, cfg, geom)
        for n in WARP_PARAMS:
            np.testing.assert_allclose(getattr(m["grads"], n), 0.0, atol=1e-13)
            np.testing.assert_allclose(getattr(out, n), getattr(p, n), atol=1e-15)

    def test_duplicate_elements_double_gradient(self):
        p, batch, geom, cfg = random_problem(4, n=1)
        twice = batch.subset(np.array([0, 0]))
        _, g1 = forward_backward(p, batch, geom, cfg)
        _, g2 = forward_backward(p, twice, geom, cfg)
        # Equal up to rounding: BLAS picks different kernels for one and two rows.
        np.testing.assert_allclose(g2.flat(), 2 * g1.flat(), rtol=1e-13, atol=1e-300)

    def test_per_subnetwork_learning_rates(self):
        p, batch, geom, cfg = random_problem(5)
        cfg = cfg.replace(lr_warp=1e-3, lr_kp=1e-2)
        out, m = joint_step(p, batch, cfg, geom, lr_scale=0.5)
        g = m["grads"]
        for n in WARP_PARAMS:
            np.testing.assert_allclose(getattr(out, n), getattr(p, n) - 0.5e-3 * getattr(g, n))
        for n in KP_PARAMS:
            np.testing.assert_allclose(getattr(out, n), getattr(p, n) - 0.5e-2 * getattr(g, n))

    def test_non_finite_aborts(self):
        p, batch, geom, cfg = random_problem(6)
        p.V2[0, 0] = np.nan
        with pytest.raises(NonFiniteGradient) as err:
            joint_step(p, batch, cfg, geom)
        assert "V2" in err.value.diagnostics["arrays"]


def linear_warp_task(seed=0, n=32, epochs=600):
    """Targets that the initial hidden layer can reproduce exactly through W2."""
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(**{**SMALL, "hidden_warp": 8, "k": 1}, w_kp=0.0, batch_size=n,
                      epochs=epochs, milestones=(epochs - 100, epochs - 50), lr_warp=8e-3)
    geom = WarpGeometry.from_config(cfg)
    imgs = rng.random((n, cfg.size, cfg.size))
    p0 = init_params(cfg, np.random.default_rng(seed + 1))
    p0.W1 *= 3.0
    h0 = np.tanh(featurize(imgs, cfg.feature_size) @ p0.W1.T + p0.b1)
    M = rng.normal(0, 0.02, (2 * cfg.grid**2, cfg.hidden_warp))
    delta = (h0 @ M.T).reshape(n, -1, 2)
    batch = Batch(imgs, np.zeros((n, 5, 2)), np.zeros((n, 5), dtype=bool),
                  (geom.B_samp @ delta)[:, None], np.ones((n, 1), dtype=bool))
    return cfg, geom, batch, p0, h0, delta


class TestTrain:
    def test_zero_epochs(self):
        p, batch, geom, cfg = random_problem(7)
        out, curves = train(cfg.replace(epochs=0), batch, p, geom)
        assert curves == []
        for a, b in zip(out.flat(), p.flat()):
            assert a == b

    def test_deterministic(self):
        p, batch, geom, cfg = random_problem(8, n=5)
        cfg = cfg.replace(epochs=4, batch_size=2)
        a, ca = train(cfg, batch, p, geom)
        b, cb = train(cfg, batch, p, geom)
        np.testing.assert_array_equal(a.flat(), b.flat())
        assert ca == cb

    def test_lr_schedule(self):
        assert [lr_scale_at(e, (2, 4)) for e in range(6)] == pytest.approx(
            [1, 1, 0.1, 0.1, 0.01, 0.01])

    def test_empty(self):
        p, batch, geom, cfg = random_problem(9)
        with pytest.raises(ValueError):
            train(cfg, batch.subset(np.array([], dtype=int)), p, geom)

    def test_linearly_solvable_warp_task(self):
        cfg, geom, batch, p0, h0, delta = linear_warp_task()
        H = np.hstack([h0, np.ones((len(h0), 1))])
        sol, *_ = np.linalg.lstsq(H, delta.reshape(len(h0), -1), rcond=None)
        assert np.max(np.abs(H @ sol - delta.reshape(len(h0), -1))) < 1e-12
        _, curves = train(cfg, batch, p0, geom)
        losses = [c[1] for c in curves]
        assert losses[-1] < 1e-3 * losses[0]
        assert all(b <= a for a, b in zip(losses[cfg.milestones[0]:], losses[cfg.milestones[0] + 1:]))


def test_predict_matches_forward(rng):
    p, batch, geom, cfg = random_problem(10)
    m, _ = forward_backward(p, batch, geom, cfg.replace(w_warp=0.0), need_grad=False)
    k, controls = predict(p, batch.images, cfg, geom)
    np.testing.assert_allclose(k, m["keypoints"])
    assert controls.shape == (len(batch), 25, 2)


def test_identity_warp_net_gives_unwarped_prediction():
    p, batch, geom, cfg = random_problem(16)
    p.W2[:] = 0.0
    p.b2 = geom.control.ravel().copy()
    a, _ = predict(p, batch.images, cfg, geom)
    b, _ = predict(p, batch.images, cfg.replace(warp_mode=WARP_IDENTITY), geom)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_params_flat_round_trip(rng):
    p = init_params(TrainConfig(**SMALL), rng)
    q = ModelParams.from_flat(p, p.flat())
    np.testing.assert_array_equal(q.flat(), p.flat())
    assert q.all_finite()


def test_smooth_images_helper(rng):
    imgs = smooth_images(2, 16, rng)
    assert imgs.shape == (2, 16, 16)
