import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from velocity_splat.errors import ShapeMismatch, WindowLengthMismatch
from velocity_splat.losses import (DynamicMask, FlowField, LossWeights, combine, loss_dyn, loss_photometric, loss_warp,
                                   loss_win, warp_image)
from velocity_splat.scene import CanonicalScene
from velocity_splat.synthetic import Linear, MotionGroup, MotionSpec, oracle_flow, oracle_image

from conftest import pinhole

images = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s))


def rand_img(rng, h=6, w=7, c=3):
    return torch.as_tensor(rng.uniform(0, 1, (h, w, c)))


class TestPhotometric:
    def test_identical(self, rng):
        a = rand_img(rng)
        assert loss_photometric(a, a) == 0

    def test_constant_offset(self, rng):
        a = rand_img(rng)
        assert float(loss_photometric(a + 0.1, a)) == pytest.approx(0.1, abs=1e-15)

    def test_brute_force(self, rng):
        a, b = rand_img(rng).numpy(), rand_img(rng).numpy()
        total = sum(abs(a[i, j, k] - b[i, j, k]) for i in range(6) for j in range(7) for k in range(3))
        assert float(loss_photometric(a, b)) == pytest.approx(total / (6 * 7 * 3), rel=1e-14)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            loss_photometric(rand_img(rng), rand_img(rng, h=5))


class TestWindow:
    def test_perfect(self, rng):
        gt = [FlowField.dense(rand_img(rng, c=2)) for _ in range(3)]
        val, m = loss_win([g.data for g in gt], gt, 3)
        assert val == 0 and not m.any()

    def test_hand_mean(self):
        gt = [FlowField.dense(torch.tensor([3.0, 4.0]).expand(4, 5, 2)) for _ in range(2)]
        val, m = loss_win([torch.zeros(4, 5, 2)] * 2, gt, 2)
        assert float(val) == pytest.approx(3.5)
        assert torch.allclose(m, torch.full((4, 5), 7.0, dtype=torch.float64))

    def test_all_invalid(self, rng):
        gt = [FlowField(rand_img(rng, c=2), torch.zeros(6, 7, dtype=torch.bool))]
        val, m = loss_win([rand_img(rng, c=2)], gt, 1)
        assert val == 0 and not m.any()

    def test_length_mismatch(self, rng):
        gt = [FlowField.dense(rand_img(rng, c=2))] * 2
        with pytest.raises(WindowLengthMismatch):
            loss_win([rand_img(rng, c=2)] * 2, gt, 3)
        with pytest.raises(WindowLengthMismatch):
            loss_win([rand_img(rng, c=2)], gt, 2)

    @settings(max_examples=30, deadline=None)
    @given(images, st.integers(1, 5))
    def test_equals_mean_of_single_frames(self, rng, tau):
        rend = [rand_img(rng, c=2) for _ in range(tau)]
        gt = [FlowField(rand_img(rng, c=2), torch.as_tensor(rng.uniform(size=(6, 7)) < 0.7)) for _ in range(tau)]
        whole, _ = loss_win(rend, gt, tau)
        single = np.mean([float(loss_win([r], [g], 1)[0]) for r, g in zip(rend, gt)])
        assert float(whole) == pytest.approx(single, rel=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(images)
    def test_invariant_outside_validity(self, rng):
        valid = torch.as_tensor(rng.uniform(size=(6, 7)) < 0.5)
        gt = FlowField(rand_img(rng, c=2), valid)
        r = rand_img(rng, c=2)
        r2 = r.clone()
        r2[~valid] = torch.as_tensor(rng.normal(size=(int((~valid).sum()), 2)) * 100)
        gt2 = FlowField(gt.data.clone(), valid)
        gt2.data[~valid] = 7.0
        assert float(loss_win([r], [gt], 1)[0]) == float(loss_win([r2], [gt2], 1)[0])


class TestWarp:
    @settings(max_examples=30, deadline=None)
    @given(images)
    def test_zero_flow_identity(self, rng):
        img = rand_img(rng)
        out, inside = warp_image(img, torch.zeros(6, 7, 2))
        assert torch.equal(out, img) and inside.all()

    def test_step_edge_shifts_left(self):
        img = torch.zeros(4, 4, 3, dtype=torch.float64)
        img[:, 2:] = 1.0
        out, inside = warp_image(img, torch.tensor([1.0, 0.0]).expand(4, 4, 2))
        expect = torch.zeros(4, 4, 3, dtype=torch.float64)
        expect[:, 1:] = 1.0
        assert torch.equal(out, expect)
        assert inside[:, :3].all() and not inside[:, 3].any()

    def test_outside_is_clamped_and_masked(self, rng):
        img = rand_img(rng)
        out, inside = warp_image(img, torch.tensor([-10.0, 0.0]).expand(6, 7, 2))
        assert not inside.any()
        assert torch.allclose(out, img[:, :1].expand(6, 7, 3))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeMismatch):
            warp_image(rand_img(rng), torch.zeros(6, 6, 2))

    def test_loss_static(self, rng):
        img = rand_img(rng)
        val, m = loss_warp(img, torch.zeros(6, 7, 2), img)
        assert val == 0 and not m.any()

    def test_loss_constant_offset(self, rng):
        img = rand_img(rng)
        val, _ = loss_warp(img + 0.2, torch.zeros(6, 7, 2), img)
        assert float(val) == pytest.approx(0.2, abs=1e-15)

    def test_loss_excludes_outside(self, rng):
        img = rand_img(rng)
        nxt = img.clone()
        nxt[:, -1] = 5.0  # only reachable through samples that leave the image
        flow = torch.zeros(6, 7, 2, dtype=torch.float64)
        flow[:, -1, 0] = 3.0
        val, m = loss_warp(nxt, flow, img)
        assert val == 0 and not m[:, -1].any()

    def test_oracle_scene(self):
        # a fully covered plane translating parallel to the image by one pixel per frame; the
        # residual comes from the footprint cut and the position-dependent covariance projection
        xs = np.linspace(-0.75, 0.75, 31)
        mu = np.array([[x, y, 2.0] for x in xs for y in xs])
        n = len(mu)
        rng = np.random.default_rng(3)
        scene = CanonicalScene(mu, np.full((n, 3), 0.1), np.tile([1.0, 0, 0, 0], (n, 1)), rng.uniform(0.2, 0.8, (n, 3)),
                               np.full(n, 0.9))
        spec = MotionSpec([MotionGroup(list(range(n)), Linear((0.02, 0.02, 0.0)))], 4)
        cam = pinhole(f=100, cx=31.5, cy=31.5, width=64, height=64)
        cur, nxt = oracle_image(scene, spec, cam, 1), oracle_image(scene, spec, cam, 2)
        flow = oracle_flow(scene, spec, cam, 1)
        assert torch.allclose(flow.data[flow.valid], torch.tensor([1.0, 1.0], dtype=torch.float64), atol=1e-12)
        val, _ = loss_warp(nxt, flow.data, cur)
        assert float(val) < 1e-3
        # the wrong direction is clearly worse
        assert float(loss_warp(nxt, -flow.data, cur)[0]) > 3 * float(val)

    @settings(max_examples=20, deadline=None)
    @given(images)
    def test_gradients_match_finite_differences(self, rng):
        nxt = rand_img(rng, 5, 5).requires_grad_(True)
        flow = (torch.as_tensor(rng.uniform(-1.3, 1.3, (5, 5, 2)))).requires_grad_(True)
        cur = rand_img(rng, 5, 5)
        gn, gf = torch.autograd.grad(loss_warp(nxt, flow, cur)[0], [nxt, flow])
        check_fd(lambda a: loss_warp(a, flow.detach(), cur)[0], nxt.detach(), gn)
        check_fd(lambda f: loss_warp(nxt.detach(), f, cur)[0], flow.detach(), gf)


def check_fd(fn, x, grad, d=1e-7):
    flat = x.clone().reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.numel()):
        p, m = flat.clone(), flat.clone()
        p[i] += d
        m[i] -= d
        fd = (float(fn(p.reshape(x.shape))) - float(fn(m.reshape(x.shape)))) / (2 * d)
        # the L1 kink and bilinear cell borders are non-differentiable; skip those points
        if abs(fd - g[i].item()) > 1e-4 * max(abs(fd), abs(g[i].item())) + 1e-8:
            p2, m2 = flat.clone(), flat.clone()
            p2[i] += 1e-3
            m2[i] -= 1e-3
            left = (float(fn(flat.reshape(x.shape))) - float(fn(m2.reshape(x.shape)))) / 1e-3
            right = (float(fn(p2.reshape(x.shape))) - float(fn(flat.reshape(x.shape)))) / 1e-3
            assert abs(left - right) > 1e-6, (i, fd, g[i].item())


class TestDyn:
    def test_empty_mask(self, rng):
        assert loss_dyn(rand_img(rng), rand_img(rng), DynamicMask(torch.zeros(6, 7))) == 0

    def test_full_mask_is_photometric(self, rng):
        a, b = rand_img(rng), rand_img(rng)
        assert float(loss_dyn(a, b, DynamicMask(torch.ones(6, 7)))) == pytest.approx(float(loss_photometric(a, b)), rel=1e-14)

    def test_half_mask(self, rng):
        b = rand_img(rng, 4, 4)
        a = b.clone()
        a[:2] += 0.2
        m = torch.zeros(4, 4, dtype=torch.bool)
        m[:2] = True
        assert float(loss_dyn(a, b, m)) == pytest.approx(0.2, abs=1e-15)

    def test_mask_shape(self, rng):
        with pytest.raises(ShapeMismatch):
            loss_dyn(rand_img(rng), rand_img(rng), torch.ones(6, 6, dtype=torch.bool))

    @settings(max_examples=30, deadline=None)
    @given(images)
    def test_invariant_outside_mask(self, rng):
        m = torch.as_tensor(rng.uniform(size=(6, 7)) < 0.5)
        a, b = rand_img(rng), rand_img(rng)
        a2 = a.clone()
        a2[~m] = 3.0
        assert float(loss_dyn(a, b, m)) == float(loss_dyn(a2, b, m))


class TestCombined:
    @settings(max_examples=30, deadline=None)
    @given(images)
    def test_nonnegative_and_zero_on_identity(self, rng):
        a, b = rand_img(rng), rand_img(rng)
        f = FlowField.dense(rand_img(rng, c=2))
        m = DynamicMask(torch.as_tensor(rng.uniform(size=(6, 7)) < 0.5))
        assert loss_photometric(a, b) >= 0 and loss_dyn(a, b, m) >= 0 and loss_warp(a, f.data, b)[0] >= 0
        assert loss_win([rand_img(rng, c=2)], [f], 1)[0] >= 0
        assert loss_photometric(a, a) == 0 and loss_dyn(a, a, m) == 0 and loss_win([f.data], [f], 1)[0] == 0

    def test_combine_total(self):
        w = LossWeights(photometric=1.0, win=0.5, warp=0.25, dyn=2.0)
        t = lambda v: torch.tensor(v, dtype=torch.float64)
        r = combine(t(1.0), t(2.0), t(4.0), t(0.5), w)
        assert float(r.total) == pytest.approx(1 + 1 + 1 + 1)
        assert r.scalars()["win"] == 2.0

    def test_default_weights(self):
        w = LossWeights()
        assert (w.photometric, w.win, w.warp, w.dyn) == (1.0, 0.1, 0.1, 1.0)

    @settings(max_examples=10, deadline=None)
    @given(images)
    def test_gradients_of_simple_losses(self, rng):
        a = rand_img(rng, 3, 3).requires_grad_(True)
        b = rand_img(rng, 3, 3)
        m = torch.as_tensor(rng.uniform(size=(3, 3)) < 0.5)
        for fn in (lambda x: loss_photometric(x, b), lambda x: loss_dyn(x, b, m)):
            (g,) = torch.autograd.grad(fn(a), [a])
            check_fd(fn, a.detach(), g)
        v = rand_img(rng, 3, 3, 2).requires_grad_(True)
        gt = FlowField(rand_img(rng, 3, 3, 2), m)
        (g,) = torch.autograd.grad(loss_win([v], [gt], 1)[0], [v])
        check_fd(lambda x: loss_win([x], [gt], 1)[0], v.detach(), g)

    def test_flow_field_shape(self):
        with pytest.raises(ShapeMismatch):
            FlowField(torch.zeros(4, 4, 3), torch.ones(4, 4))
