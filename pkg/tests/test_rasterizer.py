import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from velocity_splat.deformation import DeformationField, FunctionField, TimeStamp, ZeroField
from velocity_splat.errors import ShapeMismatch
from velocity_splat.rasterizer import (ALPHA_MAX, ALPHA_MIN, MAHA_CUT, T_MIN, ProjectedGaussians, _transmittance,
                                       chain_to_scene, composite_weights, footprint_pairs, front_ids,
                                       pixel_contributions, project_scene, rasterize, render, render_backward,
                                       render_positions)
from velocity_splat.scene import CanonicalScene

from conftest import gaussian, pinhole, random_scene, scene_of

T0 = TimeStamp.frame(0, 10)


def small_cam(size=24):
    return pinhole(f=30.0, cx=size / 2 - 0.5, cy=size / 2 - 0.5, width=size, height=size)


def brute_force(meta, width, height, background):
    """Direct per-pixel evaluation of the compositing sums."""
    n = len(meta)
    color = np.zeros((height, width, 3))
    vel = np.zeros((height, width, 2))
    alpha_img = np.zeros((height, width))
    depth = np.full((height, width), np.inf)
    mu = meta.means2d.detach().numpy()
    cov = meta.cov2d.detach().numpy()
    op = meta.opacity.detach().numpy()
    z = meta.depth.detach().numpy()
    col = meta.color.detach().numpy()
    v = meta.velocity.detach().numpy() if meta.velocity is not None else np.zeros((n, 2))
    order = sorted(range(n), key=lambda i: (z[i], i))
    bg = np.asarray(background)
    for y in range(height):
        for x in range(width):
            T, c, vv, zz = 1.0, np.zeros(3), np.zeros(2), 0.0
            for i in order:
                d = np.array([x, y]) - mu[i]
                m = d @ np.linalg.inv(cov[i]) @ d
                a = op[i] * np.exp(-0.5 * m)
                if m > MAHA_CUT or a < ALPHA_MIN:
                    continue
                if T < T_MIN:
                    break
                a = min(a, ALPHA_MAX)
                c += a * T * col[i]
                vv += a * T * v[i]
                zz += a * T * z[i]
                T *= 1 - a
            alpha_img[y, x] = 1 - T
            color[y, x] = c + T * bg
            vel[y, x] = vv
            if 1 - T > 0:
                depth[y, x] = zz / (1 - T)
    return color, vel, alpha_img, depth


def random_meta(rng, n, size=24, requires_grad=False):
    t = lambda a: torch.tensor(a, dtype=torch.float64, requires_grad=requires_grad)
    A = rng.normal(size=(n, 2, 2)) * 2
    cov = A @ A.transpose(0, 2, 1) + np.eye(2) * 4
    return ProjectedGaussians(
        index=torch.arange(n),
        means2d=t(rng.uniform(2, size - 3, (n, 2))),
        cov2d=t(cov),
        depth=torch.tensor(rng.uniform(1, 5, n), dtype=torch.float64),
        color=t(rng.uniform(0, 1, (n, 3))),
        opacity=t(rng.uniform(0.2, 0.9, n)),
        velocity=t(rng.normal(size=(n, 2))),
    )


class TestForward:
    def test_empty_scene(self, cam100):
        buf = render(CanonicalScene.empty(background=(0.2, 0.4, 0.6)), ZeroField(), T0, cam100)
        assert torch.allclose(buf.color, torch.tensor([0.2, 0.4, 0.6], dtype=torch.float64).expand(100, 100, 3))
        assert not buf.velocity.any() and not buf.alpha.any() and torch.isinf(buf.depth).all()

    def test_single_gaussian_at_pixel_center(self, cam100):
        sc = scene_of(gaussian((0, 0, 2), opacity=0.7, color=(1.0, 0.5, 0.0)), background=(0.0, 0.0, 1.0))
        buf = render(sc, ZeroField(), T0, cam100)
        assert torch.allclose(buf.color[50, 50], torch.tensor([0.7, 0.35, 0.3], dtype=torch.float64), atol=1e-14)
        assert buf.alpha[50, 50] == pytest.approx(0.7, abs=1e-14)
        assert buf.depth[50, 50] == pytest.approx(2.0, abs=1e-12)
        assert not buf.velocity.any()

    def test_two_gaussian_velocity(self, cam100):
        sc = scene_of(gaussian((0, 0, 3), opacity=0.6), gaussian((0, 0, 2), opacity=0.5))
        v = torch.tensor([[-1.0, 4.0], [2.0, 3.0]], dtype=torch.float64)
        buf = render_positions(sc, sc.tensors()["mu0"], cam100, velocity=v)
        a1, a2 = 0.5, 0.6  # front one is the second Gaussian
        expect = a1 * v[1] + (1 - a1) * a2 * v[0]
        assert torch.allclose(buf.velocity[50, 50], expect, atol=1e-14)

    def test_alpha_clamp(self, cam100):
        buf = render(scene_of(gaussian((0, 0, 2), opacity=1.0)), ZeroField(), T0, cam100)
        assert buf.alpha[50, 50] == pytest.approx(ALPHA_MAX)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        meta = random_meta(rng, 6, size=16)
        bg = rng.uniform(0, 1, 3)
        buf = rasterize(meta, 16, 16, bg)
        color, vel, alpha, depth = brute_force(meta, 16, 16, bg)
        assert np.abs(buf.color.detach().numpy() - color).max() < 1e-12
        assert np.abs(buf.velocity.detach().numpy() - vel).max() < 1e-12
        assert np.abs(buf.alpha.detach().numpy() - alpha).max() < 1e-12
        fin = np.isfinite(depth)
        assert (np.isfinite(buf.depth.numpy()) == fin).all()
        assert np.abs(buf.depth.numpy()[fin] - depth[fin]).max() < 1e-12

    def test_early_termination_matches_brute_force(self):
        # a stack of nearly opaque layers drives T under T_MIN
        n = 5
        meta = ProjectedGaussians(index=torch.arange(n), means2d=torch.full((n, 2), 5.0, dtype=torch.float64),
                                  cov2d=torch.eye(2, dtype=torch.float64).repeat(n, 1, 1) * 4,
                                  depth=torch.arange(1, n + 1, dtype=torch.float64),
                                  color=torch.rand(n, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0)),
                                  opacity=torch.full((n,), 0.99, dtype=torch.float64),
                                  velocity=torch.ones(n, 2, dtype=torch.float64))
        buf = rasterize(meta, 11, 11, (0.1, 0.2, 0.3))
        color, vel, alpha, _ = brute_force(meta, 11, 11, (0.1, 0.2, 0.3))
        assert np.abs(buf.color.numpy() - color).max() < 1e-12
        assert np.abs(buf.velocity.numpy() - vel).max() < 1e-12

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_buffer_ranges(self, seed):
        rng = np.random.default_rng(seed)
        sc = random_scene(rng, 8)
        buf = render(sc, ZeroField(), T0, small_cam())
        assert (buf.alpha >= 0).all() and (buf.alpha <= 1).all()
        assert (buf.color >= 0).all() and (buf.color <= 1).all()
        empty = buf.alpha == 0
        assert torch.allclose(buf.color[empty], torch.as_tensor(sc.background).expand(int(empty.sum()), 3))
        assert not buf.velocity[empty].any() and torch.isinf(buf.depth[empty]).all()

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_transmittance_nonincreasing(self, seed):
        meta = random_meta(np.random.default_rng(seed), 10, size=16)
        pairs = footprint_pairs(meta.means2d, meta.cov2d, meta.opacity, meta.depth, 16, 16)
        from velocity_splat.rasterizer import pair_alpha
        T, _ = _transmittance(pair_alpha(meta, pairs, 16), pairs)
        same = pairs.pix[1:] == pairs.pix[:-1]
        assert (T[1:][same] <= T[:-1][same]).all()

    def test_channel_independence(self, rng):
        sc = random_scene(rng, 10)
        f = DeformationField(seed=1, init_scale=0.3)
        a = render(sc, f, T0, small_cam(), with_velocity=True)
        b = render(sc, f, T0, small_cam(), with_velocity=False)
        assert torch.equal(a.color, b.color) and torch.equal(a.alpha, b.alpha) and torch.equal(a.depth, b.depth)
        assert b.velocity is None

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-5, 5))
    def test_velocity_linearity(self, seed, s):
        rng = np.random.default_rng(seed)
        sc = random_scene(rng, 6)
        v = torch.as_tensor(rng.normal(size=(6, 2)))
        cam = small_cam()
        base = render_positions(sc, sc.tensors()["mu0"], cam, velocity=v).velocity
        assert torch.allclose(render_positions(sc, sc.tensors()["mu0"], cam, velocity=s * v).velocity, s * base,
                              rtol=1e-12, atol=1e-13)
        assert torch.equal(render_positions(sc, sc.tensors()["mu0"], cam, velocity=4 * v).velocity, 4 * base)

    def test_deterministic(self, rng):
        sc = random_scene(rng, 12)
        f = DeformationField(seed=2, init_scale=0.2)
        a = render(sc, f, T0, small_cam())
        b = render(sc, f, T0, small_cam())
        for name in ("color", "velocity", "depth", "alpha"):
            assert torch.equal(getattr(a, name), getattr(b, name))

    def test_equal_depth_ties_use_index(self):
        sc = scene_of(gaussian((0, 0, 2), color=(1, 0, 0), opacity=0.5), gaussian((0, 0, 2), color=(0, 1, 0), opacity=0.5))
        c = render(sc, ZeroField(), T0, pinhole()).color[50, 50]
        assert c[0] > c[1]

    def test_culled_behind_camera(self, cam100):
        buf = render(scene_of(gaussian((0, 0, -2))), ZeroField(), T0, cam100)
        assert len(buf.meta) == 0 and not buf.alpha.any()

    def test_pixel_contributions_sorted(self):
        sc = scene_of(gaussian((0, 0, 3)), gaussian((0, 0, 2)), gaussian((0, 0, 4)))
        meta = project_scene(sc, sc.tensors()["mu0"], pinhole())
        assert [g for g, _ in pixel_contributions(meta, 50, 50, 100, 100)] == [1, 0, 2]


class TestOwnership:
    def test_front_rule(self):
        sc = scene_of(gaussian((0, 0, 3), opacity=0.9), gaussian((0, 0, 2), opacity=0.1))
        meta = project_scene(sc, sc.tensors()["mu0"], pinhole())
        assert front_ids(meta, 100, 100, "front")[50, 50] == 1

    def test_dominant_rule_prefers_heavier_weight(self):
        sc = scene_of(gaussian((0, 0, 3), opacity=0.9), gaussian((0, 0, 2), opacity=0.1))
        meta = project_scene(sc, sc.tensors()["mu0"], pinhole())
        assert front_ids(meta, 100, 100, "dominant")[50, 50] == 0

    def test_dominant_rule_background_wins_faint_pixels(self):
        sc = scene_of(gaussian((0, 0, 2), opacity=0.8))
        meta = project_scene(sc, sc.tensors()["mu0"], pinhole())
        ids = front_ids(meta, 100, 100, "dominant")
        alpha = rasterize(meta, 100, 100, (0, 0, 0)).alpha.numpy()
        assert ((ids == 0) == (alpha >= 0.5)).all()

    def test_unknown_rule(self):
        sc = scene_of(gaussian((0, 0, 2)))
        with pytest.raises(ValueError):
            front_ids(project_scene(sc, sc.tensors()["mu0"], pinhole()), 100, 100, "nearest")


def upstream_loss(buf, up):
    return sum((getattr(buf, k) * v).sum() for k, v in up.items())


class TestBackward:
    def test_zero_upstream(self, rng):
        meta = random_meta(rng, 4, requires_grad=True)
        buf = rasterize(meta, 24, 24, (0, 0, 0))
        g = render_backward(buf, {"color": torch.zeros(24, 24, 3), "velocity": torch.zeros(24, 24, 2)})
        for name in ("means2d", "cov2d", "color", "opacity", "velocity"):
            assert not getattr(g, name).any()

    def test_shape_mismatch(self, rng):
        buf = rasterize(random_meta(rng, 2, requires_grad=True), 24, 24, (0, 0, 0))
        with pytest.raises(ShapeMismatch):
            render_backward(buf, {"color": torch.zeros(24, 23, 3)})

    def test_velocity_gradient_is_alpha(self, cam100):
        sc = scene_of(gaussian((0, 0, 2), opacity=0.65))
        buf = render(sc, DeformationField(seed=0), T0, cam100, track=True)
        up = torch.zeros(100, 100, 2, dtype=torch.float64)
        up[50, 50, 0] = 1.0
        g = render_backward(buf, {"velocity": up})
        # the fresh field nudges the center slightly, so compare with the rendered alpha
        assert g.velocity[0, 0].item() == pytest.approx(buf.alpha[50, 50].item(), abs=1e-14)
        assert g.velocity[0, 0].item() == pytest.approx(0.65, abs=1e-6)
        assert g.velocity[0, 1].item() == 0.0

    def test_matches_finite_differences(self, rng):
        size = 20
        meta = random_meta(rng, 5, size=size, requires_grad=True)
        bg = (0.3, 0.2, 0.1)
        up = {"color": torch.as_tensor(rng.normal(size=(size, size, 3))),
              "velocity": torch.as_tensor(rng.normal(size=(size, size, 2))),
              "alpha": torch.as_tensor(rng.normal(size=(size, size)))}
        g = render_backward(rasterize(meta, size, size, bg), up)
        d = 1e-6
        for name in ("means2d", "cov2d", "color", "opacity", "velocity"):
            base = getattr(meta, name).detach()
            grad = getattr(g, name).reshape(-1)
            for i in range(base.numel()):
                if name == "cov2d" and i % 4 == 2:
                    continue  # lower off-diagonal is a mirror and never read
                vals = []
                for sgn in (1, -1):
                    p = base.clone().reshape(-1)
                    p[i] += sgn * d
                    if name == "cov2d" and i % 4 == 1:
                        p[i + 1] += sgn * d
                    kw = {n: getattr(meta, n).detach() for n in ("means2d", "cov2d", "color", "opacity", "velocity")}
                    kw[name] = p.reshape(base.shape)
                    m2 = ProjectedGaussians(index=meta.index, depth=meta.depth, **kw)
                    vals.append(float(upstream_loss(rasterize(m2, size, size, bg), up)))
                fd = (vals[0] - vals[1]) / (2 * d)
                an = grad[i].item() + (grad[i + 1].item() if name == "cov2d" and i % 4 == 1 else 0.0)
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an)) + 1e-7, (name, i, fd, an)


class TestChainToScene:
    def test_color_gradient_single_gaussian(self, cam100):
        sc = scene_of(gaussian((0, 0, 2), opacity=0.4))
        buf = render(sc, ZeroField(), T0, cam100, track=True)
        up = torch.zeros(100, 100, 3, dtype=torch.float64)
        up[50, 50, 1] = 1.0
        grads = chain_to_scene(render_backward(buf, {"color": up}), buf, ZeroField())
        assert torch.allclose(grads["color"][0], torch.tensor([0.0, 0.4, 0.0], dtype=torch.float64), atol=1e-14)

    def test_mu0_matches_finite_differences(self, rng):
        sc = random_scene(rng, 3, spread=0.15)
        field = DeformationField(seed=5, init_scale=0.3)
        cam = small_cam()
        t = TimeStamp.frame(3, 10)
        up = {"color": torch.as_tensor(rng.normal(size=(24, 24, 3))),
              "velocity": torch.as_tensor(rng.normal(size=(24, 24, 2)))}
        buf = render(sc, field, t, cam, track=True)
        grads = chain_to_scene(render_backward(buf, up), buf, field)
        tens = sc.tensors()
        d = 1e-6
        for i in range(3):
            for j in range(3):
                vals = []
                for sgn in (1, -1):
                    mu = tens["mu0"].detach().clone()
                    mu[i, j] += sgn * d
                    s2 = CanonicalScene(mu, tens["scale"], tens["rotation"], tens["color"], tens["opacity"], sc.background)
                    with torch.no_grad():
                        vals.append(float(upstream_loss(render(s2, field, t, cam), up)))
                fd = (vals[0] - vals[1]) / (2 * d)
                an = grads["mu0"][i, j].item()
                assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an)) + 1e-7, (i, j, fd, an)

    def test_field_dead_path(self, rng):
        sc = random_scene(rng, 4)
        field = DeformationField(seed=1)
        buf = render(sc, field, T0, small_cam(), track=True)
        grads = chain_to_scene(render_backward(buf, {"velocity": torch.zeros(24, 24, 2)}), buf, field)
        assert all(not g.any() for g in grads["field"])
        buf = render(sc, ZeroField(), T0, small_cam(), track=True)
        grads = chain_to_scene(render_backward(buf, {"color": torch.ones(24, 24, 3)}), buf, ZeroField())
        assert grads["field"] == []

    def test_culled_rows_are_zero(self, cam100):
        sc = scene_of(gaussian((0, 0, 2)), gaussian((0, 0, -2)))
        buf = render(sc, ZeroField(), T0, cam100, track=True)
        grads = chain_to_scene(render_backward(buf, {"color": torch.ones(100, 100, 3)}), buf)
        assert grads["mu0"][0].abs().sum() > 0 and not grads["mu0"][1].any() and not grads["opacity"][1].any()

    def test_requires_track(self, cam100):
        buf = render(scene_of(gaussian((0, 0, 2))), ZeroField(), T0, cam100)
        with pytest.raises(ValueError):
            chain_to_scene(render_backward(buf, {}), buf)
