import math

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from canonslice.liegroup import rotation_angle
from canonslice.metrics import cross_correlation
from canonslice.recon import (
    FWHM_PER_SIGMA,
    PSF,
    MotionSpec,
    ReconConfig,
    StackSpec,
    corrupt_stacks,
    forward_project,
    masked_psnr,
    register_slice_to_volume,
    splat_gaussian,
    stack_poses,
    svr_refine,
)
from canonslice.sampler import random_validation_transforms
from canonslice.se3core import RigidTransform, compose, invert, rotation_from_euler
from canonslice.volume import SliceImage, Volume, extract_slice, extract_slices

STACKS = [StackSpec("axial", 67, 1.0), StackSpec("coronal", 67, 1.0), StackSpec("sagittal", 66, 1.0)]


def _affine(n, coef):
    v = Volume(np.zeros((n, n, n)))
    x = v.world_coordinates()
    return v.with_data(coef[0] + coef[1] * x[..., 0] + coef[2] * x[..., 1] + coef[3] * x[..., 2])


@pytest.fixture(scope="module")
def smooth64(blobs64):
    return blobs64.with_data(gaussian_filter(blobs64.data, 1.0))


class TestConfig:
    def test_psf_from_thickness(self):
        psf = PSF.from_thickness(3.0, 1.5)
        assert psf.sigma_through == pytest.approx(3.0 / 2.35482, rel=1e-5)
        assert psf.sigma_inplane == pytest.approx(1.5 / FWHM_PER_SIGMA)
        with pytest.raises(ValueError):
            PSF(-1.0, 1.0)

    def test_recon_config(self):
        assert ReconConfig(dims=32).dims == (32, 32, 32)
        with pytest.raises(ValueError):
            ReconConfig(svr_iterations=-1)


class TestForwardProject:
    def test_delta_psf_limit(self, blobs64):
        t = RigidTransform(rotation_from_euler(0.3, -0.2, 0.4), [1.0, 2.0, -3.0])
        a = extract_slice(blobs64, t, 64).pixels
        b = forward_project(blobs64, t, 64, psf=PSF(1e-6, 1e-6)).pixels
        assert np.max(np.abs(a - b)) < 0.01 * np.ptp(blobs64.data)

    def test_constant_volume(self):
        v = Volume(np.full((32, 32, 32), 42.0))
        t = RigidTransform(rotation_from_euler(0.2, 0.1, -0.3), [0.5, -1.0, 2.0])
        img = forward_project(v, t, 16, psf=PSF(1.0, 2.0)).pixels
        assert np.allclose(img, 42.0, atol=1e-9)

    def test_linear_field_blur_invariant(self):
        v = _affine(33, (5.0, 0.0, 0.0, 2.0))
        for tz in (0.0, 3.0):
            t = RigidTransform.from_translation([0, 0, tz])
            a = forward_project(v, t, 16, psf=PSF(1.0, 2.0)).pixels
            b = extract_slice(v, t, 16).pixels
            assert np.allclose(a, b, atol=1e-9) and np.allclose(a, 5 + 2 * tz)


class TestSplat:
    def test_single_slice_round_trip(self):
        rng = np.random.default_rng(0)
        v = Volume(gaussian_filter(rng.uniform(0, 255, (33, 33, 33)), 2.0))
        img = extract_slice(v, RigidTransform.identity(), 33)
        rec = splat_gaussian([(img, RigidTransform.identity())], ReconConfig(dims=33))
        cov = rec.coverage[:, :, 16]
        assert cov.all() and not rec.coverage[:, :, 0].any()
        diff = np.abs(rec.volume.data[:, :, 16] - img.pixels)[cov]
        assert diff.max() < 0.02 * np.ptp(img.pixels)

    def test_constant_stacks(self):
        v = Volume(np.full((32, 32, 32), 100.0))
        stacks = [StackSpec(o, 9, 3.0, 32) for o in ("axial", "coronal", "sagittal")]
        rec = splat_gaussian(corrupt_stacks(v, stacks), ReconConfig(dims=32))
        assert rec.coverage.sum() > 0
        assert np.allclose(rec.volume.data[rec.coverage], 100.0, atol=1e-6)
        assert np.all(rec.volume.data[~rec.coverage] == 0)

    def test_ground_truth_psnr(self, smooth64):
        slices = corrupt_stacks(smooth64, STACKS)
        rec = splat_gaussian(slices, ReconConfig(dims=64))
        assert masked_psnr(rec.volume, smooth64, rec.coverage) >= 20

    def test_thread_independent(self, blobs64):
        slices = corrupt_stacks(blobs64, [StackSpec("axial", 40, 1.5), StackSpec("coronal", 30, 2.0)])
        a = splat_gaussian(slices, ReconConfig(dims=64), threads=1)
        b = splat_gaussian(slices, ReconConfig(dims=64), threads=4)
        assert np.array_equal(a.volume.data, b.volume.data) and np.array_equal(a.weights, b.weights)

    def test_pose_consistency(self, smooth64):
        poses = random_validation_transforms(200, (-20, 20), 2)
        pix = extract_slices(smooth64, poses, 64, 1.0)
        slices = [(SliceImage(p), t) for p, t in zip(pix, poses)]
        cfg = ReconConfig(dims=64)
        rec = splat_gaussian(slices, cfg)
        ccs = []
        for img, t in slices:
            proj = forward_project(rec.volume, t, 64, psf=cfg.psf).pixels
            if np.ptp(img.pixels) > 0 and np.ptp(proj) > 0:
                ccs.append(cross_correlation(img.pixels, proj))
        assert np.median(ccs) >= 0.95

    def test_empty(self):
        with pytest.raises(ValueError):
            splat_gaussian([], ReconConfig())


class TestRegistration:
    def _truth(self):
        return RigidTransform(rotation_from_euler(0.2, -0.1, 0.3), [2.0, -1.0, 3.0])

    def test_fixed_point(self, smooth64):
        cfg = ReconConfig(dims=64)
        t = self._truth()
        img = forward_project(smooth64, t, 64, psf=cfg.psf)
        r = register_slice_to_volume(img, t, smooth64, cfg)
        assert r.cc >= r.cc_init
        off = compose(invert(t), r.pose)
        final_rot = cfg.rot_radius / 2 / 2 ** (cfg.passes - 1)
        final_trans = cfg.trans_radius / 2 / 2 ** (cfg.passes - 1)
        assert rotation_angle(off.rotation) <= math.sqrt(3) * final_rot + 1e-9
        assert np.linalg.norm(off.translation) <= math.sqrt(3) * final_trans + 1e-9

    def test_recovers_through_plane_offset(self, smooth64):
        cfg = ReconConfig(dims=64)
        t = RigidTransform.identity()
        img = forward_project(smooth64, t, 64, psf=cfg.psf)
        # the CC profile along z is unimodal over the search range
        scan = [cross_correlation(img.pixels, forward_project(smooth64, RigidTransform.from_translation([0, 0, z]), 64, psf=cfg.psf).pixels)
                for z in np.arange(-8, 9)]
        peak = int(np.argmax(scan))
        assert peak == 8 and np.all(np.diff(scan[: peak + 1]) > 0) and np.all(np.diff(scan[peak:]) < 0)
        init = RigidTransform.from_translation([0, 0, 4.0])
        r = register_slice_to_volume(img, init, smooth64, cfg)
        assert np.linalg.norm(r.pose.translation - t.translation) <= 1.0
        assert r.cc > r.cc_init

    def test_outside_radius_never_worse(self, smooth64):
        cfg = ReconConfig(dims=64)
        t = self._truth()
        img = forward_project(smooth64, t, 64, psf=cfg.psf)
        init = compose(t, RigidTransform(rotation_from_euler(0.0, 0.0, math.radians(40)), np.zeros(3)))
        r = register_slice_to_volume(img, init, smooth64, cfg)
        assert r.cc >= r.cc_init

    def test_constant_slice(self, smooth64):
        init = self._truth()
        r = register_slice_to_volume(SliceImage(np.full((64, 64), 3.0)), init, smooth64, ReconConfig(dims=64))
        assert r.no_overlap and r.pose is init and math.isnan(r.cc)


class TestSVR:
    def test_zero_iterations_is_splat(self, blobs64):
        slices = corrupt_stacks(blobs64, [StackSpec("axial", 20, 2.0)], MotionSpec(2.0, 0.05), seed=3)
        cfg = ReconConfig(dims=64)
        a, b = svr_refine(slices, None, cfg), splat_gaussian(slices, cfg)
        assert np.array_equal(a.volume.data, b.volume.data) and a.history == ()

    def test_pose_count_checked(self, blobs64):
        slices = corrupt_stacks(blobs64, [StackSpec("axial", 4, 2.0)])
        with pytest.raises(ValueError):
            svr_refine(slices, [RigidTransform.identity()], ReconConfig(dims=64))

    @pytest.mark.slow
    def test_ground_truth_not_degraded(self, blobs64):
        slices = corrupt_stacks(blobs64, STACKS)
        cfg = ReconConfig(dims=64, svr_iterations=4)
        p0 = splat_gaussian(slices, cfg)
        p4 = svr_refine(slices, None, cfg)
        assert masked_psnr(p4.volume, blobs64, p4.coverage) >= masked_psnr(p0.volume, blobs64, p0.coverage) - 0.5

    @pytest.mark.slow
    def test_motion_improves_and_cc_monotone(self, blobs64):
        slices = corrupt_stacks(blobs64, STACKS, MotionSpec(4.0, math.radians(10)), seed=1)
        nominal = [p for s in STACKS for p in stack_poses(s)]
        cfg = ReconConfig(dims=64, svr_iterations=4)
        avg = splat_gaussian([(img, p) for (img, _), p in zip(slices, nominal)], cfg)
        svr = svr_refine(slices, nominal, cfg, threads=4)
        assert masked_psnr(svr.volume, blobs64, svr.coverage) > masked_psnr(avg.volume, blobs64, avg.coverage)
        after = [h["cc_after"] for h in svr.history]
        assert all(h["cc_after"] >= h["cc_before"] for h in svr.history)
        assert all(b >= a - 1e-6 for a, b in zip(after, after[1:]))


class TestCorruption:
    def test_zero_motion_matches_extraction(self, blobs64):
        spec = StackSpec("coronal", 5, 4.0, 32, 2.0)
        for (img, truth), nominal in zip(corrupt_stacks(blobs64, spec), stack_poses(spec)):
            assert np.array_equal(truth.matrix(), nominal.matrix())
            assert np.array_equal(img.pixels, extract_slice(blobs64, nominal, 32, 2.0).pixels)

    def test_seeded(self, blobs64):
        args = (blobs64, [StackSpec("axial", 6, 2.0, 32)], MotionSpec(3.0, 0.2), 5.0, 11)
        a, b = corrupt_stacks(*args), corrupt_stacks(*args)
        assert all(x[0].pixels.tobytes() == y[0].pixels.tobytes() and np.array_equal(x[1].matrix(), y[1].matrix()) for x, y in zip(a, b))

    @pytest.mark.parametrize("mode", ["random", "smooth"])
    def test_motion_bounds(self, blobs64, mode):
        spec = StackSpec("axial", 200, 0.2, 8)
        out = corrupt_stacks(blobs64, spec, MotionSpec(15.0, math.radians(30), mode), seed=2)
        for (_, truth), nominal in zip(out, stack_poses(spec)):
            m = compose(truth, invert(nominal))
            assert rotation_angle(m.rotation) <= math.radians(30) + 1e-9
            assert np.linalg.norm(m.translation) <= 15.0 + 1e-9

    def test_stack_geometry(self):
        poses = stack_poses(StackSpec("sagittal", 3, 2.0))
        assert np.allclose([p.translation for p in poses], [[-2, 0, 0], [0, 0, 0], [2, 0, 0]], atol=1e-12)
        with pytest.raises(ValueError):
            StackSpec("oblique")

    def test_masked_psnr(self):
        a = Volume(np.zeros((2, 2, 2)))
        b = Volume(np.full((2, 2, 2), 255.0))
        assert masked_psnr(a, b) == pytest.approx(0.0)
        assert masked_psnr(a, a) == math.inf
        with pytest.raises(ValueError):
            masked_psnr(a, b, np.zeros((2, 2, 2)))
