import itertools
import math

import numpy as np
import pytest

from canonslice.liegroup import geodesic_distance, geodesic_distances
from canonslice.predictor import (
    DegeneratePredictionError,
    DictionaryModel,
    PredictionSet,
    build_dictionary,
    confidence_filter,
    load_dictionary,
    mc_aggregate,
    save_dictionary,
)
from canonslice.sampler import SamplingConfig, euler_angle_grid, random_validation_transforms
from canonslice.se3core import RigidTransform, rotation_from_euler, rotation_z
from canonslice.volume import SliceImage, extract_slice, extract_slices

COARSE = SamplingConfig(angle_step=math.radians(45), tz_min=-20, tz_max=20, tz_step=10)
FINE = SamplingConfig(angle_step=math.radians(18), tz_min=-20, tz_max=20, tz_step=4)


@pytest.fixture(scope="module")
def coarse(blobs64):
    return build_dictionary(blobs64, COARSE)


@pytest.fixture(scope="module")
def fine(blobs64):
    return build_dictionary(blobs64, FINE)


def _slice_at(v, t):
    return SliceImage(extract_slice(v, t, 64).pixels.astype(np.float32))


class _Fixed:
    """Deterministic predictor: ignores the seed."""

    def __init__(self, t):
        self.t = t

    def predict(self, image, stochastic=False, rng_seed=None):
        return self.t


class _PlusMinus:
    """Alternates Rz(+a) and Rz(-a) by sample index."""

    def __init__(self, a):
        self.a = a

    def predict(self, image, stochastic=False, rng_seed=None):
        sign = 1 if rng_seed[1] % 2 == 0 else -1
        return RigidTransform(rotation_z(sign * self.a), np.zeros(3))


class TestBuild:
    def test_identity_config(self, blobs64):
        m = build_dictionary(blobs64, SamplingConfig(scheme="identity"))
        assert len(m) == 1 and np.allclose(m.pose(0).matrix(), np.eye(4))

    def test_tiny_descriptor(self, blobs64):
        m = build_dictionary(blobs64, COARSE, descriptor_size=1, similarity="ssim")
        assert m.descriptors.shape[1] == 1
        assert isinstance(m.predict(_slice_at(blobs64, RigidTransform.identity())), RigidTransform)

    def test_immutable(self, coarse):
        with pytest.raises(ValueError):
            coarse.descriptors[0, 0] = 1.0

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            DictionaryModel(np.zeros((0, 4)), np.zeros((0, 3, 3)), np.zeros((0, 3)), 2)
        with pytest.raises(ValueError):
            DictionaryModel(np.ones((1, 4)), np.eye(3)[None], np.zeros((1, 3)), 2, similarity="mi")

    def test_save_load_round_trip(self, coarse, tmp_path):
        save_dictionary(coarse, tmp_path / "m.dict")
        back = load_dictionary(tmp_path / "m.dict")
        assert len(back) == len(coarse) and back.similarity == coarse.similarity
        assert np.array_equal(back.descriptors, coarse.descriptors)
        assert np.array_equal(back.rotations, coarse.rotations)
        (tmp_path / "bad").write_bytes(b"magic=NOPE\n\n")
        with pytest.raises(ValueError):
            load_dictionary(tmp_path / "bad")


class TestPredict:
    @pytest.mark.parametrize("similarity", ["cc", "ssim"])
    def test_self_retrieval(self, blobs64, similarity):
        m = build_dictionary(blobs64, COARSE, similarity=similarity)
        poses = [m.pose(i) for i in range(len(m))]
        pix = extract_slices(blobs64, poses, 64, 1.0).astype(np.float32)
        errors = [geodesic_distance(t, m.predict(p)) for t, p in zip(poses, pix)]
        assert max(errors) == 0.0

    @pytest.mark.parametrize("similarity", ["cc", "ssim"])
    def test_batch_matches_single(self, blobs64, similarity):
        m = build_dictionary(blobs64, COARSE, similarity=similarity)
        ts = random_validation_transforms(30, (-20, 20), 5)
        imgs = [_slice_at(blobs64, t) for t in ts] + [SliceImage(np.zeros((64, 64)))]
        batch = m.predict_batch(imgs, chunk=7)
        assert batch[-1] is None
        for img, b in zip(imgs[:-1], batch):
            assert np.array_equal(m.predict(img).matrix(), b.matrix())

    def test_stochastic_reproducible(self, coarse, blobs64):
        img = _slice_at(blobs64, RigidTransform.from_translation([0, 0, 3]))
        a = [coarse.predict(img, True, [7, i]).matrix() for i in range(10)]
        b = [coarse.predict(img, True, [7, i]).matrix() for i in range(10)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        c = coarse.predict_samples(img, [[7, i] for i in range(10)])
        assert all(np.array_equal(x, y.matrix()) for x, y in zip(a, c))

    def test_stochastic_stays_in_top_k(self, coarse, blobs64):
        img = _slice_at(blobs64, RigidTransform.from_translation([0, 0, 3]))
        order = np.argsort(-coarse.similarities(img), kind="stable")[: coarse.top_k]
        allowed = {coarse.pose(i).matrix().tobytes() for i in order}
        for s in range(30):
            assert coarse.predict(img, True, s).matrix().tobytes() in allowed

    def test_constant_image_fails(self, coarse):
        img = SliceImage(np.full((64, 64), 7.0))
        with pytest.raises(DegeneratePredictionError):
            coarse.predict(img)
        assert mc_aggregate(coarse, img, 10).status == "failed"

    def test_midway_query_within_grid_covering(self, fine, blobs64):
        """A query midway between grid poses lands no farther than the farthest enclosing corner."""
        grid = np.degrees(euler_angle_grid(math.radians(18)))
        rng = np.random.default_rng(0)
        worse, total = [], 0
        for _ in range(60):
            ang = rng.choice(grid[:-1], 3) + 9.0
            tz = float(rng.choice(np.arange(-20, 16, 4))) + 2.0
            r = rotation_from_euler(*np.radians(ang))
            q = RigidTransform(r, tz * r[:, 2])
            img = _slice_at(blobs64, q)
            if img.content_fraction() < 0.05:
                continue
            corners = []
            for d in itertools.product([-1, 1], repeat=4):
                rc = rotation_from_euler(*np.radians(ang + 9.0 * np.array(d[:3])))
                corners.append(RigidTransform(rc, (tz + 2.0 * d[3]) * rc[:, 2]))
            bound = max(geodesic_distance(q, c) for c in corners)
            total += 1
            err = geodesic_distance(q, fine.predict(img))
            if err > bound + 1e-9:
                worse.append(round(err / bound, 2))
        print(f"midway queries beyond the covering bound: {len(worse)}/{total}, ratios {sorted(worse)}")
        assert not worse

    def test_capture_when_ranking_agrees(self, fine, blobs64):
        ts = random_validation_transforms(500, (-20, 20), 3)
        poses = [fine.pose(i) for i in range(len(fine))]
        agree = diverge = 0
        for t in ts:
            img = _slice_at(blobs64, t)
            if img.content_fraction() < 0.05:
                continue
            d = geodesic_distances(t, poses)
            err = geodesic_distance(t, fine.predict(img))
            if int(np.argmax(fine.similarities(img))) == int(np.argmin(d)):
                agree += 1
                assert err <= d.min() + 1e-9
            else:
                diverge += 1
                assert err >= d.min() - 1e-9  # never beats the grid
        print(f"ranking diverges from the nearest-pose oracle for {diverge}/{agree + diverge} queries")
        assert agree > 0


class TestAggregate:
    def test_deterministic_predictor(self):
        t = RigidTransform(rotation_from_euler(0.1, 0.2, 0.3), [1.0, 2.0, 3.0])
        s = mc_aggregate(_Fixed(t), None, 25, 10.0)
        assert s.variance == 0 and s.accepted and s.status == "accepted" and len(s.samples) == 25
        assert geodesic_distance(s.mean, t) == 0

    def test_symmetric_perturbation(self):
        s = mc_aggregate(_PlusMinus(math.radians(10)), None, 10, 10.0)
        assert geodesic_distance(s.mean, RigidTransform.identity()) < 1e-6
        assert s.variance == pytest.approx(math.radians(10) ** 2, rel=1e-9)

    def test_threshold(self):
        s = mc_aggregate(_PlusMinus(math.radians(10)), None, 10, threshold=0.01)
        assert not s.accepted and s.status == "rejected"
        with pytest.raises(ValueError):
            mc_aggregate(_PlusMinus(0.1), None, 0)

    def test_edge_more_uncertain_than_central(self, coarse, blobs64):
        central = _slice_at(blobs64, RigidTransform.identity())
        edge = _slice_at(blobs64, RigidTransform.from_translation([0, 0, 20]))
        assert 0 < edge.content_fraction() < 0.05 < central.content_fraction()
        a = mc_aggregate(coarse, central, 100, 10.0, 0)
        b = mc_aggregate(coarse, edge, 100, 10.0, 0)
        assert b.variance > a.variance

    def test_same_seed_same_set(self, coarse, blobs64):
        img = _slice_at(blobs64, RigidTransform.from_translation([0, 0, 4]))
        a, b = mc_aggregate(coarse, img, 30, seed=9), mc_aggregate(coarse, img, 30, seed=9)
        assert a.variance == b.variance and np.array_equal(a.mean.matrix(), b.mean.matrix())
        assert all(np.array_equal(x.matrix(), y.matrix()) for x, y in zip(a.samples, b.samples))


class TestFilter:
    @staticmethod
    def _sets(vs):
        return [PredictionSet((), RigidTransform.identity(), v, v <= 10, "accepted" if v <= 10 else "rejected") for v in vs]

    def test_reported_variances(self):
        vs = [1.92, 2.46, 3.82, 9.66, 29.31, 30.92, 36.98, 43.34]
        kept, dropped = confidence_filter(self._sets(vs), 10)
        assert [s.variance for s in kept] == vs[:4] and [s.variance for s in dropped] == vs[4:]

    def test_edges(self):
        kept, dropped = confidence_filter(self._sets([0.0, 0.0, 0.0]), 10)
        assert len(kept) == 3 and not dropped
        kept, _ = confidence_filter(self._sets([0.0, 1e-12, 0.0, 2.0]), 0)
        assert [s.variance for s in kept] == [0.0, 0.0]
        kept, dropped = confidence_filter([PredictionSet(status="failed"), PredictionSet(variance=0.0, status="not-converged")], 10)
        assert not kept and len(dropped) == 2
