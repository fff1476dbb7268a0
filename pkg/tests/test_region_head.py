import numpy as np
import pytest

from regionret.dataset import AnnotatedImage, BoundingBox
from regionret.encoder import EncoderConfig, FeatureMap, encoder_init
from regionret.errors import DimensionError
from regionret.numerics import finite_diff_grad, make_rng, relative_grad_error
from regionret.region_head import (classifier_init, classify, classify_backward,
                                   embed_regions, feature_cells, predict_label,
                                   project, project_backward, projection_init,
                                   roi_pool, roi_pool_backward)


class TestFeatureCells:
    def test_aligned_box(self):
        assert feature_cells(BoundingBox(0, 8, 16, 24, 32), 8, 8, 8) == (2, 4, 1, 3)

    def test_outward_rounding(self):
        # mins floor, maxes ceil
        assert feature_cells(BoundingBox(0, 9, 17, 23, 31), 8, 8, 8) == (2, 4, 1, 3)

    def test_tiny_box_gets_one_cell(self):
        i0, i1, j0, j1 = feature_cells(BoundingBox(0, 10, 10, 11, 11), 8, 8, 8)
        assert (i1 - i0, j1 - j0) == (1, 1)

    def test_clamped_to_grid(self):
        i0, i1, j0, j1 = feature_cells(BoundingBox(0, 0, 0, 64, 64), 8, 8, 8)
        assert (i0, i1, j0, j1) == (0, 8, 0, 8)


class TestRoiPool:
    def test_constant_map(self):
        fmap = FeatureMap(np.full((3, 8, 8), 2.5), downsample_factor=8)
        pooled = roi_pool(fmap, BoundingBox(0, 5, 5, 40, 40))
        assert np.array_equal(pooled, np.full(3, 2.5))

    def test_forced_mean(self):
        data = np.zeros((1, 4, 4))
        data[0, 0:2, 0:2] = [[1.0, 2.0], [3.0, 5.0]]
        fmap = FeatureMap(data, downsample_factor=8)
        pooled = roi_pool(fmap, BoundingBox(0, 0, 0, 16, 16))
        assert pooled[0] == 2.75

    def test_cell_enumeration_oracle(self):
        rng = make_rng(12)
        data = rng.normal(size=(5, 8, 8))
        fmap = FeatureMap(data, downsample_factor=8)
        box = BoundingBox(0, 11, 19, 45, 57)
        i0, i1, j0, j1 = feature_cells(box, 8, 8, 8)
        expected = np.zeros(5)
        count = 0
        for i in range(i0, i1):
            for j in range(j0, j1):
                expected += data[:, i, j]
                count += 1
        expected /= count
        assert np.max(np.abs(roi_pool(fmap, box) - expected)) < 1e-12

    def test_backward_uniform_spread(self):
        grad = roi_pool_backward((2, 4, 4), 8, BoundingBox(0, 0, 0, 16, 16),
                                 np.array([4.0, 8.0]))
        assert np.array_equal(grad[0, 0:2, 0:2], np.ones((2, 2)))
        assert np.array_equal(grad[1, 0:2, 0:2], np.full((2, 2), 2.0))
        assert np.count_nonzero(grad) == 8

    def test_backward_matches_finite_differences(self):
        rng = make_rng(13)
        data = rng.normal(size=(3, 8, 8))
        box = BoundingBox(0, 5, 9, 30, 50)
        w = rng.normal(size=3)

        def f(flat):
            fm = FeatureMap(flat, downsample_factor=8)
            return float(roi_pool(fm, box) @ w)

        numeric = finite_diff_grad(f, data.copy())
        analytic = roi_pool_backward((3, 8, 8), 8, box, w)
        assert relative_grad_error(analytic, numeric) < 1e-6


class TestProjection:
    def test_shapes_and_unit_norm(self):
        params = projection_init(make_rng(0), d_in=16, d_hid=32, d_out=8)
        z, z_norm, _ = project(params, make_rng(1).normal(size=16))
        assert z.shape == (8,)
        assert abs(np.linalg.norm(z_norm) - 1.0) < 1e-12

    def test_bad_input(self):
        params = projection_init(make_rng(0), d_in=16)
        with pytest.raises(DimensionError):
            project(params, np.zeros(17))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_backward_through_normalization(self, seed):
        rng = make_rng(seed)
        params = projection_init(rng, d_in=10, d_hid=12, d_out=6)
        r = rng.normal(size=10)
        w = rng.normal(size=6)

        def loss_for(pdict, rin):
            _, zn, _ = project(pdict, rin)
            return float(zn @ w)

        _, _, cache = project(params, r)
        grads, dr = project_backward(params, cache, dz_norm=w)
        for name in grads:
            def f(val, name=name):
                trial = dict(params)
                trial[name] = val
                return loss_for(trial, r)
            numeric = finite_diff_grad(f, params[name].copy())
            assert relative_grad_error(grads[name], numeric) < 1e-5, name
        numeric_r = finite_diff_grad(lambda v: loss_for(params, v), r.copy())
        assert relative_grad_error(dr, numeric_r) < 1e-5

    def test_backward_raw_branch(self):
        rng = make_rng(5)
        params = projection_init(rng, d_in=8, d_hid=8, d_out=4)
        r = rng.normal(size=8)
        w = rng.normal(size=4)

        def loss_for(pdict):
            z, _, _ = pdict_project(pdict)
            return float(z @ w)

        def pdict_project(pdict):
            return project(pdict, r)

        _, _, cache = project(params, r)
        grads, _ = project_backward(params, cache, dz=w)
        for name in grads:
            def f(val, name=name):
                trial = dict(params)
                trial[name] = val
                return loss_for(trial)
            numeric = finite_diff_grad(f, params[name].copy())
            assert relative_grad_error(grads[name], numeric) < 1e-5, name

    def test_normalization_grad_orthogonal_to_direction(self):
        # the normalized output cannot change along its own direction
        rng = make_rng(6)
        params = projection_init(rng, d_in=8, d_hid=8, d_out=4)
        z, z_norm, cache = project(params, rng.normal(size=8))
        grads_along, _ = project_backward(params, cache, dz_norm=z_norm.copy())
        for g in grads_along.values():
            assert np.max(np.abs(g)) < 1e-10


class TestClassifier:
    def test_zero_init_uniform_logits(self):
        params = classifier_init(6, num_classes=4)
        logits = classify(params, make_rng(0).normal(size=6))
        assert np.array_equal(logits, np.zeros(4))

    def test_forced_affine(self):
        params = {"cls_w": np.array([[1.0, 0.0], [0.0, 2.0]]),
                  "cls_b": np.array([0.5, -0.5])}
        assert np.array_equal(classify(params, np.array([3.0, 4.0])),
                              np.array([3.5, 7.5]))

    def test_backward_matches_finite_differences(self):
        rng = make_rng(7)
        params = {"cls_w": rng.normal(size=(4, 6)), "cls_b": rng.normal(size=4)}
        z = rng.normal(size=6)
        w = rng.normal(size=4)

        grads, dz = classify_backward(params, z, w)
        for name in ("cls_w", "cls_b"):
            def f(val, name=name):
                trial = dict(params)
                trial[name] = val
                return float(classify(trial, z) @ w)
            numeric = finite_diff_grad(f, params[name].copy())
            assert relative_grad_error(grads[name], numeric) < 1e-6, name
        numeric_z = finite_diff_grad(lambda v: float(classify(params, v) @ w),
                                     z.copy())
        assert relative_grad_error(dz, numeric_z) < 1e-6

    def test_predict_lowest_id_tie_break(self):
        assert predict_label(np.array([0.0, 1.0, 1.0])) == 1
        assert predict_label(np.zeros(3)) == 0


class TestEmbedRegions:
    def _setup(self, seed=0):
        cfg = EncoderConfig(layers=((4, 2), (6, 2)))
        rng = make_rng(seed)
        params = encoder_init(cfg, rng)
        params.update(projection_init(rng, d_in=6, d_hid=16, d_out=8))
        pixels = rng.uniform(0, 1, size=(32, 32))
        sample = AnnotatedImage("s0", pixels,
                                [BoundingBox(2, 16, 0, 30, 14),
                                 BoundingBox(0, 1, 2, 12, 13)])
        return cfg, params, sample

    def test_cardinality_and_label_order(self):
        cfg, params, sample = self._setup()
        embs = self._embs = embed_regions(params, cfg, sample)
        assert [e.label for e in embs] == [0, 2]
        assert all(e.image_id == "s0" for e in embs)
        assert all(abs(np.linalg.norm(e.z_norm) - 1.0) < 1e-12 for e in embs)

    def test_composition_oracle(self):
        from regionret.encoder import encoder_forward
        cfg, params, sample = self._setup(seed=3)
        embs = embed_regions(params, cfg, sample)
        fmap, _ = encoder_forward(params, cfg, sample.pixels[None])
        for e, box in zip(embs, sorted(sample.boxes, key=lambda b: b.label)):
            z, z_norm, _ = project(params, roi_pool(fmap, box))
            assert np.array_equal(e.z, z)
            assert np.array_equal(e.z_norm, z_norm)
