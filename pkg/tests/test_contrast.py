import math

import numpy as np
import pytest
import torch

from bevcon_lab.contrast import (
    ContrastConfig,
    ContrastInputError,
    align_by_id,
    contrast_terms,
    image_level_contrast,
    info_nce,
    instance_contrast_multilayer,
    multilayer_weights,
    perspective_contrast,
)
from bevcon_lab.geometry import BEVSpec, Box2D, Box3D
from bevcon_lab.model import FeaturePyramid
from bevcon_lab.pooling import InstanceFeatures, PoolConfig, pool_instances_bev, pool_instances_image

from _oracles import grad_check, info_nce_oracle


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def feats(vectors, ids=None):
    v = torch.as_tensor(np.asarray(vectors, dtype=np.float64))
    return InstanceFeatures(list(range(len(v))) if ids is None else list(ids), v)


class TestInfoNCE:
    def test_two_instance_analytic(self):
        f = feats([[1.0, 0.0], [-1.0, 0.0]])
        # positive sim +1, only negative sim -1: -(1 - (-1)) = -2 for every anchor
        assert info_nce(f, f, ContrastConfig(tau=1.0)).item() == -2.0

    def test_uniform_three(self):
        f = feats(np.tile([[0.6, 0.8]], (3, 1)))
        assert abs(info_nce(f, f, ContrastConfig(tau=0.3)).item() - math.log(2)) < 1e-12

    @pytest.mark.parametrize("tau", [0.05, 0.2, 1.0])
    @pytest.mark.parametrize("symmetric", [True, False])
    def test_oracle(self, rng, tau, symmetric):
        cfg = ContrastConfig(tau=tau, symmetric=symmetric)
        for _ in range(30):
            n, d = int(rng.integers(2, 9)), int(rng.integers(2, 9))
            a, b = unit_rows(rng, n, d), unit_rows(rng, n, d)
            got = info_nce(feats(a), feats(b), cfg).item()
            assert abs(got - info_nce_oracle(a, b, tau, symmetric)) < 1e-10

    def test_oracle_with_positive_in_denominator(self, rng):
        cfg = ContrastConfig(tau=0.2, include_positive_in_denominator=True)
        a, b = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
        ref = info_nce_oracle(a, b, 0.2, True, include_positive=True)
        assert abs(info_nce(feats(a), feats(b), cfg).item() - ref) < 1e-10
        assert ref > 0

    def test_single_instance_zero(self):
        assert info_nce(feats([[1.0, 0.0]]), feats([[0.0, 1.0]])).item() == 0.0

    def test_rotation_invariance(self, rng):
        a, b = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        l1 = info_nce(feats(a), feats(b)).item()
        l2 = info_nce(feats(a @ q), feats(b @ q)).item()
        assert abs(l1 - l2) < 1e-10

    def test_monotone_in_positive_similarity(self):
        # moving the positive of anchor 0 toward it lowers its loss
        base = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        prev = None
        for t in np.linspace(0.0, 1.0, 6):
            b = base.copy()
            b[0] = np.array([1.0 * t, 0.0, 1.0 - t])
            b[0] /= np.linalg.norm(b[0])
            loss = info_nce(feats(base), feats(b), ContrastConfig(symmetric=False)).item()
            if prev is not None:
                assert loss < prev
            prev = loss

    def test_errors(self):
        with pytest.raises(ContrastInputError):
            info_nce(feats([[1.0, 0.0], [0.0, 1.0]], [0, 1]), feats([[1.0, 0.0], [0.0, 1.0]], [1, 0]))
        with pytest.raises(ContrastInputError):
            info_nce(feats([[2.0, 0.0], [0.0, 1.0]]), feats([[1.0, 0.0], [0.0, 1.0]]))
        with pytest.raises(ContrastInputError):
            info_nce(feats([[1.0, 0.0], [0.0, 1.0]], [3, 3]), feats([[1.0, 0.0], [0.0, 1.0]], [3, 3]))
        with pytest.raises(ValueError):
            ContrastConfig(tau=0.0)

    def test_gradient(self, rng):
        a = torch.from_numpy(rng.standard_normal((5, 4))).requires_grad_()
        b = torch.from_numpy(rng.standard_normal((5, 4))).requires_grad_()
        norm = torch.nn.functional.normalize
        fn = lambda: info_nce(InstanceFeatures(list(range(5)), norm(a, dim=1)), InstanceFeatures(list(range(5)), norm(b, dim=1)))
        assert grad_check(fn, [a, b]) < 1e-4


class TestTermsAndAlignment:
    def test_anchor_without_negative_skipped(self):
        za = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        zb = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        # the single anchor of a has one negative in b; b's id-1 row has no positive
        terms = contrast_terms(za, [0], zb, [0, 1], ContrastConfig(tau=1.0, symmetric=False))
        assert terms.tolist() == [-1.0]
        rev = contrast_terms(zb, [0, 1], za, [0], ContrastConfig(tau=1.0, symmetric=False))
        assert rev.numel() == 0

    def test_align_by_id(self):
        a = feats(np.eye(3), [5, 2, 9])
        b = feats(np.eye(3)[::-1].copy(), [9, 7, 5])
        fa, fb = align_by_id(a, b)
        assert fa.ids == fb.ids == [5, 9]
        np.testing.assert_array_equal(fb.vectors.numpy(), [[1, 0, 0], [0, 0, 1]])


class TestMultilayer:
    def test_weights_exact(self):
        assert multilayer_weights(7, 1.0) == [1.0] * 7
        assert multilayer_weights(1, 0.3) == [1.0]
        assert multilayer_weights(3, 0.5) == [4.0, 2.0, 1.0]
        for n in (1, 3, 6):
            for eps in (0.25, 0.5, 2.0):
                assert multilayer_weights(n, eps) == [1.0 / eps ** (n - l) for l in range(1, n + 1)]

    def _layers(self, rng, n_layers=3, frames=2, channels=4):
        return [
            tuple(torch.from_numpy(rng.standard_normal((frames, channels, 10, 10))) for _ in range(2))
            for _ in range(n_layers)
        ]

    def _boxes(self):
        a = [Box3D((x, y, 0.8), 3.0, 1.6, 1.5, 0.3 * k, 0, k) for k, (x, y) in enumerate([(-5, -4), (3, 5), (6, -2)])]
        b = [Box3D((y, -x, 0.8), 3.0, 1.6, 1.5, 0.3 * k - math.pi / 2, 0, k) for k, (x, y) in enumerate([(-5, -4), (3, 5), (6, -2)])]
        return [a, a[:2]], [b, b[1:]]

    def test_compositional_oracle(self, rng):
        spec = BEVSpec(-10, 10, -10, 10, 10, 10)
        layers = self._layers(rng)
        boxes_a, boxes_b = self._boxes()
        cfg = ContrastConfig(tau=0.3, epsilon=0.5)
        total, per_layer = instance_contrast_multilayer(layers, boxes_a, boxes_b, spec, PoolConfig(), cfg)
        weights = [4.0, 2.0, 1.0]
        expected_total = 0.0
        for (ga, gb), w, got in zip(layers, weights, per_layer):
            all_terms = []
            for i in range(2):
                fa = pool_instances_bev(ga[i], boxes_a[i], spec)
                fb = pool_instances_bev(gb[i], boxes_b[i], spec)
                fa, fb = align_by_id(fa, fb)
                n = len(fa)
                if n < 2:
                    continue
                # the oracle returns the mean over 2n anchors; undo to recover the sum
                all_terms.append((info_nce_oracle(fa.vectors.numpy(), fb.vectors.numpy(), 0.3) * 2 * n, 2 * n))
            layer = sum(s for s, _ in all_terms) / sum(c for _, c in all_terms)
            assert abs(got.item() - layer) < 1e-10
            expected_total += w * layer
        assert abs(total.item() - expected_total) < 1e-10

    def test_misaligned_frames(self, rng):
        spec = BEVSpec(-10, 10, -10, 10, 10, 10)
        boxes_a, boxes_b = self._boxes()
        with pytest.raises(ContrastInputError):
            instance_contrast_multilayer(self._layers(rng, frames=3), boxes_a, boxes_b, spec)
        with pytest.raises(ContrastInputError):
            instance_contrast_multilayer([], boxes_a, boxes_b, spec)

    def test_gradient(self, rng):
        spec = BEVSpec(-10, 10, -10, 10, 10, 10)
        layers = [tuple(t.requires_grad_() for t in pair) for pair in self._layers(rng, 2, 1, 3)]
        boxes_a, boxes_b = self._boxes()
        fn = lambda: instance_contrast_multilayer(layers, boxes_a[:1], boxes_b[:1], spec)[0]
        assert grad_check(fn, [t for pair in layers for t in pair]) < 1e-4


def _pyramid(rng, frames=1, views=2):
    feats = [torch.from_numpy(rng.standard_normal((frames, views, 3, 32 // s, 48 // s))) for s in (4, 8)]
    return FeaturePyramid(feats, (4, 8))


BOXES2D = [
    Box2D(2.0, 3.0, 20.0, 25.0, 0, 1),
    Box2D(18.0, 5.0, 40.0, 30.0, 0, 2),
    Box2D(0.0, 2.0, 14.0, 20.0, 1, 1),
    Box2D(10.0, 10.0, 30.0, 31.0, 1, 3),
]


class TestPerspective:
    def test_compositional_oracle(self, rng):
        pa, pb = _pyramid(rng), _pyramid(rng)
        boxes_b = [BOXES2D[1], BOXES2D[0], BOXES2D[3]]  # view-1 box of instance 1 lost in b
        cfg = ContrastConfig(tau=0.5)
        total, per_level = perspective_contrast(pa, pb, [BOXES2D], [boxes_b], 0.6, PoolConfig(), cfg)
        for j, got in enumerate(per_level):
            fa = pool_instances_image([pa.features[j][0]], [pa.strides[j]], BOXES2D, 0.6)[0]
            fb = pool_instances_image([pb.features[j][0]], [pb.strides[j]], boxes_b, 0.6)[0]
            za, zb = fa.vectors.numpy(), fb.vectors.numpy()
            terms = []
            for src, dst, ids_s, ids_d in ((za, zb, fa.ids, fb.ids), (zb, za, fb.ids, fa.ids)):
                for i, iid in enumerate(ids_s):
                    negs = [k for k, x in enumerate(ids_d) if x != iid]
                    den = sum(math.exp(src[i] @ dst[k] / 0.5) for k in negs)
                    for k, x in enumerate(ids_d):
                        if x == iid:
                            terms.append(-(src[i] @ dst[k] / 0.5 - math.log(den)))
            assert abs(got.item() - np.mean(terms)) < 1e-10
        assert abs(total.item() - np.mean([l.item() for l in per_level])) < 1e-12

    def test_single_shared_instance_zero(self, rng):
        pa, pb = _pyramid(rng), _pyramid(rng)
        total, per_level = perspective_contrast(pa, pb, [BOXES2D[:1]], [BOXES2D[:1]], 0.6)
        assert total.item() == 0.0 and all(l.item() == 0.0 for l in per_level)

    def test_gradient(self, rng):
        pa, pb = _pyramid(rng), _pyramid(rng)
        for f in pa.features + pb.features:
            f.requires_grad_()
        fn = lambda: perspective_contrast(pa, pb, [BOXES2D], [BOXES2D], 0.6)[0]
        assert grad_check(fn, pa.features + pb.features) < 1e-4


class TestImageLevel:
    def test_matches_info_nce_on_view_means(self, rng):
        pa, pb = _pyramid(rng, views=4), _pyramid(rng, views=4)
        za = torch.nn.functional.normalize(pa.features[0][0].mean(dim=(-2, -1)), dim=-1).numpy()
        zb = torch.nn.functional.normalize(pb.features[0][0].mean(dim=(-2, -1)), dim=-1).numpy()
        got = image_level_contrast(pa, pb, ContrastConfig(tau=0.2)).item()
        assert abs(got - info_nce_oracle(za, zb, 0.2)) < 1e-10

    def test_single_view_zero(self, rng):
        pa = _pyramid(rng, views=1)
        assert image_level_contrast(pa, pa).item() == 0.0
