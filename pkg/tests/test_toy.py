"""Toy localizer and dataset factory: determinism, statistics, buckets."""

import numpy as np
import pytest

from canoneval.graph import forward
from canoneval.toy import IMAGE_SIZE, make_toy_dataset, make_toy_localizer


def _bn_nodes(g):
    return sorted(n.id for n in g.nodes.values() if n.kind == "bn")


class TestLocalizerFactory:
    def test_same_seed_identical(self):
        a = make_toy_localizer(11, with_bn=True)
        b = make_toy_localizer(11, with_bn=True)
        assert set(a.nodes) == set(b.nodes)
        for nid in a.nodes:
            pa, pb = a.nodes[nid].params, b.nodes[nid].params
            if pa is None:
                assert pb is None
                continue
            for attr in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
                ta = getattr(pa, attr, None)
                if ta is not None:
                    assert ta.tobytes() == getattr(pb, attr).tobytes(), (nid, attr)

    def test_different_seeds_differ(self):
        a = make_toy_localizer(0, with_bn=True)
        b = make_toy_localizer(1, with_bn=True)
        assert (
            a.nodes["conv1"].params.weight.tobytes() != b.nodes["conv1"].params.weight.tobytes()
        )

    def test_without_bn_has_zero_bn_nodes(self):
        assert _bn_nodes(make_toy_localizer(0, with_bn=False)) == []

    def test_with_bn_has_bn_after_every_conv(self):
        g = make_toy_localizer(0, with_bn=True)
        convs = [n for n in g.nodes.values() if n.kind == "conv"]
        assert len(convs) == 3
        for conv in convs:
            consumers = g.consumers(conv.id)
            assert len(consumers) == 1
            assert g.nodes[consumers[0]].kind == "bn"

    def test_bn_statistics_ranges(self):
        g = make_toy_localizer(5, with_bn=True)
        for nid in _bn_nodes(g):
            p = g.nodes[nid].params
            assert np.all(p.running_var.array >= 0.25) and np.all(p.running_var.array <= 4.0)
            assert np.all(p.gamma.array >= 0.5) and np.all(p.gamma.array <= 2.0)
            assert np.all(p.running_mean.array != 0.0)
            shift = p.shift()
            assert np.all(shift >= 0.25 - 1e-12) and np.all(shift <= 0.5 + 1e-12)

    def test_has_residual_add(self):
        g = make_toy_localizer(0, with_bn=True)
        adds = [n for n in g.nodes.values() if n.kind == "add"]
        assert len(adds) == 1

    @pytest.mark.parametrize("with_bn", [True, False])
    def test_classification_accuracy(self, with_bn):
        g = make_toy_localizer(0, with_bn=with_bn)
        samples = make_toy_dataset(0, 200)
        batch = np.stack([s.image.array for s in samples])
        pred = forward(g, batch).array.argmax(axis=1)
        accuracy = float(np.mean(pred == [s.label for s in samples]))
        assert accuracy >= 0.95


class TestDatasetFactory:
    def test_requires_positive_n(self):
        with pytest.raises(ValueError):
            make_toy_dataset(0, 0)

    def test_every_sample_has_one_bbox_in_bounds(self):
        for s in make_toy_dataset(2, 50):
            assert len(s.bboxes) == 1
            x0, y0, x1, y1 = s.bboxes[0]
            assert 0 <= x0 < x1 <= IMAGE_SIZE
            assert 0 <= y0 < y1 <= IMAGE_SIZE

    def test_template_inside_bbox_only(self):
        # with the noise turned off the construction is directly visible
        for s in make_toy_dataset(3, 30, noise_sigma=0.0):
            img = s.image.array[0]
            x0, y0, x1, y1 = s.bboxes[0]
            mask = np.zeros_like(img, dtype=bool)
            mask[y0:y1, x0:x1] = True
            assert np.all(img[~mask] == 0.0)
            assert np.all(np.abs(img[mask]) > 0.0)

    def test_noise_draws_do_not_shift_geometry(self):
        clean = make_toy_dataset(5, 20, noise_sigma=0.0)
        noisy = make_toy_dataset(5, 20, noise_sigma=0.3)
        for c, n in zip(clean, noisy):
            assert c.bboxes == n.bboxes
            assert c.label == n.label

    def test_determinism(self):
        a = make_toy_dataset(9, 10)
        b = make_toy_dataset(9, 10)
        for s1, s2 in zip(a, b):
            assert s1.image.tobytes() == s2.image.tobytes()
            assert s1.bboxes == s2.bboxes

    def test_area_buckets_all_populated(self):
        samples = make_toy_dataset(0, 300)
        fractions = []
        for s in samples:
            x0, y0, x1, y1 = s.bboxes[0]
            fractions.append((x1 - x0) * (y1 - y0) / IMAGE_SIZE**2)
        fractions = np.array(fractions)
        assert (fractions < 0.25).sum() > 0
        assert ((fractions >= 0.25) & (fractions < 0.5)).sum() > 0
        assert (fractions >= 0.5).sum() > 0

    def test_all_classes_present(self):
        labels = {s.label for s in make_toy_dataset(1, 60)}
        assert labels == {0, 1, 2}
