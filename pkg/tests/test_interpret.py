"""
Tests for protofed.Interpret module.
"""

import csv

import numpy as np
import pytest

import protofed
from protofed.Interpret import (EXPLANATION_HEADER, localization_rate,
                                mean_off_diagonal, write_explanation)
from protofed.Model import PROTOTYPES, backbone_forward


def test_bbox_of_single_hot_pixel():
    heatmap = np.zeros((4, 4))
    heatmap[1, 2] = 1.0
    box, degenerate = protofed.activation_bbox(heatmap, 95.0)
    assert box == protofed.Box(2, 1, 1, 1)
    assert not degenerate


def test_bbox_of_constant_map_is_flagged():
    box, degenerate = protofed.activation_bbox(np.full((6, 5), 0.7))
    assert box == protofed.Box(0, 0, 5, 6)
    assert degenerate


def test_bbox_spans_separated_peaks():
    heatmap = np.zeros((10, 10))
    heatmap[0, 0] = heatmap[9, 9] = 1.0
    box, _ = protofed.activation_bbox(heatmap, 99.0)
    assert box == protofed.Box(0, 0, 10, 10)


def test_iou_values():
    a = protofed.Box(0, 0, 2, 2)
    assert protofed.iou(a, a) == 1.0
    assert protofed.iou(a, protofed.Box(5, 5, 2, 2)) == 0.0
    assert protofed.iou(a, protofed.Box(1, 0, 2, 2)) == pytest.approx(1.0 / 3.0)
    assert protofed.iou(protofed.Box(0, 0, 0, 0), protofed.Box(0, 0, 0, 0)) == 0.0


def _image(rng, backbone):
    return rng.uniform(0.0, 1.0, size=(backbone.in_channels,)
                       + tuple(backbone.image_size))


def test_explain_ranks_all_prototypes(rng, tiny_backbone, tiny_params):
    m = tiny_backbone.num_prototypes
    activations = protofed.explain(_image(rng, tiny_backbone), tiny_params,
                                   tiny_backbone, top_k=m)
    assert len(activations) == m
    scores = [a.score for a in activations]
    assert scores == sorted(scores, reverse=True)
    assert sorted(a.index for a in activations) == list(range(m))
    for a in activations:
        assert a.heatmap.shape == tuple(tiny_backbone.image_size)
        assert a.heatmap.min() >= 0.0 and a.heatmap.max() <= 1.0


def test_exact_prototype_ranks_first(rng, tiny_backbone, tiny_params):
    image = _image(rng, tiny_backbone)
    z = backbone_forward(image[None], tiny_params, tiny_backbone)
    tiny_params.phi[PROTOTYPES].data[2] = z.data[0, :, 3:4, 0:1]
    top = protofed.explain(image, tiny_params, tiny_backbone, top_k=1)[0]
    assert top.index == 2
    assert top.score == 0.0
    assert top.similarity_map[3, 0] == 0.0


def test_explain_rejects_zero_top_k(rng, tiny_backbone, tiny_params):
    with pytest.raises(protofed.ConfigurationError):
        protofed.explain(_image(rng, tiny_backbone), tiny_params, tiny_backbone,
                         top_k=0)


def test_agreement_of_identical_clients(rng, tiny_backbone, tiny_params):
    matrix = protofed.cross_client_agreement(
        _image(rng, tiny_backbone), [tiny_params, tiny_params.copy()],
        tiny_backbone)
    np.testing.assert_array_equal(matrix, np.ones((2, 2)))
    assert mean_off_diagonal(matrix) == 1.0


def test_agreement_is_symmetric(rng, tiny_backbone, tiny_params):
    others = []
    for seed in (1, 2):
        params = tiny_params.copy()
        params.phi[PROTOTYPES].data = np.random.default_rng(seed).uniform(
            size=params.phi[PROTOTYPES].shape)
        others.append(params)
    matrix = protofed.cross_client_agreement(
        _image(rng, tiny_backbone), [tiny_params] + others, tiny_backbone)
    np.testing.assert_array_equal(matrix, matrix.T)
    np.testing.assert_array_equal(np.diag(matrix), np.ones(3))
    assert np.all((matrix >= 0.0) & (matrix <= 1.0))


def test_agreement_needs_two_clients(rng, tiny_backbone, tiny_params):
    with pytest.raises(protofed.ConfigurationError):
        protofed.cross_client_agreement(_image(rng, tiny_backbone),
                                        [tiny_params], tiny_backbone)


def test_localization_study_covers_diseased_images(small_sites, tiny_backbone,
                                                   tiny_params):
    results = protofed.localization_study(tiny_params, tiny_backbone,
                                          small_sites.test, max_images=3)
    expected = min(3, small_sites.test.diseased.size)
    assert len(results) == expected
    for r in results:
        assert r.label != 0
        assert 0.0 <= r.iou <= 1.0
    assert 0.0 <= localization_rate(results) <= 1.0
    assert np.isnan(localization_rate([]))


def test_write_explanation(rng, tiny_backbone, tiny_params, temp_output_dir):
    image = _image(rng, tiny_backbone)
    activations = protofed.explain(image, tiny_params, tiny_backbone, top_k=2)
    path = write_explanation(image, activations, temp_output_dir, "img")
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == EXPLANATION_HEADER
    assert len(rows) == 3
    for a in activations:
        assert (temp_output_dir / f"img_proto{a.index}_overlay.ppm").exists()
        assert (temp_output_dir / f"img_proto{a.index}_panel.ppm").exists()
