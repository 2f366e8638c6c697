"""
Tests for protofed.SiteData module.
"""

import numpy as np
import pytest

import protofed
from protofed.SiteData import (TEST_SITE, BalancedSampler, SiteSpec, augment,
                               generate_site, load_site, site_specs,
                               split_train_val, write_site)


def _site(num_samples=40, healthy_fraction=0.5, seed=0, **kwargs):
    return generate_site(SiteSpec(1, num_samples, healthy_fraction, seed=seed,
                                  **kwargs), (16, 16), 2, glyph_size=6)


def test_all_healthy_site_has_no_boxes():
    site = _site(healthy_fraction=1.0)
    assert np.all(site.labels == 0)
    assert all(box is None for box in site.boxes)
    assert site.diseased.size == 0


def test_healthy_count_follows_fraction():
    site = generate_site(SiteSpec(1, 1000, 0.8, seed=9), (16, 16), 2,
                         glyph_size=6)
    assert np.sum(site.labels == 0) == 800
    assert site.images.shape == (1000, 1, 16, 16)


def test_generation_is_deterministic():
    a, b = _site(seed=4), _site(seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.boxes == b.boxes
    assert not np.array_equal(a.images, _site(seed=5).images)


def test_boxes_cover_planted_glyph():
    site = _site(noise_std=0.0)
    assert np.all((site.images >= 0.0) & (site.images <= 1.0))
    for i in site.diseased:
        box = site.boxes[i]
        assert 1 <= box.w <= 6 and 1 <= box.h <= 6
        assert box.x + box.w <= 16 and box.y + box.h <= 16


def test_glyph_must_fit_image():
    with pytest.raises(protofed.ConfigurationError):
        generate_site(SiteSpec(1, 4, 0.5), (8, 8), 2, glyph_size=12)


def test_invalid_site_spec():
    with pytest.raises(protofed.ConfigurationError):
        SiteSpec(1, 10, 1.5)
    with pytest.raises(protofed.ConfigurationError):
        SiteSpec(1, 0, 0.5)


def test_split_is_stratified_and_disjoint():
    site = _site(num_samples=10)
    train, val = split_train_val(site, fraction=0.8, seed=0)
    assert len(train) == 8 and len(val) == 2
    assert set(train.indices) | set(val.indices) == set(range(10))
    assert not set(train.indices) & set(val.indices)
    np.testing.assert_array_equal(val.class_counts(2), [1, 1])


def test_split_needs_enough_samples():
    with pytest.raises(protofed.DataError):
        split_train_val(_site(num_samples=4))
    with pytest.raises(protofed.DataError):
        split_train_val(_site(num_samples=10, healthy_fraction=0.9))


def test_balanced_batches_oversample_minority():
    labels = np.array([0, 0, 0, 0, 0, 0, 1, 1])
    sampler = BalancedSampler(labels, 2, batch_size=4, seed=0)
    assert len(sampler) == 3
    batches = list(sampler.epoch())
    assert len(batches) == 3
    for batch in batches:
        np.testing.assert_array_equal(np.bincount(labels[batch], minlength=2),
                                      [2, 2])
    majority = np.concatenate(batches)[labels[np.concatenate(batches)] == 0]
    assert sorted(majority) == [0, 1, 2, 3, 4, 5]


def test_odd_batch_composition_alternates():
    sampler = BalancedSampler(np.array([0, 0, 1, 1]), 2, batch_size=5, seed=0)
    np.testing.assert_array_equal(sampler.composition(0), [3, 2])
    np.testing.assert_array_equal(sampler.composition(1), [2, 3])


def test_sampler_rejects_missing_class():
    with pytest.raises(protofed.DataError):
        BalancedSampler(np.array([0, 0, 0]), 2, batch_size=4, seed=0)
    with pytest.raises(protofed.DataError):
        BalancedSampler(np.array([0, 1]), 2, batch_size=1, seed=0)


def test_sampler_state_persists_between_epochs():
    labels = np.array([0, 0, 0, 1, 1, 1])
    a = BalancedSampler(labels, 2, batch_size=2, seed=3)
    b = BalancedSampler(labels, 2, batch_size=2, seed=3)
    first = np.concatenate(list(a.epoch()))
    second = np.concatenate(list(a.epoch()))
    both = np.concatenate(list(b.epoch()) + list(b.epoch()))
    np.testing.assert_array_equal(np.concatenate([first, second]), both)


def test_augment_keeps_range_and_shape(rng):
    images = _site().images[:5]
    out = augment(images, rng)
    assert out.shape == images.shape
    assert np.all((out >= 0.0) & (out <= 1.0))


def test_site_specs_of_default_data():
    specs = site_specs(protofed.DataConfig())
    assert list(specs) == ["site1", "site2", "site3", "site4", TEST_SITE]
    assert [specs[f"site{i}"].num_samples for i in range(1, 5)] == \
        [600, 500, 400, 300]


def test_write_and_load_site(temp_output_dir):
    site = _site(num_samples=8)
    write_site(site, temp_output_dir / "site1", "site1")
    loaded = load_site(temp_output_dir / "site1", 1)
    np.testing.assert_array_equal(loaded.labels, site.labels)
    assert loaded.boxes == site.boxes
    assert np.max(np.abs(loaded.images - site.images)) <= 1.0 / 510.0 + 1e-12


def test_load_site_without_manifest(temp_output_dir):
    with pytest.raises(protofed.DataError):
        load_site(temp_output_dir)


def test_build_sites_of_small_config(small_sites, make_config):
    config = make_config()
    assert len(small_sites.train) == len(small_sites.val) == 2
    assert len(small_sites.train[0]) + len(small_sites.val[0]) == 24
    assert len(small_sites.test) == config.data.test_size
    assert small_sites.external is None and small_sites.pretrain is None
