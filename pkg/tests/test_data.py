import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsict.config import CLASS_NAMES, AugmentConfig
from hsict.data import (CLASS_ALIASES, LABELS, DecodeError, Sample, augment_matrix, augment_sample, balance_classes,
                        decode_ppm, denormalize_pixels, encode_ppm, label_for, load_dataset, normalize_pixels,
                        read_image, resize_bilinear, synth_toy_dataset, warp_affine, write_dataset)
from hsict.errors import ConfigError, HsictError
from hsict.metrics import nearest_centroid_accuracy, pixel_histograms
from hsict.train import split_dataset

from oracles import histogram_features, nearest_centroid_loops

FLIP_H = AugmentConfig(ops=("flip_horizontal",), prob=1.0)
NOTHING = AugmentConfig(ops=())


def rgb(seed, h, w):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


def sample(seed=0, size=12, label=1):
    return Sample(normalize_pixels(rgb(seed, size, size)), label)


# -- labels and codecs --------------------------------------------------------------------

def test_label_mapping_is_alphabetical_bijection():
    assert list(CLASS_NAMES) == sorted(CLASS_NAMES)
    assert [LABELS[n] for n in CLASS_NAMES] == [0, 1, 2, 3, 4]
    assert {label_for(n) for n in CLASS_NAMES} == set(range(5))
    assert all(CLASS_NAMES[label_for(n)] == n for n in CLASS_NAMES)
    assert label_for("NORMAL") == 4 and label_for("mpox") == 3 and CLASS_ALIASES["mpox"] == "Monkeypox"
    assert label_for("Eczema") is None


def test_ppm_roundtrip_and_header_comments():
    img = rgb(0, 5, 7)
    assert np.array_equal(decode_ppm(encode_ppm(img)), img)
    buf = b"P6\n# a comment\n7 5\n255\n" + img.tobytes()
    assert np.array_equal(decode_ppm(buf), img)


def test_ppm_rejects_bad_input():
    with pytest.raises(DecodeError):
        decode_ppm(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(DecodeError, match="truncated"):
        decode_ppm(b"P6\n4 4\n255\n" + b"\0" * 10)


def test_sixteen_bit_ppm_scaled():
    raw = np.array([[[0, 65535, 32768]]], dtype=">u2")
    out = decode_ppm(b"P6\n1 1\n65535\n" + raw.tobytes())
    np.testing.assert_array_equal(out, [[[0, 255, 128]]])


def test_normalize_roundtrip():
    img = rgb(1, 6, 4)
    x = normalize_pixels(img)
    assert x.shape == (1, 3, 6, 4) and x.min() >= -1 and x.max() <= 1
    np.testing.assert_array_equal(denormalize_pixels(x), img)


# -- resize --------------------------------------------------------------------------------

def test_resize_same_size_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 3, 224, 224))
    out = resize_bilinear(x, (224, 224))
    assert out is not x
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_resize_constant_and_shape():
    x = np.full((1, 3, 80, 100), 0.25)
    out = resize_bilinear(x, (224, 224))
    assert out.shape == (1, 3, 224, 224)
    np.testing.assert_allclose(out, 0.25, atol=1e-12)


def test_resize_linear_ramp_interior():
    # bilinear reproduces an affine ramp away from the clamped border
    x = np.arange(8.0)[None, None, None, :].repeat(8, axis=2)
    out = resize_bilinear(x, (8, 16))
    src = (np.arange(16) + 0.5) * 0.5 - 0.5
    np.testing.assert_allclose(out[0, 0, 0, 1:-1], src[1:-1], atol=1e-12)


# -- loading ----------------------------------------------------------------------------

def test_load_single_ppm(tmp_path):
    (tmp_path / "Normal").mkdir()
    (tmp_path / "Normal" / "a.ppm").write_bytes(encode_ppm(rgb(0, 80, 100)))
    [s] = load_dataset(tmp_path)
    assert s.image.shape == (1, 3, 224, 224) and s.label == 4 and s.image.dtype == np.float32


def test_load_skips_unknown_and_bad_files(tmp_path, caplog):
    for d in ("measles", "Eczema"):
        (tmp_path / d).mkdir()
    (tmp_path / "measles" / "ok.ppm").write_bytes(encode_ppm(rgb(0, 10, 10)))
    (tmp_path / "measles" / "broken.ppm").write_bytes(b"P6\n10 10\n255\n\0")
    (tmp_path / "measles" / "notes.txt").write_text("x")
    (tmp_path / "Eczema" / "x.ppm").write_bytes(encode_ppm(rgb(0, 10, 10)))
    with caplog.at_level(logging.WARNING):
        samples = load_dataset(tmp_path, image_size=16)
    assert [s.label for s in samples] == [2]
    assert "Eczema" in caplog.text and "broken.ppm" in caplog.text and "notes.txt" in caplog.text


def test_load_errors(tmp_path):
    with pytest.raises(HsictError):
        load_dataset(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_custom_decoder_hook(tmp_path, monkeypatch):
    from hsict import data

    monkeypatch.setitem(data.DECODERS, ".raw", lambda b: np.frombuffer(b, np.uint8).reshape(2, 2, 3))
    p = tmp_path / "x.raw"
    p.write_bytes(bytes(range(12)))
    assert read_image(p).shape == (2, 2, 3)
    with pytest.raises(DecodeError):
        read_image(tmp_path / "x.bmp")


def test_write_then_load_roundtrip(tmp_path):
    samples = synth_toy_dataset(2, 16, seed=0)
    write_dataset(samples, tmp_path)
    back = load_dataset(tmp_path, image_size=16)
    assert sorted(s.label for s in back) == sorted(s.label for s in samples)
    by_label = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s.image)
    for s in back:
        assert any(np.array_equal(s.image, img) for img in by_label[s.label])


# -- augmentation ---------------------------------------------------------------------------

def test_all_ops_disabled_is_identity():
    s = sample()
    for seed in range(5):
        assert np.array_equal(augment_sample(s, NOTHING, np.random.default_rng(seed)).image, s.image)


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_flips_are_involutions(seed):
    s = sample(seed, 9)
    for op in ("flip_horizontal", "flip_vertical", "reflect"):
        cfg = AugmentConfig(ops=(op,), prob=1.0)
        twice = augment_sample(augment_sample(s, cfg, np.random.default_rng(0)), cfg, np.random.default_rng(1))
        assert np.array_equal(twice.image, s.image)


def test_double_flip_is_half_turn():
    s = sample(3, 7)
    cfg = AugmentConfig(ops=("flip_horizontal", "flip_vertical"), prob=1.0)
    out = augment_sample(s, cfg, np.random.default_rng(0)).image
    assert np.array_equal(out[0], np.rot90(s.image[0], 2, axes=(1, 2)))


def test_identity_warp_within_tolerance():
    x = sample(4, 20).image.astype(np.float64)
    m = augment_matrix(1.0, 0.0)
    np.testing.assert_array_equal(m, np.eye(2))
    np.testing.assert_allclose(warp_affine(x, m), x, atol=1e-6)


def test_augment_keeps_label_and_is_seeded():
    s = sample(label=3)
    cfg = AugmentConfig(prob=0.7)
    a = augment_sample(s, cfg, np.random.default_rng(11))
    b = augment_sample(s, cfg, np.random.default_rng(11))
    assert a.label == 3 and np.array_equal(a.image, b.image)
    assert np.all(np.isfinite(a.image))


def test_zoom_resampling_center_fixed():
    x = np.zeros((1, 1, 9, 9))
    x[0, 0, 4, 4] = 1.0
    out = warp_affine(x, augment_matrix(1.1))
    assert out[0, 0, 4, 4] == pytest.approx(1.0)


# -- balancing ----------------------------------------------------------------------------------

def test_balance_counts_and_originals():
    samples = [sample(i, 8, 0) for i in range(10)] + [sample(100 + i, 8, 1) for i in range(40)]
    out = balance_classes(samples, 40, AugmentConfig(), seed=0)
    assert np.bincount([s.label for s in out]).tolist() == [40, 40]
    assert out[:50] == samples
    copies = out[50:]
    assert len(copies) == 30 and all(c.label == 0 for c in copies)
    for k, c in enumerate(copies):
        assert not np.array_equal(c.image, samples[k % 10].image)


def test_balance_forced_change_when_only_flips_hit_symmetric_image():
    flat = Sample(np.zeros((1, 3, 8, 8), np.float32) + np.arange(8, dtype=np.float32)[:, None], 0)
    out = balance_classes([flat], 3, AugmentConfig(ops=("flip_horizontal",), prob=1.0))
    assert len(out) == 3 and all(not np.array_equal(c.image, flat.image) for c in out[1:])


def test_balanced_input_unchanged():
    samples = [sample(i, 8, i % 2) for i in range(6)]
    assert balance_classes(samples, 3, AugmentConfig()) == samples


# -- toy data ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    return synth_toy_dataset(200, 64, seed=0)


def test_toy_counts_and_determinism(toy):
    assert len(toy) == 1000
    assert np.bincount([s.label for s in toy]).tolist() == [200] * 5
    again = synth_toy_dataset(3, 64, seed=0)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(again, toy[:15]))
    other = synth_toy_dataset(3, 64, seed=1)
    assert not np.array_equal(other[0].image, toy[0].image)


def test_toy_validation():
    with pytest.raises(ConfigError):
        synth_toy_dataset(2, 8)
    with pytest.raises(ConfigError):
        synth_toy_dataset(0, 32)


def histogram_baseline(samples, seed):
    tr, va, te = split_dataset(samples, seed)
    fit = tr + va
    fx = histogram_features(np.concatenate([s.image for s in fit]))
    tx = histogram_features(np.concatenate([s.image for s in te]))
    return nearest_centroid_loops(fx, [s.label for s in fit], tx, [s.label for s in te])


def test_histogram_baseline_below_ninety(toy):
    acc = histogram_baseline(toy, 0)
    assert acc < 0.90, acc


def test_package_histograms_match_oracle(toy):
    imgs = np.concatenate([s.image for s in toy[:100]])
    np.testing.assert_allclose(pixel_histograms(imgs), histogram_features(imgs), atol=0.02)
    y = np.array([s.label for s in toy[:100]])
    f = histogram_features(imgs)
    assert nearest_centroid_accuracy(f[:60], y[:60], f[60:], y[60:]) == \
        pytest.approx(nearest_centroid_loops(f[:60], y[:60], f[60:], y[60:]), abs=1e-12)
