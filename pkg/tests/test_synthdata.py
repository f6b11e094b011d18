import numpy as np
import pytest
from hypothesis import given, strategies as st

from objboot.config import AugConfig, ConfigError, SceneConfig
from objboot.synthdata import (AugmentationError, SceneImage, augment_pair, crop_overlap, export_png,
                               full_view, generate_scene, ground_truth_object_pool, make_view,
                               patch_majority_labels, read_manifest, write_manifest)


def _point_in_triangle(py, px, tri):
    (ay, ax), (by, bx), (cy, cx) = tri
    # barycentric coordinates, boundary inclusive
    det = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
    l1 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / det
    l2 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / det
    return l1 >= 0 and l2 >= 0 and 1 - l1 - l2 >= 0


def _rasterize(shapes, size):
    """Pixel-by-pixel reference rasteriser; later shapes overwrite earlier ones."""
    labels = np.zeros((size, size), dtype=int)
    for y in range(size):
        for x in range(size):
            py, px = y + 0.5, x + 0.5
            for s in shapes:
                p = s.params
                if s.kind == "rect":
                    inside = p[0] <= py <= p[2] and p[1] <= px <= p[3]
                elif s.kind == "disk":
                    inside = (py - p[0]) ** 2 + (px - p[1]) ** 2 <= p[2] ** 2
                else:
                    inside = _point_in_triangle(py, px, (p[0:2], p[2:4], p[4:6]))
                if inside:
                    labels[y, x] = s.class_id
    return labels


def test_two_classes_single_object():
    cfg = SceneConfig(num_classes=2, min_objects=1, max_objects=1)
    img = generate_scene(7, cfg)
    assert set(np.unique(img.labels)) == {0, 1}


def test_generation_is_deterministic(scene_cfg):
    a, b = generate_scene(5, scene_cfg), generate_scene(5, scene_cfg)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.labels, b.labels)
    c = generate_scene(6, scene_cfg)
    assert not np.array_equal(a.pixels, c.pixels)


def test_label_histogram_matches_reference_rasteriser():
    cfg = SceneConfig(image_size=64, min_objects=3, max_objects=3)
    img = generate_scene(3, cfg)
    assert len(img.shapes) == 3
    ref = _rasterize(img.shapes, 64)
    assert np.array_equal(np.bincount(img.labels.ravel(), minlength=4), np.bincount(ref.ravel(), minlength=4))
    assert np.array_equal(img.labels, ref)


@given(st.integers(0, 10_000))
def test_scene_invariants(seed):
    cfg = SceneConfig()
    img = generate_scene(seed, cfg)
    assert img.pixels.min() >= 0 and img.pixels.max() <= 1
    assert img.labels.min() >= 0 and img.labels.max() < cfg.num_classes


@given(st.integers(0, 10_000), st.floats(0, 1))
def test_background_chroma_scales_distance_from_grey(seed, chroma):
    clean = dict(pixel_noise=0.0, illumination_gain=(1.0, 1.0), illumination_offset=(0.0, 0.0))
    full = generate_scene(seed, SceneConfig(background_chroma=1.0, **clean))
    part = generate_scene(seed, SceneConfig(background_chroma=chroma, **clean))
    bg = full.labels == 0
    if bg.any():
        dev_full = full.pixels[bg] - full.pixels[bg].mean(axis=-1, keepdims=True)
        dev_part = part.pixels[bg] - part.pixels[bg].mean(axis=-1, keepdims=True)
        # clipping only happens away from the grey axis, so compare unclipped pixels
        ok = np.all([(im.pixels[bg] > 0).all(-1) & (im.pixels[bg] < 1).all(-1) for im in (full, part)], axis=0)
        np.testing.assert_allclose(dev_part[ok], chroma * dev_full[ok], atol=1e-12)


@pytest.mark.parametrize("bad", [dict(num_classes=0), dict(num_classes=1), dict(image_size=60),
                                 dict(num_classes=6), dict(background_chroma=1.5)])
def test_bad_scene_config(bad):
    with pytest.raises(ConfigError):
        generate_scene(0, SceneConfig(**bad))


def test_identity_augmentation_reproduces_source():
    cfg = SceneConfig(image_size=32)
    img = generate_scene(1, cfg)
    v1, v2 = augment_pair(img, 0, AugConfig.identity(32))
    assert np.array_equal(v1.pixels, v2.pixels)
    np.testing.assert_allclose(v1.pixels, img.pixels, atol=1e-12)
    assert np.array_equal(v1.patch_labels, patch_majority_labels(img.labels, 8))


def test_flip_mirrors_coords(aug_cfg):
    img = generate_scene(2, SceneConfig())
    box = (4.0, 6.0, 40.0, 48.0)
    a = make_view(img, box, False, aug_cfg)
    b = make_view(img, box, True, aug_cfg)
    g = a.grid
    mirrored = a.patch_coords.reshape(g + (2,))[:, ::-1].reshape(-1, 2)
    np.testing.assert_allclose(b.patch_coords, mirrored, atol=1e-12)
    np.testing.assert_allclose(b.pixels, a.pixels[:, ::-1], atol=1e-12)


def _ramp_scene(size=64):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    pixels = np.stack([yy / size, xx / size, np.zeros_like(yy)], axis=-1)
    return SceneImage(pixels=pixels, labels=np.zeros((size, size), dtype=np.int64), image_id=0)


@pytest.mark.parametrize("seed", [11, 12, 13])
def test_patch_coords_match_resampled_coordinate_ramp(seed):
    """Rendering an image whose pixels encode their own coordinates gives the patch centres back."""
    img = _ramp_scene()
    cfg = AugConfig(brightness=0, contrast=0, saturation=0, hue=0)
    for view in augment_pair(img, seed, cfg):
        p = view.patch_size
        g = view.grid
        # bilinear resampling of a linear ramp is exact; the 2x2 central pixels average to the centre
        blocks = view.pixels.reshape(g[0], p, g[1], p, 3)[:, p // 2 - 1:p // 2 + 1, :, p // 2 - 1:p // 2 + 1]
        centre = blocks.mean(axis=(1, 3)).reshape(-1, 3)[:, :2]
        np.testing.assert_allclose(centre, view.patch_coords, atol=1e-12)


def _closed_form_coords(box, flip, view_size, p, size):
    y0, x0, h, w = box
    out = []
    for i in range(view_size // p):
        for j in range(view_size // p):
            col = view_size // p - 1 - j if flip else j
            out.append(((y0 + (i + 0.5) * p * h / view_size) / size,
                        (x0 + (col + 0.5) * p * w / view_size) / size))
    return np.array(out)


@given(st.integers(0, 10_000))
def test_coordinate_round_trip(seed):
    img = generate_scene(seed, SceneConfig())
    for v in augment_pair(img, seed, AugConfig()):
        ref = _closed_form_coords(v.crop_box, v.flip, 32, 8, 64)
        np.testing.assert_allclose(v.patch_coords, ref, atol=1e-12)


@given(st.integers(0, 10_000))
def test_jitter_preserves_labels_and_coords(seed):
    img = generate_scene(seed, SceneConfig())
    plain = AugConfig(brightness=0, contrast=0, saturation=0, hue=0)
    a = augment_pair(img, seed, AugConfig())
    b = augment_pair(img, seed, plain)
    for va, vb in zip(a, b):
        assert np.array_equal(va.patch_labels, vb.patch_labels)
        assert np.array_equal(va.patch_coords, vb.patch_coords)


@given(st.integers(0, 10_000))
def test_views_overlap(seed):
    img = generate_scene(seed, SceneConfig())
    cfg = AugConfig()
    v1, v2 = augment_pair(img, seed, cfg)
    assert crop_overlap(v1.crop_box, v2.crop_box) >= cfg.min_overlap
    assert v1.num_patches == (cfg.view_size // 8) ** 2


def test_impossible_overlap_raises():
    img = generate_scene(0, SceneConfig())
    cfg = AugConfig(crop_scale=(0.3, 0.31), min_overlap=1.0, max_retries=5)
    with pytest.raises(AugmentationError):
        augment_pair(img, 0, cfg)


def test_crop_smaller_than_patch_rejected():
    with pytest.raises(ConfigError):
        augment_pair(generate_scene(0, SceneConfig()), 0, AugConfig(crop_scale=(0.001, 0.002)))


def test_gt_pool_single_label():
    img = generate_scene(0, SceneConfig(min_objects=1, max_objects=1))
    view = make_view(img, (0.0, 0.0, 8.0, 8.0), False, AugConfig(view_size=8))
    view.patch_labels[:] = 2
    dense = np.arange(12.0).reshape(1, 12)
    labels, reps = ground_truth_object_pool(view, dense)
    assert labels.tolist() == [2]
    np.testing.assert_allclose(reps[0], dense.mean(axis=0))


def test_gt_pool_split(rng):
    img = generate_scene(0, SceneConfig())
    view = full_view(img)
    view.patch_labels = np.array([1, 1, 1, 3, 3, 3, 3, 3])
    dense = rng.normal(size=(8, 4))
    labels, reps = ground_truth_object_pool(view, dense)
    assert labels.tolist() == [1, 3]
    np.testing.assert_allclose(reps[0], dense[:3].mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(reps[1], dense[3:].mean(axis=0), atol=1e-14)


@given(st.integers(0, 10_000))
def test_gt_pool_matches_groupby(seed):
    rng = np.random.default_rng(seed)
    img = generate_scene(seed, SceneConfig())
    view = augment_pair(img, seed, AugConfig())[0]
    dense = rng.normal(size=(view.num_patches, 5))
    labels, reps = ground_truth_object_pool(view, dense)
    groups = {}
    for lab, row in zip(view.patch_labels.tolist(), dense):
        groups.setdefault(lab, []).append(row)
    assert labels.tolist() == sorted(groups)
    for lab, rep in zip(labels, reps):
        np.testing.assert_allclose(rep, np.mean(groups[int(lab)], axis=0), atol=1e-12)


def test_gt_pool_shape_mismatch():
    view = full_view(generate_scene(0, SceneConfig()))
    with pytest.raises(ValueError):
        ground_truth_object_pool(view, np.zeros((3, 4)))


def test_majority_tie_goes_to_smallest():
    labels = np.array([[2, 2], [1, 1]])
    assert patch_majority_labels(labels, 2).tolist() == [1]


def test_manifest_round_trip(tmp_path):
    scene, aug = SceneConfig(num_classes=5), AugConfig(view_size=24)
    write_manifest(tmp_path / "m.txt", scene, aug, count=10)
    s2, a2, extra = read_manifest(tmp_path / "m.txt")
    assert s2 == scene and a2 == aug and extra == {"count": "10"}


def test_png_export(tmp_path):
    rgb, lab = export_png(generate_scene(0, SceneConfig()), tmp_path / "scene")
    assert rgb.exists() and lab.exists()
