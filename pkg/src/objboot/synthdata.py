"""Synthetic scenes with per-pixel labels and augmented view pairs with tracked patch geometry."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import AugConfig, ConfigError, SceneConfig, apply_overrides, parse_kv_text, to_kv_text


class AugmentationError(RuntimeError):
    """Raised when no crop pair with the required overlap is found."""


@dataclass(frozen=True)
class Shape:
    kind: str  # rect | disk | triangle
    class_id: int
    params: tuple[float, ...]  # rect: y0,x0,y1,x1; disk: cy,cx,r; triangle: y0,x0,y1,x1,y2,x2


@dataclass
class SceneImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    labels: np.ndarray  # (H, W) int
    image_id: int
    shapes: list[Shape] = field(default_factory=list)
    patch_size: int = 8


@dataclass
class AugmentedView:
    pixels: np.ndarray  # (Hv, Wv, 3)
    patch_labels: np.ndarray  # (N,)
    patch_coords: np.ndarray  # (N, 2) as (y, x), normalised by source size
    crop_box: tuple[float, float, float, float]  # y0, x0, h, w in source pixels
    flip: bool
    patch_size: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.pixels.shape[0] // self.patch_size, self.pixels.shape[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class ViewPairBatch:
    items: list[tuple[int, AugmentedView, AugmentedView]]

    @property
    def batch_size(self) -> int:
        return len(self.items)


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def class_palette(cfg: SceneConfig) -> np.ndarray:
    """Mean RGB colour per foreground class (row 0 unused: background colour is drawn per scene)."""
    rng = np.random.default_rng(cfg.palette_seed)
    n_fg = cfg.num_classes - 1
    hues = (np.arange(n_fg) + rng.uniform(0, 1)) / max(n_fg, 1)
    palette = np.zeros((cfg.num_classes, 3))
    for c, hue in enumerate(hues, start=1):
        palette[c] = _hsv_to_rgb(hue % 1.0, 0.75, 0.85)
    return palette


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def class_texture(cls: int, yy: np.ndarray, xx: np.ndarray, period: float, phase) -> np.ndarray:
    """Zero-mean texture in [-1, 1] identifying a foreground class.

    Every pattern is symmetric under horizontal flips, so flipping never turns
    one class into another.
    """
    w = 2 * np.pi / period
    if cls == 1:
        return np.sin(w * yy + phase[0])
    if cls == 2:
        return np.sin(w * xx + phase[0])
    if cls == 3:
        return np.sign(np.sin(w * yy + phase[0]) * np.sin(w * xx + phase[1]))
    if cls == 4:
        d = w / np.sqrt(2)
        return np.sign(np.sin(d * (xx + yy) + phase[0]) * np.sin(d * (xx - yy) + phase[1]))
    raise ValueError(f"no texture for class {cls}")


def shape_mask(shape: Shape, height: int, width: int) -> np.ndarray:
    """Pixels whose centre lies inside the shape (boundary inclusive)."""
    yy, xx = np.mgrid[0:height, 0:width] + 0.5
    p = shape.params
    if shape.kind == "rect":
        return (yy >= p[0]) & (yy <= p[2]) & (xx >= p[1]) & (xx <= p[3])
    if shape.kind == "disk":
        return (yy - p[0]) ** 2 + (xx - p[1]) ** 2 <= p[2] ** 2
    if shape.kind == "triangle":
        (ay, ax), (by, bx), (cy, cx) = p[0:2], p[2:4], p[4:6]
        d1 = (xx - bx) * (ay - by) - (ax - bx) * (yy - by)
        d2 = (xx - cx) * (by - cy) - (bx - cx) * (yy - cy)
        d3 = (xx - ax) * (cy - ay) - (cx - ax) * (yy - ay)
        has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(has_neg & has_pos)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def generate_scene(seed: int, config: SceneConfig, image_id: int | None = None) -> SceneImage:
    config.validate()
    rng = np.random.default_rng(seed)
    size = config.image_size
    palette = class_palette(config)

    base = rng.uniform(0.15, 0.85, size=3)
    background = base.mean() + config.background_chroma * (base - base.mean())
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    # background is untextured apart from a slow shading ramp
    slope = rng.normal(0, 0.1 / size, size=2)
    pixels = background + (slope[0] * (yy - size / 2) + slope[1] * (xx - size / 2))[..., None]
    labels = np.zeros((size, size), dtype=np.int64)

    shapes: list[Shape] = []
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    for _ in range(n_obj):
        cls = int(rng.integers(1, config.num_classes))
        kind = ("rect", "disk", "triangle")[int(rng.integers(0, 3))]
        extent = rng.uniform(config.min_object_size, config.max_object_size) * size
        cy, cx = rng.uniform(0, size, size=2)
        if kind == "rect":
            aspect = rng.uniform(0.6, 1.6)
            h, w = extent * aspect ** 0.5, extent / aspect ** 0.5
            params = (cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2)
        elif kind == "disk":
            params = (cy, cx, extent / 2)
        else:
            angles = rng.uniform(0, 2 * np.pi) + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, size=3)
            radius = extent * 0.65
            params = tuple(float(v) for a in angles for v in (cy + radius * np.sin(a), cx + radius * np.cos(a)))
        shape = Shape(kind, cls, tuple(float(v) for v in params))
        mask = shape_mask(shape, size, size)
        color = np.clip(palette[cls] + rng.normal(0, config.class_color_spread, size=3), 0.15, 0.85)
        period = rng.uniform(*config.texture_period)
        pattern = class_texture(cls, yy, xx, period, rng.uniform(0, 2 * np.pi, size=2))
        pixels[mask] = color + config.texture_amplitude * pattern[mask][:, None]
        labels[mask] = cls
        shapes.append(shape)

    gain = rng.uniform(*config.illumination_gain)
    offset = rng.uniform(*config.illumination_offset)
    pixels = gain * pixels + offset
    pixels += rng.normal(0, config.pixel_noise, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)
    return SceneImage(pixels=pixels, labels=labels, image_id=seed if image_id is None else image_id,
                      shapes=shapes, patch_size=config.patch_size)


def make_scenes(count: int, seed: int, config: SceneConfig, id_offset: int = 0) -> list[SceneImage]:
    return [generate_scene(derive_seed(seed, i), config, image_id=id_offset + i) for i in range(count)]


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, 3) -> (N, P*P*3), patches in row-major grid order."""
    h, w, c = pixels.shape
    p = patch_size
    x = pixels.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape((h // p) * (w // p), p * p * c)


def patch_majority_labels(labels: np.ndarray, patch_size: int, num_classes: int | None = None) -> np.ndarray:
    """Majority label per patch; ties go to the smallest class id."""
    h, w = labels.shape
    p = patch_size
    blocks = labels.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(-1, p * p)
    n_cls = int(labels.max()) + 1 if num_classes is None else num_classes
    counts = np.zeros((blocks.shape[0], n_cls), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(blocks.shape[0]), p * p), blocks.ravel()), 1)
    return counts.argmax(axis=1)


def patch_centers(crop_box, flip: bool, view_size: int, patch_size: int, image_size: int) -> np.ndarray:
    y0, x0, h, w = crop_box
    g = view_size // patch_size
    centers = (np.arange(g) + 0.5) * patch_size
    v, u = np.meshgrid(centers, centers, indexing="ij")
    if flip:
        u = view_size - u
    ys = (y0 + v * h / view_size) / image_size
    xs = (x0 + u * w / view_size) / image_size
    return np.stack([ys.ravel(), xs.ravel()], axis=1)


def render_view(img: SceneImage, crop_box, flip: bool, view_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear pixel resampling and nearest label resampling of a crop."""
    y0, x0, h, w = crop_box
    size_h, size_w = img.labels.shape
    c = np.arange(view_size) + 0.5
    u = view_size - c if flip else c
    ys = y0 + c * h / view_size
    xs = x0 + u * w / view_size
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pixels = np.stack([
        ndimage.map_coordinates(img.pixels[..., ch], [gy - 0.5, gx - 0.5], order=1, mode="nearest")
        for ch in range(3)
    ], axis=-1)
    ly = np.clip(np.floor(gy).astype(np.int64), 0, size_h - 1)
    lx = np.clip(np.floor(gx).astype(np.int64), 0, size_w - 1)
    return pixels, img.labels[ly, lx]


def _sample_crop(rng: np.random.Generator, cfg: AugConfig, size: int):
    area = rng.uniform(*cfg.crop_scale) * size * size
    ratio = np.exp(rng.uniform(np.log(cfg.aspect_ratio[0]), np.log(cfg.aspect_ratio[1])))
    h = min(float(np.sqrt(area / ratio)), float(size))
    w = min(float(np.sqrt(area * ratio)), float(size))
    y0 = float(rng.uniform(0, size - h)) if h < size else 0.0
    x0 = float(rng.uniform(0, size - w)) if w < size else 0.0
    return (y0, x0, h, w)


def crop_overlap(a, b) -> float:
    """Intersection area over the smaller crop area."""
    iy = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    ix = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    return iy * ix / min(a[2] * a[3], b[2] * b[3])


def photometric_jitter(pixels: np.ndarray, rng: np.random.Generator, cfg: AugConfig) -> np.ndarray:
    out = pixels + rng.uniform(-cfg.brightness, cfg.brightness) if cfg.brightness else pixels.copy()
    if cfg.contrast:
        factor = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
        out = (out - out.mean()) * factor + out.mean()
    if cfg.saturation:
        factor = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        gray = out.mean(axis=-1, keepdims=True)
        out = gray + (out - gray) * factor
    if cfg.hue:
        out = out @ hue_rotation(rng.uniform(-cfg.hue, cfg.hue) * 2 * np.pi).T
    return np.clip(out, 0.0, 1.0)


def hue_rotation(angle: float) -> np.ndarray:
    """Rotation of RGB space about the grey axis (Rodrigues' formula)."""
    k = np.ones((3, 3)) / 3.0
    cross = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]]) / np.sqrt(3.0)
    return np.cos(angle) * np.eye(3) + np.sin(angle) * cross + (1 - np.cos(angle)) * k


def make_view(img: SceneImage, crop_box, flip: bool, cfg: AugConfig, rng: np.random.Generator | None = None,
              num_classes: int | None = None) -> AugmentedView:
    pixels, labels = render_view(img, crop_box, flip, cfg.view_size)
    if rng is not None:
        pixels = photometric_jitter(pixels, rng, cfg)
    p = img.patch_size
    return AugmentedView(
        pixels=pixels,
        patch_labels=patch_majority_labels(labels, p, num_classes),
        patch_coords=patch_centers(crop_box, flip, cfg.view_size, p, img.labels.shape[0]),
        crop_box=tuple(float(v) for v in crop_box),
        flip=bool(flip),
        patch_size=p,
    )


def augment_pair(img: SceneImage, seed: int, config: AugConfig) -> tuple[AugmentedView, AugmentedView]:
    size = img.labels.shape[0]
    config.validate(img.patch_size, size)
    rng = np.random.default_rng(seed)
    for _ in range(config.max_retries):
        box1, box2 = _sample_crop(rng, config, size), _sample_crop(rng, config, size)
        if crop_overlap(box1, box2) >= config.min_overlap:
            break
    else:
        raise AugmentationError(f"no crop pair with overlap >= {config.min_overlap} after {config.max_retries} tries")
    flips = rng.uniform(size=2) < config.flip_prob
    n_cls = int(img.labels.max()) + 1
    v1 = make_view(img, box1, bool(flips[0]), config, rng, n_cls)
    v2 = make_view(img, box2, bool(flips[1]), config, rng, n_cls)
    return v1, v2


def full_view(img: SceneImage) -> AugmentedView:
    """Un-augmented native-resolution view, used for evaluation."""
    size = img.labels.shape[0]
    return AugmentedView(
        pixels=img.pixels,
        patch_labels=patch_majority_labels(img.labels, img.patch_size),
        patch_coords=patch_centers((0.0, 0.0, float(size), float(size)), False, size, img.patch_size, size),
        crop_box=(0.0, 0.0, float(size), float(size)),
        flip=False,
        patch_size=img.patch_size,
    )


def ground_truth_object_pool(view: AugmentedView, dense: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean token per ground-truth label present in the view.

    Returns ``(labels, reps)`` with labels sorted ascending and ``reps[i]`` the
    mean of the rows of ``dense`` whose patch label is ``labels[i]``.
    """
    dense = np.asarray(dense)
    if dense.shape[0] != view.patch_labels.shape[0]:
        raise ValueError(f"dense has {dense.shape[0]} rows, view has {view.patch_labels.shape[0]} patches")
    present = np.unique(view.patch_labels)
    onehot = (view.patch_labels[:, None] == present[None, :]).astype(dense.dtype)
    reps = (onehot / onehot.sum(axis=0)).T @ dense
    return present, reps


@dataclass
class _Manifest:
    scene: SceneConfig
    aug: AugConfig


def write_manifest(path: str | Path, scene: SceneConfig, aug: AugConfig, **extra) -> None:
    text = "".join(f"scene.{line}\n" for line in to_kv_text(scene).splitlines())
    text += "".join(f"aug.{line}\n" for line in to_kv_text(aug).splitlines())
    text += "".join(f"{k}={v}\n" for k, v in sorted(extra.items()))
    Path(path).write_text(text)


def read_manifest(path: str | Path) -> tuple[SceneConfig, AugConfig, dict[str, str]]:
    items = parse_kv_text(Path(path).read_text())
    known = {k: v for k, v in items.items() if k.startswith(("scene.", "aug."))}
    extra = {k: v for k, v in items.items() if k not in known}

    holder = apply_overrides(_Manifest(SceneConfig(), AugConfig()), known)
    holder.scene.validate()
    holder.aug.validate(holder.scene.patch_size, holder.scene.image_size)
    return holder.scene, holder.aug, extra


def export_png(img: SceneImage, prefix: str | Path) -> tuple[Path, Path]:
    """Write ``<prefix>_rgb.png`` and a false-colour ``<prefix>_labels.png``."""
    from PIL import Image

    prefix = Path(prefix)
    rgb_path = prefix.with_name(prefix.name + "_rgb.png")
    lab_path = prefix.with_name(prefix.name + "_labels.png")
    Image.fromarray((img.pixels * 255).round().astype(np.uint8)).save(rgb_path)
    n = int(img.labels.max()) + 1
    lut = (np.array([_hsv_to_rgb(i / max(n, 1), 0.8, 0.9) for i in range(n)]) * 255).astype(np.uint8)
    lut[0] = 0
    Image.fromarray(lut[img.labels]).save(lab_path)
    return rgb_path, lab_path


__all__ = [
    "AugmentationError", "AugmentedView", "ConfigError", "SceneImage", "Shape", "ViewPairBatch",
    "augment_pair", "class_palette", "class_texture", "hue_rotation", "crop_overlap", "derive_seed", "export_png", "full_view",
    "generate_scene", "ground_truth_object_pool", "make_scenes", "make_view", "patch_centers",
    "patch_majority_labels", "patchify", "read_manifest", "render_view", "shape_mask", "write_manifest",
]
