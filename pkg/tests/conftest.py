"""Shared synthetic data builders and model fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from fruitgrader import cascade, imaging, nn, pipeline
from fruitgrader.imaging import BBox, Image

RIPENESS = pipeline.RIPENESS_CLASSES
DISEASE = pipeline.DISEASE_CLASSES


def rand_image_8bit(rng: np.random.Generator, w: int, h: int, channels: int = 1) -> Image:
    """Random image with samples quantized exactly like an 8-bit decode."""
    raw = rng.integers(0, 256, size=(h, w, channels), dtype=np.uint8)
    return Image.from_array(raw.astype(np.float32) / 255.0)


def blob_image(rng: np.random.Generator, class_id: int, size: int = 64) -> Image:
    """One colored-ellipse image for the 3-class toy classification task."""
    base = rng.normal(0.5, 0.08, size=(size, size, 3))
    colors = [(0.9, 0.15, 0.1), (0.1, 0.85, 0.15), (0.15, 0.2, 0.9)]
    cx = rng.uniform(size * 0.3, size * 0.7)
    cy = rng.uniform(size * 0.3, size * 0.7)
    rx = rng.uniform(size * 0.15, size * 0.28)
    ry = rng.uniform(size * 0.15, size * 0.28)
    ys, xs = np.mgrid[0:size, 0:size]
    mask = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    color = np.array(colors[class_id]) + rng.normal(0, 0.03, size=3)
    base[mask] = color + rng.normal(0, 0.02, size=(int(mask.sum()), 3))
    return Image.from_array(base)


def blob_dataset(n_per_class: int, seed: int, size: int = 64):
    """[(Image, class_id)] with n_per_class samples of each of 3 classes."""
    rng = np.random.default_rng(seed)
    out = []
    for class_id in range(3):
        for _ in range(n_per_class):
            out.append((blob_image(rng, class_id, size), class_id))
    return out


def textured_background(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Bright, spatially correlated texture (smooth noise + faint grain)."""
    base = rng.uniform(0.65, 0.9)
    rough = np.clip(rng.normal(0.0, 1.0, size=(h, w)) * 0.1 + 0.5, 0.0, 1.0)
    smooth = imaging.gaussian_blur(Image.from_array(rough[:, :, None]), 1.4).data[:, :, 0]
    texture = (smooth - 0.5) * 2.2
    fine = rng.normal(0.0, 0.02, size=(h, w))
    ramp = np.linspace(-0.04, 0.04, w)[None, :] * rng.choice([-1.0, 1.0])
    return np.clip(base + texture + fine + ramp, 0.0, 1.0)


def add_clutter(rng: np.random.Generator, bg: np.ndarray) -> np.ndarray:
    """Dark non-elliptical shapes: rectangles, bars, and dot groups."""
    h, w = bg.shape
    for _ in range(int(rng.integers(2, 6))):
        dark = rng.uniform(0.1, 0.45)
        kind = int(rng.integers(3))
        if kind == 0:
            rw, rh = int(rng.integers(5, 19)), int(rng.integers(5, 19))
            x, y = int(rng.integers(0, w - rw + 1)), int(rng.integers(0, h - rh + 1))
            bg[y : y + rh, x : x + rw] = np.clip(dark + rng.normal(0, 0.02, (rh, rw)), 0, 1)
        elif kind == 1:
            t = int(rng.integers(2, 4))
            if rng.random() < 0.5:
                y = int(rng.integers(0, h - t + 1))
                bg[y : y + t, :] = dark
            else:
                x = int(rng.integers(0, w - t + 1))
                bg[:, x : x + t] = dark
        else:
            for _ in range(int(rng.integers(2, 6))):
                r = int(rng.integers(1, 4))
                cx, cy = int(rng.integers(r, w - r)), int(rng.integers(r, h - r))
                bg[cy - r : cy + r + 1, cx - r : cx + r + 1] = dark
    return bg


def ellipse_scene(rng: np.random.Generator, size: int = 96):
    """(Image, BBox): a dark filled ellipse over cluttered bright texture."""
    bg = add_clutter(rng, textured_background(rng, size, size))
    rx = rng.uniform(11.0, 19.0)
    ry = rx * rng.uniform(0.88, 1.14)
    cx = rng.uniform(rx + 2, size - rx - 2)
    cy = rng.uniform(ry + 2, size - ry - 2)
    ys, xs = np.mgrid[0:size, 0:size]
    mask = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    dark = rng.uniform(0.05, 0.2)
    bg[mask] = np.clip(dark + rng.normal(0, 0.03, size=int(mask.sum())), 0.0, 1.0)
    img = Image.from_array(bg[:, :, None])
    box = BBox(cx - rx, cy - ry, 2 * rx, 2 * ry)
    return img, box


def negative_scene(rng: np.random.Generator, size: int = 96) -> Image:
    return Image.from_array(add_clutter(rng, textured_background(rng, size, size))[:, :, None])


def jittered_crop(rng: np.random.Generator, img: Image, box: BBox) -> Image:
    """Loosely cropped positive: random growth and center shift, like a
    hand-labeled box or a quantized detection window."""
    grow = rng.uniform(1.0, 1.12)
    w, h = box.w * grow, box.h * grow
    cx = box.x + box.w / 2 + rng.uniform(-0.06, 0.06) * box.w
    cy = box.y + box.h / 2 + rng.uniform(-0.06, 0.06) * box.h
    x = min(max(0.0, cx - w / 2), img.width - w)
    y = min(max(0.0, cy - h / 2), img.height - h)
    return imaging.crop(img, BBox(x, y, min(w, img.width), min(h, img.height)))


def ellipse_corpus(n_pos: int, n_neg: int, seed: int, size: int = 96):
    """(positive crops, negative images, scenes) for cascade training/eval."""
    rng = np.random.default_rng(seed)
    crops = []
    scenes = []
    for _ in range(n_pos):
        img, box = ellipse_scene(rng, size)
        scenes.append((img, box))
        crops.append(jittered_crop(rng, img, box))
    negatives = [negative_scene(rng, size) for _ in range(n_neg)]
    return crops, negatives, scenes


def stub_nets(seed: int = 7):
    """Small untrained-but-deterministic ripeness and disease classifiers."""
    ripeness = nn.init_network(
        nn.build_mini_resnet((3, 16, 16), 3), seed=seed, class_names=RIPENESS
    )
    disease = nn.init_network(
        nn.build_mini_resnet((3, 16, 16), 5), seed=seed + 1, class_names=DISEASE
    )
    return ripeness, disease


@pytest.fixture(scope="session")
def small_cascade() -> cascade.CascadeModel:
    """A tiny but genuinely trained ellipse detector (2 stages, 16x16)."""
    crops, negatives, _ = ellipse_corpus(40, 12, seed=123, size=64)
    config = cascade.CascadeTrainConfig(
        false_alarm_rate=0.4,
        num_cascade_stages=2,
        object_training_size=(16, 16),
        feature_budget=400,
        seed=5,
    )
    return cascade.train_cascade(crops, negatives, config)


@pytest.fixture(scope="session")
def stub_pipeline(small_cascade) -> pipeline.PipelineModel:
    ripeness, disease = stub_nets()
    return pipeline.PipelineModel(small_cascade, ripeness, disease)


def grading_scene(rng: np.random.Generator, size: int = 96):
    """RGB scene with one dark ellipse, for end-to-end grading tests."""
    gray, box = ellipse_scene(rng, size)
    rgb = np.repeat(gray.data, 3, axis=2).copy()
    tint = rng.uniform(-0.05, 0.05, size=3)
    rgb = np.clip(rgb + tint[None, None, :], 0.0, 1.0)
    return Image.from_array(rgb), box
