"""Seeded synthetic corpora: coloured shapes on textured backgrounds, and a tracking clip."""

from pathlib import Path

import numpy as np
from PIL import Image

from .vlm import PaletteEntry, make_palette_vectors, save_palette

DEFAULT_CLASSES = (
    ("red", (0.85, 0.15, 0.15)),
    ("green", (0.15, 0.70, 0.20)),
    ("blue", (0.15, 0.25, 0.85)),
    ("yellow", (0.90, 0.85, 0.15)),
)


def _shape_mask(kind, h, w, cy, cx, size, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    if kind == "rect":
        sy = size * rng.uniform(0.6, 1.2)
        sx = size * rng.uniform(0.6, 1.2)
        return (np.abs(yy - cy) <= sy) & (np.abs(xx - cx) <= sx)
    # triangle pointing up
    top = cy - size
    rel = (yy - top) / (2 * size)
    return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * size)


def render_scene(rng, size=32, classes=DEFAULT_CLASSES, n_shapes=(2, 3), texture=0.03):
    """One image and its per-pixel class map.

    The background takes one class, then each shape another class distinct
    from the background. Texture is mild per-pixel noise plus a shading ramp.
    """
    h = w = size
    n_cls = len(classes)
    colors = np.array([c for _, c in classes])
    bg = int(rng.integers(n_cls))
    gt = np.full((h, w), bg, dtype=np.int64)
    for _ in range(rng.integers(n_shapes[0], n_shapes[1] + 1)):
        cls = int(rng.choice([c for c in range(n_cls) if c != bg]))
        kind = rng.choice(["circle", "rect", "triangle"])
        r = rng.uniform(size * 0.15, size * 0.3)
        cy, cx = rng.uniform(r * 0.5, size - r * 0.5, size=2)
        gt[_shape_mask(kind, h, w, cy, cx, r, rng)] = cls
    img = colors[gt]
    ramp = np.linspace(-1, 1, w)[None, :, None] * rng.uniform(-0.04, 0.04)
    img = img + ramp + rng.normal(0, texture, img.shape)
    return np.clip(img, 0, 1), gt


def save_image(path, img):
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def load_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_label_map(path):
    with Image.open(path) as im:
        return np.array(im).astype(np.int64)


def generate_corpus(out_dir, n_train=48, n_eval=16, size=32, seed=0, dim=16, classes=DEFAULT_CLASSES):
    """Write train/eval images, ground truth and a stub palette under ``out_dir``."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    for split, n in (("train", n_train), ("eval", n_eval)):
        (out / split / "images").mkdir(parents=True, exist_ok=True)
        (out / split / "gt").mkdir(parents=True, exist_ok=True)
        for i in range(n):
            img, gt = render_scene(rng, size=size, classes=classes)
            save_image(out / split / "images" / f"{i:04d}.png", img)
            Image.fromarray(gt.astype(np.uint8)).save(out / split / "gt" / f"{i:04d}.png")
    vectors = make_palette_vectors(len(classes), dim, seed=seed)
    entries = [PaletteEntry(name, color, vectors[i]) for i, (name, color) in enumerate(classes)]
    save_palette(out / "palette.json", entries)
    (out / "classes.txt").write_text("\n".join(n for n, _ in classes) + "\n", encoding="utf-8")
    return out


def translating_square_video(n_frames=10, size=48, square=14, step=2, seed=0,
                             fg=(0.85, 0.15, 0.15), bg=(0.15, 0.25, 0.85), texture=0.02):
    """Frames of a square moving right by ``step`` px per frame, with masks."""
    rng = np.random.default_rng(seed)
    frames, masks = [], []
    top = (size - square) // 2
    for t in range(n_frames):
        left = 2 + t * step
        mask = np.zeros((size, size), dtype=np.int64)
        mask[top : top + square, left : left + square] = 1
        img = np.where(mask[..., None] == 1, np.array(fg), np.array(bg))
        img = np.clip(img + rng.normal(0, texture, img.shape), 0, 1)
        frames.append(img)
        masks.append(mask)
    return frames, masks
