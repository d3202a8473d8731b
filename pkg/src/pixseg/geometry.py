"""Augmented views with exact pixel correspondences to the original image.

Dense maps computed once on the original image (encoder features, region
priors) are carried into a view by sampling them at the view's source
coordinates, so geometry and photometry are kept strictly apart: only the
view image sees colour jitter or blur.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter


class AugmentationError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges for view sampling. ``scale`` is the crop-area fraction."""

    scale: Tuple[float, float] = (0.4, 1.0)
    ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    out_size: Optional[Tuple[int, int]] = None
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    jitter_prob: float = 0.8
    blur_prob: float = 0.5
    blur_sigma: Tuple[float, float] = (0.1, 1.0)

    def validate(self):
        for name in ("scale", "ratio", "blur_sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise AugmentationError(f"{name}: min {lo} > max {hi}")
        if not (0 < self.scale[0] <= 1 and 0 < self.scale[1] <= 1):
            raise AugmentationError(f"scale must lie in (0, 1], got {self.scale}")
        if self.ratio[0] <= 0:
            raise AugmentationError("ratio must be positive")
        for name in ("flip_prob", "jitter_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise AugmentationError(f"{name} must be a probability, got {p}")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise AugmentationError(f"{name} must be >= 0")
        if not 0 <= self.hue <= 0.5:
            raise AugmentationError("hue must lie in [0, 0.5]")
        if self.out_size is not None and min(self.out_size) <= 0:
            raise AugmentationError("out_size must be positive")


@dataclass(frozen=True)
class Photometric:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    blur_sigma: float = 0.0

    @property
    def is_identity(self):
        return self == Photometric()


@dataclass(frozen=True)
class ViewTransform:
    crop_rect: Tuple[int, int, int, int]  # top, left, height, width
    flip_h: bool
    out_size: Tuple[int, int]
    photometric: Photometric = field(default_factory=Photometric)

    def geometric(self):
        """Same transform with the photometric part stripped."""
        return ViewTransform(self.crop_rect, self.flip_h, self.out_size)


@dataclass
class ViewCorrespondence:
    src_coords: np.ndarray  # (H, W, 2) real (row, col) in the original image
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.valid.shape


def sample_transform(rng_seed, aug_config, image_size):
    """Draw a view transform for an image of ``image_size = (H0, W0)``."""
    aug_config.validate()
    h0, w0 = image_size
    if h0 <= 0 or w0 <= 0:
        raise AugmentationError("image size must be positive")
    rng = np.random.default_rng(rng_seed)
    area = h0 * w0
    scale = rng.uniform(*aug_config.scale)
    log_r = rng.uniform(np.log(aug_config.ratio[0]), np.log(aug_config.ratio[1]))
    # keep the aspect ratio inside the range where a crop of this area fits
    ratio = float(np.clip(np.exp(log_r), scale * w0 / h0, w0 / (scale * h0)))
    h = int(round(np.sqrt(scale * area / ratio)))
    w = int(round(np.sqrt(scale * area * ratio)))
    h = min(max(h, 1), h0)
    w = min(max(w, 1), w0)
    top = int(rng.integers(0, h0 - h + 1))
    left = int(rng.integers(0, w0 - w + 1))
    flip = bool(rng.random() < aug_config.flip_prob)
    out = tuple(aug_config.out_size) if aug_config.out_size is not None else (h0, w0)

    photo = Photometric()
    if rng.random() < aug_config.jitter_prob:
        photo = Photometric(
            brightness=float(rng.uniform(1 - aug_config.brightness, 1 + aug_config.brightness)),
            contrast=float(rng.uniform(1 - aug_config.contrast, 1 + aug_config.contrast)),
            saturation=float(rng.uniform(1 - aug_config.saturation, 1 + aug_config.saturation)),
            hue=float(rng.uniform(-aug_config.hue, aug_config.hue)),
        )
    if rng.random() < aug_config.blur_prob:
        sigma = float(rng.uniform(*aug_config.blur_sigma))
        photo = Photometric(photo.brightness, photo.contrast, photo.saturation, photo.hue, sigma)
    return ViewTransform((top, left, h, w), flip, out, photo)


def identity_transform(image_size):
    h0, w0 = image_size
    return ViewTransform((0, 0, h0, w0), False, (h0, w0))


def view_to_source(t, rows, cols):
    """Map view pixel centres to real-valued original-image coordinates."""
    top, left, h, w = t.crop_rect
    out_h, out_w = t.out_size
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if t.flip_h:
        cols = (out_w - 1) - cols
    src_r = top + (rows + 0.5) * (h / out_h) - 0.5
    src_c = left + (cols + 0.5) * (w / out_w) - 0.5
    return src_r, src_c


def source_to_view(t, src_r, src_c):
    """Inverse of :func:`view_to_source`."""
    top, left, h, w = t.crop_rect
    out_h, out_w = t.out_size
    rows = (np.asarray(src_r, dtype=np.float64) - top + 0.5) * (out_h / h) - 0.5
    cols = (np.asarray(src_c, dtype=np.float64) - left + 0.5) * (out_w / w) - 0.5
    if t.flip_h:
        cols = (out_w - 1) - cols
    return rows, cols


def correspondence(t, image_size):
    h0, w0 = image_size
    out_h, out_w = t.out_size
    rows, cols = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    src_r, src_c = view_to_source(t, rows, cols)
    # centres of edge pixels can land half a pixel outside after scaling
    src_r = np.clip(src_r, 0, h0 - 1)
    src_c = np.clip(src_c, 0, w0 - 1)
    coords = np.stack([src_r, src_c], axis=-1)
    return ViewCorrespondence(coords, np.ones((out_h, out_w), dtype=bool))


def warp_dense_map(dense, corr, mode="bilinear"):
    """Sample an ``(H0, W0[, c])`` map at the correspondence's source coordinates.

    ``nearest`` keeps the input dtype and is the only mode allowed for label maps.
    Invalid view pixels are zero-filled (``-1`` for integer maps).
    """
    dense = np.asarray(dense)
    squeeze = dense.ndim == 2
    if squeeze:
        dense = dense[..., None]
    if dense.ndim != 3:
        raise ValueError(f"expected an (H, W) or (H, W, c) map, got shape {dense.shape}")
    h0, w0 = dense.shape[:2]
    r = corr.src_coords[..., 0]
    c = corr.src_coords[..., 1]
    if r.size and (r.max() > h0 - 1 + 1e-9 or c.max() > w0 - 1 + 1e-9):
        raise ValueError("correspondence exceeds the map extent")

    if mode == "nearest":
        ri = np.clip(np.floor(r + 0.5).astype(np.int64), 0, h0 - 1)
        ci = np.clip(np.floor(c + 0.5).astype(np.int64), 0, w0 - 1)
        out = dense[ri, ci]
    elif mode == "bilinear":
        r0 = np.clip(np.floor(r).astype(np.int64), 0, h0 - 1)
        c0 = np.clip(np.floor(c).astype(np.int64), 0, w0 - 1)
        r1 = np.minimum(r0 + 1, h0 - 1)
        c1 = np.minimum(c0 + 1, w0 - 1)
        fr = (r - r0)[..., None]
        fc = (c - c0)[..., None]
        src = dense.astype(np.float64)
        top = src[r0, c0] * (1 - fc) + src[r0, c1] * fc
        bot = src[r1, c0] * (1 - fc) + src[r1, c1] * fc
        out = top * (1 - fr) + bot * fr
    else:
        raise ValueError(f"unknown warp mode {mode!r}")

    if not corr.valid.all():
        fill = -1 if np.issubdtype(out.dtype, np.integer) else 0
        out = out.copy()
        out[~corr.valid] = fill
    return out[..., 0] if squeeze else out


def _grayscale(img):
    return img @ np.array([0.299, 0.587, 0.114])


def _rotate_hue(img, shift):
    # rotation about the grey axis in YIQ space; shift is a fraction of a turn
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    theta = 2 * np.pi * shift
    cos, sin = np.cos(theta), np.sin(theta)
    rot = np.array([[1, 0, 0], [0, cos, -sin], [0, sin, cos]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return img @ m.T


def apply_photometric(img, p):
    """Colour jitter then blur on a float image in [0, 1]."""
    out = img.astype(np.float64)
    if p.brightness != 1.0:
        out = out * p.brightness
    if p.contrast != 1.0:
        mean = _grayscale(out).mean()
        out = (out - mean) * p.contrast + mean
    if p.saturation != 1.0:
        gray = _grayscale(out)[..., None]
        out = (out - gray) * p.saturation + gray
    if p.hue != 0.0:
        out = _rotate_hue(out, p.hue)
    out = np.clip(out, 0.0, 1.0)
    if p.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(p.blur_sigma, p.blur_sigma, 0), mode="nearest")
    return out


def apply_to_image(image, t):
    """Render the view of ``image`` (``H0 x W0 x 3`` floats in [0, 1])."""
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    corr = correspondence(t, image.shape[:2])
    view = warp_dense_map(image, corr, mode="bilinear")
    if not t.photometric.is_identity:
        view = apply_photometric(view, t.photometric)
    return view, corr
