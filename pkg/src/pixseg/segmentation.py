"""Pixel embeddings, segment pooling, spherical k-means and region priors."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import kernels


class NumericError(FloatingPointError):
    pass


class ConfigurationError(ValueError):
    pass


class IngestionError(IOError):
    pass


@dataclass
class PixelEmbeddingMap:
    values: np.ndarray  # (H, W, d), unit rows except flagged zeros
    zero: np.ndarray  # (H, W) bool, vectors whose norm fell under eps

    @property
    def d(self):
        return self.values.shape[-1]

    @property
    def shape(self):
        return self.values.shape[:2]


@dataclass
class SegmentSet:
    ids: np.ndarray  # (H, W) int64, contiguous 0..S-1
    embeddings: np.ndarray  # (S, d)
    counts: np.ndarray  # (S,)
    degenerate: np.ndarray  # (S,) bool, mean norm under eps -> zero vector

    def __len__(self):
        return len(self.counts)


@dataclass
class RegionPrior:
    ids: np.ndarray  # (H, W) int64, contiguous from 0
    source: str  # "slic" or "file"

    @property
    def n_regions(self):
        return int(self.ids.max()) + 1 if self.ids.size else 0


def normalize_embeddings(raw, eps=1e-12):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] < 2:
        raise ValueError("embedding dimension must be at least 2")
    if not np.all(np.isfinite(raw)):
        raise NumericError("non-finite values in raw embeddings")
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    values = raw / np.maximum(norm, eps)
    return PixelEmbeddingMap(values, norm[..., 0] < eps)


def relabel_contiguous(ids):
    """Map arbitrary integer ids onto ``0..n-1`` preserving their sorted order."""
    ids = np.asarray(ids)
    _, inverse = np.unique(ids, return_inverse=True)
    return inverse.reshape(ids.shape).astype(np.int64)


def pool_segments(emb, ids, eps=1e-8):
    """Renormalised mean embedding for every segment in ``ids``."""
    values = emb.values if isinstance(emb, PixelEmbeddingMap) else np.asarray(emb, np.float64)
    ids = np.asarray(ids)
    if ids.shape != values.shape[:2]:
        raise ValueError(f"segment map {ids.shape} does not match embeddings {values.shape[:2]}")
    ids = relabel_contiguous(ids)
    n_seg = int(ids.max()) + 1
    sums, counts = kernels.segment_sums(ids, values.reshape(-1, values.shape[-1]), n_seg)
    means = sums / counts[:, None]
    norm = np.linalg.norm(means, axis=1)
    degenerate = norm < eps
    out = np.where(degenerate[:, None], 0.0, means / np.maximum(norm, eps)[:, None])
    return SegmentSet(ids, out, counts, degenerate)


def pool_segments_torch(z, ids, n_segments, eps=1e-8):
    """Differentiable pooling of an ``(N, d)`` tensor by integer ``ids`` (N,).

    Returns the renormalised means ``(n_segments, d)`` and a degenerate mask.
    """
    ids_t = torch.as_tensor(ids, dtype=torch.long, device=z.device).reshape(-1)
    sums = torch.zeros(n_segments, z.shape[-1], dtype=z.dtype, device=z.device)
    sums = sums.index_add(0, ids_t, z.reshape(-1, z.shape[-1]))
    counts = torch.bincount(ids_t, minlength=n_segments).to(z.dtype)
    means = sums / counts.clamp_min(1)[:, None]
    norm = means.norm(dim=1)
    degenerate = (norm < eps) | (counts == 0)
    out = means / norm.clamp_min(eps)[:, None]
    out = torch.where(degenerate[:, None], torch.zeros_like(out), out)
    return out, degenerate


def spherical_kmeans(x, k, iters=10, seed=0, return_history=False):
    """Cluster unit rows of ``x`` by cosine similarity.

    k-means++ seeding on cosine distance, at most ``iters`` Lloyd updates,
    empty clusters reseeded to the point farthest from its centroid.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise ConfigurationError(f"k={k} exceeds the number of points {n}")
    if k < 1:
        raise ConfigurationError("k must be positive")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    seeds = kernels.kmeanspp_seed(x, k, first, rng.random(k - 1))
    centroids = x[seeds].copy()
    labels, best = kernels.cosine_assign(x, centroids)
    history = [float(best.sum())]
    for _ in range(iters):
        sums, counts = kernels.segment_sums(labels, x, k)
        norm = np.linalg.norm(sums, axis=1)
        live = (counts > 0) & (norm > 1e-12)
        centroids = np.where(live[:, None], sums / np.maximum(norm, 1e-12)[:, None], centroids)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            order = np.argsort(best, kind="stable")  # farthest first
            for slot, idx in zip(empty, order):
                centroids[slot] = x[idx]
        new_labels, best = kernels.cosine_assign(x, centroids)
        history.append(float(best.sum()))
        converged = np.array_equal(new_labels, labels) and not empty.size
        labels = new_labels
        if converged:
            break
    if return_history:
        return labels, centroids, history
    return labels, centroids


def cluster_to_segments(emb, k=36, iters=10, seed=0):
    values = emb.values if isinstance(emb, PixelEmbeddingMap) else np.asarray(emb, np.float64)
    h, w, d = values.shape
    if k > h * w:
        raise ConfigurationError(f"k={k} exceeds the pixel count {h * w}")
    labels, _ = spherical_kmeans(values.reshape(-1, d), k, iters=iters, seed=seed)
    return labels.reshape(h, w)


def clustering_objective(x, labels):
    """Best achievable sum of cosines for a fixed assignment."""
    x = np.asarray(x, dtype=np.float64)
    n_seg = int(labels.max()) + 1
    sums, _ = kernels.segment_sums(labels, x, n_seg)
    return float(np.linalg.norm(sums, axis=1).sum())


def _split_components(ids):
    """Relabel so that every region is a single 4-connected component."""
    out = np.zeros_like(ids)
    nxt = 0
    for r in np.unique(ids):
        comp, n = ndimage.label(ids == r)
        mask = comp > 0
        out[mask] = comp[mask] - 1 + nxt
        nxt += n
    return relabel_contiguous(out)


def slic_prior(image, n_regions=36, compactness=10.0, sigma=0.0):
    from skimage.segmentation import slic

    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("empty image")
    ids = slic(
        image,
        n_segments=n_regions,
        compactness=compactness,
        sigma=sigma,
        start_label=0,
        channel_axis=-1 if image.ndim == 3 else None,
        enforce_connectivity=True,
    )
    return RegionPrior(_split_components(ids.astype(np.int64)), "slic")


def load_region_prior(path):
    path = Path(path)
    try:
        if path.suffix == ".npy":
            ids = np.load(path, allow_pickle=False)
        else:
            from PIL import Image

            with Image.open(path) as im:
                ids = np.array(im)
    except Exception as exc:  # noqa: BLE001 - any reader failure is an ingestion failure
        raise IngestionError(f"cannot read region prior {path}: {exc}") from exc
    if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
        raise IngestionError(f"{path}: expected a single-channel integer label map, got {ids.dtype}{ids.shape}")
    if ids.size == 0 or ids.min() < 0:
        raise IngestionError(f"{path}: empty map or negative ids")
    return RegionPrior(relabel_contiguous(ids), "file")


def save_region_prior(path, ids):
    path = Path(path)
    ids = np.asarray(ids)
    if path.suffix == ".npy":
        np.save(path, ids.astype(np.int32))
        return
    from PIL import Image

    if ids.max() > 65535:
        raise ValueError("too many regions for a 16-bit label image; use .npy")
    Image.fromarray(ids.astype(np.uint16)).save(path)


def generate_region_prior(image=None, method="slic", n_regions=36, compactness=10.0, path=None):
    if method == "slic":
        return slic_prior(image, n_regions=n_regions, compactness=compactness)
    if method == "file":
        return load_region_prior(path)
    raise ConfigurationError(f"unknown region prior method {method!r}")
