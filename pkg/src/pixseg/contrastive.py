"""Pixel-segment contrastive loss with positives drawn from shared regions."""

from collections import deque
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch

from . import kernels


class LossUndefinedError(RuntimeError):
    pass


@dataclass
class ViewSegments:
    """Everything about one augmented view the pair construction needs.

    ``regions`` is the region prior warped into the view (nearest mode) and
    keeps the original image's region ids, so ids agree across views of the
    same image.
    """

    image_index: int
    regions: np.ndarray  # (H, W) int
    seg_ids: np.ndarray  # (H, W) int, contiguous
    degenerate: Optional[np.ndarray] = None  # (S,) bool

    @property
    def n_segments(self):
        return int(self.seg_ids.max()) + 1


@dataclass
class PairSets:
    anchor_view: np.ndarray  # (P,)
    anchor_pixel: np.ndarray  # (P,) flat index within the view
    positive: np.ndarray  # (P, S) bool over batch segments then bank entries
    negative: np.ndarray  # (P, S) bool
    n_excluded: int
    segment_offsets: np.ndarray  # start of each view's segments in the S axis

    def __len__(self):
        return len(self.anchor_view)


def majority_region(regions, seg_ids, n_segments=None):
    """Region id held by most pixels of each segment (ties to the lowest id)."""
    regions = np.asarray(regions, dtype=np.int64)
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    n_seg = int(seg_ids.max()) + 1 if n_segments is None else n_segments
    n_reg = int(regions.max()) + 1
    table = kernels.crosstab(seg_ids, regions, n_seg, n_reg)
    return np.argmax(table, axis=1)


def sample_anchors(views: List[ViewSegments], per_view, rng):
    """Uniform pixel subset per view, without replacement."""
    av, ap = [], []
    for vi, v in enumerate(views):
        n = v.seg_ids.size
        take = n if per_view is None or per_view >= n else per_view
        pix = np.arange(n) if take == n else np.sort(rng.choice(n, size=take, replace=False))
        av.append(np.full(take, vi, dtype=np.int64))
        ap.append(pix.astype(np.int64))
    return np.concatenate(av), np.concatenate(ap)


def build_pair_sets(views: List[ViewSegments], n_bank, anchor_view, anchor_pixel):
    """Positive and negative segment masks for every anchor pixel.

    A segment belongs to a region when most of its pixels carry that region
    id. Positives of an anchor are the segments, in any view of the same
    image, belonging to the anchor's region. Every other usable segment in the
    batch, plus all bank entries, is negative. Anchors without positives are
    dropped and counted.
    """
    seg_image, seg_region, seg_ok, offsets = [], [], [], []
    start = 0
    for v in views:
        n_seg = v.n_segments
        offsets.append(start)
        start += n_seg
        seg_image.append(np.full(n_seg, v.image_index, dtype=np.int64))
        seg_region.append(majority_region(v.regions, v.seg_ids, n_seg))
        ok = np.ones(n_seg, bool) if v.degenerate is None else ~np.asarray(v.degenerate, bool)
        seg_ok.append(ok)
    seg_image = np.concatenate(seg_image)
    seg_region = np.concatenate(seg_region)
    seg_ok = np.concatenate(seg_ok)

    a_image = np.array([views[i].image_index for i in anchor_view], dtype=np.int64)
    a_region = np.array(
        [views[i].regions.reshape(-1)[p] for i, p in zip(anchor_view, anchor_pixel)], dtype=np.int64
    )
    same_image = a_image[:, None] == seg_image[None, :]
    pos = same_image & (a_region[:, None] == seg_region[None, :]) & seg_ok[None, :]
    neg = ~pos & seg_ok[None, :]
    if n_bank:
        pos = np.concatenate([pos, np.zeros((len(pos), n_bank), bool)], axis=1)
        neg = np.concatenate([neg, np.ones((len(neg), n_bank), bool)], axis=1)
    keep = pos.any(axis=1)
    return PairSets(
        anchor_view[keep],
        anchor_pixel[keep],
        pos[keep],
        neg[keep],
        int((~keep).sum()),
        np.asarray(offsets, dtype=np.int64),
    )


def contrastive_loss(z, segments, positive, negative, kappa=10.0):
    """Mean over anchors of ``-log(sum_pos exp(k*sim) / sum_{pos+neg} exp(k*sim))``.

    ``z`` (P, d) and ``segments`` (S, d) are unit vectors; ``positive`` and
    ``negative`` are (P, S) boolean masks. Log-sum-exp keeps large ``kappa``
    finite.
    """
    positive = torch.as_tensor(positive, dtype=torch.bool, device=z.device)
    negative = torch.as_tensor(negative, dtype=torch.bool, device=z.device)
    if positive.shape[0] == 0 or not bool(positive.any(dim=1).all()):
        raise LossUndefinedError("every anchor needs at least one positive segment")
    logits = kappa * (z @ segments.T)
    neg_inf = torch.finfo(logits.dtype).min
    num = torch.logsumexp(logits.masked_fill(~positive, neg_inf), dim=1)
    den = torch.logsumexp(logits.masked_fill(~(positive | negative), neg_inf), dim=1)
    return (den - num).mean()


class MemoryBank:
    """FIFO of segment embeddings from the last ``depth`` batches, gradient-free."""

    def __init__(self, dim, depth=2):
        self.dim = dim
        self.depth = depth
        self._batches = deque(maxlen=depth)

    def push(self, segs):
        if self.depth == 0:
            return
        self._batches.append(torch.as_tensor(segs).detach().clone())

    def snapshot(self, dtype=torch.float32):
        if not self._batches:
            return torch.empty(0, self.dim, dtype=dtype)
        return torch.cat(list(self._batches), dim=0).to(dtype).clone()

    def __len__(self):
        return sum(b.shape[0] for b in self._batches)

    def state_dict(self):
        return {"dim": self.dim, "depth": self.depth, "batches": [b.clone() for b in self._batches]}

    def load_state_dict(self, state):
        self.dim = state["dim"]
        self.depth = state["depth"]
        self._batches = deque((b.clone() for b in state["batches"]), maxlen=self.depth)
