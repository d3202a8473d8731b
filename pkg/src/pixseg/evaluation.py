"""Inference modes and segmentation metrics."""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy import ndimage

from . import kernels
from .segmentation import ConfigurationError
from .vlm import encode_classes

log = logging.getLogger(__name__)

IGNORE_INDEX = 255


class UndefinedMetricError(ValueError):
    pass


class DegenerateProbeError(ValueError):
    pass


# -- inference ---------------------------------------------------------------


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def langseg_from_text(emb, text_emb):
    """Per-pixel argmax cosine similarity to class text embeddings."""
    values = emb.values if hasattr(emb, "values") else np.asarray(emb, np.float64)
    h, w, d = values.shape
    labels, _ = kernels.cosine_assign(_unit(values.reshape(-1, d)), _unit(text_emb))
    return labels.reshape(h, w)


def langseg_predict(emb, class_names, text_enc, ensemble):
    if not class_names:
        raise ConfigurationError("language-driven segmentation needs at least one class")
    return langseg_from_text(emb, encode_classes(class_names, ensemble, text_enc))


def knn_classify_segments(queries, train_feats, train_labels, k=20):
    """Cosine k-NN with majority vote, ties to the smallest class index."""
    train_feats = np.asarray(train_feats, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_feats) == 0:
        raise ConfigurationError("k-NN needs a non-empty training set")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if k > len(train_feats):
        warnings.warn(f"k={k} exceeds the training set size {len(train_feats)}; clamping", stacklevel=2)
        k = len(train_feats)
    sims = _unit(queries) @ _unit(train_feats).T
    # stable sort on -sim: equal similarities keep the lower training index
    nn_idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    n_cls = int(train_labels.max()) + 1
    votes = np.zeros((len(sims), n_cls), dtype=np.int64)
    rows = np.repeat(np.arange(len(sims)), k)
    np.add.at(votes, (rows, train_labels[nn_idx].ravel()), 1)
    return np.argmax(votes, axis=1)


class LinearProbe:
    """Multinomial logistic regression on embeddings.

    The objective is the mean log-loss plus ``l2 / 2 * ||W||^2`` so that
    duplicating the training set leaves the optimum unchanged.
    """

    def __init__(self, l2=1e-3, max_iter=500, tol=1e-8):
        self.l2 = l2
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, x, y):
        from sklearn.linear_model import LogisticRegression

        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(np.unique(y)) < 2:
            raise DegenerateProbeError("linear probe needs at least two classes in the training labels")
        self.model = LogisticRegression(C=1.0 / (self.l2 * len(x)), max_iter=self.max_iter, tol=self.tol)
        self.model.fit(x, y)
        return self

    def decision_function(self, x):
        return self.model.decision_function(np.asarray(x, np.float64))

    def predict(self, x):
        return self.model.predict(np.asarray(x, np.float64))


def linear_probe(train_feats, train_labels, eval_feats, l2=1e-3):
    """Fit on labelled embeddings, predict ``eval_feats`` (any leading shape)."""
    eval_feats = np.asarray(eval_feats, dtype=np.float64)
    probe = LinearProbe(l2=l2).fit(train_feats, train_labels)
    flat = probe.predict(eval_feats.reshape(-1, eval_feats.shape[-1]))
    return flat.reshape(eval_feats.shape[:-1])


def propagate_masks(frames, first_mask, top_r=5, radius=12):
    """Carry instance labels from frame 0 through a video.

    Each pixel of frame ``t`` takes the majority label among its ``top_r``
    most similar pixels inside a square window of ``radius`` in frame 0 and
    in frame ``t-1`` (the latter carrying its propagated labels). At ``t=1``
    the two coincide and frame 0 is used once. Label 0 is background.
    """
    frames = [f.values if hasattr(f, "values") else np.asarray(f, np.float64) for f in frames]
    if len(frames) < 2:
        raise ValueError("propagation needs at least two frames")
    first_mask = np.asarray(first_mask, dtype=np.int64)
    n_labels = int(first_mask.max()) + 1
    masks = [first_mask]
    if n_labels == 1:
        return [first_mask.copy() for _ in frames]
    for t in range(1, len(frames)):
        ref_ids = [0] if t == 1 else [0, t - 1]
        refs = np.stack([frames[r] for r in ref_ids])
        labs = np.stack([masks[r] for r in ref_ids])
        masks.append(kernels.window_propagate(frames[t], refs, labs, radius, top_r, n_labels))
    return masks


# -- metrics -------------------------------------------------------------------


def confusion_matrix(pred, gt, n_classes, ignore_index=IGNORE_INDEX):
    """Rows are ground truth, columns predictions; ignored pixels dropped."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth sizes differ")
    keep = gt != ignore_index
    pred, gt = pred[keep], gt[keep]
    if pred.size and (pred.max() >= n_classes or gt.max() >= n_classes or pred.min() < 0 or gt.min() < 0):
        raise ValueError("label outside [0, n_classes)")
    return kernels.crosstab(gt, pred, n_classes, n_classes)


def iou_from_confusion(cm):
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / union
    return iou, union > 0


def compute_miou(pred, gt, n_classes, class_ids=None, ignore_index=IGNORE_INDEX):
    """Mean IoU over classes present in ground truth or prediction.

    ``class_ids`` restricts the average (e.g. to known classes). Returns
    ``(miou, per_class)`` where ``per_class`` maps class id to IoU.
    """
    cm = confusion_matrix(pred, gt, n_classes, ignore_index)
    if cm.sum() == 0:
        raise UndefinedMetricError("no valid pixels")
    iou, present = iou_from_confusion(cm)
    ids = range(n_classes) if class_ids is None else class_ids
    per_class = {int(c): float(iou[c]) for c in ids if present[c]}
    if not per_class:
        raise UndefinedMetricError("none of the requested classes occur")
    return float(np.mean(list(per_class.values()))), per_class


def compute_pacc(pred, gt, ignore_index=IGNORE_INDEX):
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = gt != ignore_index
    if not keep.any():
        raise UndefinedMetricError("no valid pixels")
    return float((pred[keep] == gt[keep]).mean())


def compute_hiou(miou_u, miou_k):
    """Harmonic mean of unknown- and known-class mIoU."""
    if miou_u + miou_k == 0:
        return 0.0
    return 2.0 * miou_u * miou_k / (miou_u + miou_k)


def compute_avgsim(v, i):
    """Mean cosine similarity between matched segment embeddings."""
    v = np.asarray(v, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    if v.shape != i.shape or len(v) == 0:
        raise UndefinedMetricError("avgsim needs equally sized, non-empty segment sets")
    return float(np.mean(np.sum(_unit(v) * _unit(i), axis=1)))


def mask_boundary(mask):
    mask = np.asarray(mask, bool)
    if not mask.any():
        return np.zeros_like(mask)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def boundary_tolerance(shape, fraction=0.008):
    return max(1, int(np.ceil(fraction * np.hypot(*shape))))


def boundary_f(pred, gt, fraction=0.008):
    """Boundary F-measure with a dilation tolerance tied to the image diagonal."""
    pb = mask_boundary(pred)
    gb = mask_boundary(gt)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    tol = boundary_tolerance(pb.shape, fraction)
    disk = ndimage.generate_binary_structure(2, 1)
    gd = ndimage.binary_dilation(gb, structure=disk, iterations=tol)
    pd = ndimage.binary_dilation(pb, structure=disk, iterations=tol)
    precision = (pb & gd).sum() / pb.sum()
    recall = (gb & pd).sum() / gb.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def region_j(pred, gt):
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    union = (pred | gt).sum()
    return 1.0 if union == 0 else float((pred & gt).sum() / union)


def compute_jf(pred_masks, gt_masks, skip_first=True):
    """Per-frame J and F averaged over foreground instances.

    Returns ``(J_mean, F_mean, per_frame)`` with ``per_frame`` a list of
    ``(J, F)`` pairs.
    """
    start = 1 if skip_first and len(gt_masks) > 1 else 0
    per_frame = []
    for p, g in zip(pred_masks[start:], gt_masks[start:]):
        p = np.asarray(p)
        g = np.asarray(g)
        ids = sorted(set(np.unique(g).tolist()) - {0})
        if not ids:
            ids = sorted(set(np.unique(p).tolist()) - {0})
        if not ids:
            per_frame.append((1.0, 1.0))
            continue
        js = [region_j(p == o, g == o) for o in ids]
        fs = [boundary_f(p == o, g == o) for o in ids]
        per_frame.append((float(np.mean(js)), float(np.mean(fs))))
    arr = np.array(per_frame)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean()), per_frame


@dataclass
class MetricReport:
    per_class_iou: Dict[int, float] = field(default_factory=dict)
    miou: Optional[float] = None
    pacc: Optional[float] = None
    miou_known: Optional[float] = None
    miou_unknown: Optional[float] = None
    hiou: Optional[float] = None
    avgsim: Optional[float] = None
    j_mean: Optional[float] = None
    f_mean: Optional[float] = None

    # report column names; the last three follow the usual open-vocabulary table layout
    COLUMNS = {
        "miou": "mIoU",
        "pacc": "pAcc",
        "avgsim": "avgsim",
        "j_mean": "J",
        "f_mean": "F",
        "miou_unknown": "mIoU_u",
        "miou_known": "mIoU_k",
        "hiou": "hIoU",
    }

    def as_row(self, class_names=None):
        row = {col: getattr(self, attr) for attr, col in self.COLUMNS.items()}
        for c, v in sorted(self.per_class_iou.items()):
            name = class_names[c] if class_names is not None and c < len(class_names) else str(c)
            row[f"iou_{name}"] = v
        return row


def segmentation_report(preds, gts, n_classes, known_ids=None, unknown_ids=None, ignore_index=IGNORE_INDEX):
    """Aggregate a report over many images (confusion matrices summed)."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        cm += confusion_matrix(p, g, n_classes, ignore_index)
    if cm.sum() == 0:
        raise UndefinedMetricError("no valid pixels")
    iou, present = iou_from_confusion(cm)
    per_class = {c: float(iou[c]) for c in range(n_classes) if present[c]}
    report = MetricReport(
        per_class_iou=per_class,
        miou=float(np.mean(list(per_class.values()))),
        pacc=float(np.trace(cm) / cm.sum()),
    )

    def sub(ids):
        vals = [per_class[c] for c in ids if c in per_class]
        return float(np.mean(vals)) if vals else None

    if known_ids is not None:
        report.miou_known = sub(known_ids)
    if unknown_ids is not None:
        report.miou_unknown = sub(unknown_ids)
    if report.miou_known is not None and report.miou_unknown is not None:
        report.hiou = compute_hiou(report.miou_unknown, report.miou_known)
    return report
