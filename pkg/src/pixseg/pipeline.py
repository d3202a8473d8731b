"""Glue between configuration, data on disk, training and evaluation."""

import csv
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import RunConfig, config_hash
from .evaluation import (
    MetricReport,
    compute_avgsim,
    compute_jf,
    knn_classify_segments,
    langseg_from_text,
    linear_probe,
    propagate_masks,
    segmentation_report,
)
from .prototypes import PrototypeBank, build_known_prototypes, init_unknown_prototypes, pseudo_label
from .segmentation import ConfigurationError, cluster_to_segments, generate_region_prior, pool_segments
from .synth import load_image, load_label_map
from .trainer import Trainer, TrainingSample
from .vlm import (
    EncoderUnavailableError,
    FeatureCache,
    PromptEnsemble,
    encode_classes,
    encode_dense,
    load_clip_adapter,
    load_palette,
    stub_encoder,
)

log = logging.getLogger(__name__)

CACHE_ENV = "PIXSEG_CACHE_DIR"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Dataset:
    ids: List[str]
    images: List[np.ndarray]
    gts: Optional[List[np.ndarray]] = None


def load_dataset(image_dir, gt_dir=None):
    image_dir = Path(image_dir)
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no images in {image_dir}")
    ids = [p.stem for p in paths]
    images = [load_image(p) for p in paths]
    gts = None
    if gt_dir is not None:
        gts = []
        for i in ids:
            p = Path(gt_dir) / f"{i}.png"
            if not p.exists():
                raise FileNotFoundError(f"missing ground truth {p}")
            gts.append(load_label_map(p))
    return Dataset(ids, images, gts)


def load_priors(cfg: RunConfig, data: Dataset):
    rp = cfg.dataset.region_prior
    priors = []
    for image_id, img in zip(data.ids, data.images):
        if rp.method == "file":
            base = Path(cfg.dataset.region_prior_dir)
            path = next((base / f"{image_id}{s}" for s in (".png", ".npy") if (base / f"{image_id}{s}").exists()), None)
            if path is None:
                raise FileNotFoundError(f"no region prior for {image_id} in {base}")
            prior = generate_region_prior(method="file", path=path)
        else:
            prior = generate_region_prior(img, method="slic", n_regions=rp.n_regions, compactness=rp.compactness)
        if prior.ids.shape != img.shape[:2]:
            raise ValueError(f"region prior for {image_id} has shape {prior.ids.shape}, image {img.shape[:2]}")
        priors.append(prior.ids)
    return priors


def make_encoder(cfg: RunConfig):
    enc = cfg.encoder
    if enc.kind == "stub":
        if not enc.palette:
            raise ConfigurationError("stub encoder needs encoder.palette")
        return stub_encoder(load_palette(enc.palette), enc.noise_sigma, enc.seed, enc.stride, enc.text_noise)
    try:
        return load_clip_adapter(enc.clip_name, enc.clip_pretrained)
    except EncoderUnavailableError:
        if enc.palette:
            log.warning("CLIP adapter unavailable, falling back to the configured stub palette")
            return stub_encoder(load_palette(enc.palette), enc.noise_sigma, enc.seed, enc.stride, enc.text_noise)
        raise


def prompt_ensemble(cfg: RunConfig):
    if cfg.encoder.prompt_file:
        return PromptEnsemble.from_file(cfg.encoder.prompt_file)
    return PromptEnsemble.default()


def dense_features(encoder, data: Dataset):
    cache_root = os.environ.get(CACHE_ENV)
    if cache_root:
        cache = FeatureCache(cache_root, encoder)
        return [cache.get(i, img) for i, img in zip(data.ids, data.images)]
    return [encode_dense(encoder, img) for img in data.images]


def encoder_segments(features, k=36, seed=0, iters=10):
    """Cluster each image's encoder features and pool them into segment features."""
    seg_maps, seg_feats = [], []
    for n, f in enumerate(features):
        ids = cluster_to_segments(f, k=k, iters=iters, seed=seed + n)
        segs = pool_segments(f, ids)
        seg_maps.append(segs.ids)
        seg_feats.append(segs.embeddings[~segs.degenerate])
    return seg_maps, np.concatenate(seg_feats)


def build_prototype_bank(cfg: RunConfig, text_enc, features):
    names = list(cfg.eval.known_classes)
    if not names:
        raise ConfigurationError("eval.known_classes is empty; prototypes need known class names")
    _, seg_feats = encoder_segments(features, k=cfg.train.segments_per_view, seed=cfg.seed)
    t = cfg.train
    if len(seg_feats) < max(t.top_m, t.unknown_u):
        raise ConfigurationError(
            f"corpus yields {len(seg_feats)} segments; need at least top_m={t.top_m} and unknown_u={t.unknown_u}"
        )
    text = encode_classes(names, prompt_ensemble(cfg), text_enc)
    known = build_known_prototypes(text, seg_feats, m=t.top_m)
    unknown, _ = init_unknown_prototypes(seg_feats, u=t.unknown_u, seed=cfg.seed)
    return PrototypeBank(known, names, unknown)


def make_trainer(cfg: RunConfig, data: Dataset, features, priors, bank):
    samples = [TrainingSample(img, f, r) for img, f, r in zip(data.images, features, priors)]
    return Trainer(cfg.train, cfg.augment, samples, bank, config_hash=config_hash(cfg))


# -- evaluation helpers --------------------------------------------------------


def embed_all(model, images):
    return [model.embed(img) for img in images]


def eval_langseg(cfg: RunConfig, embeddings, gts, text_enc):
    names = cfg.class_names
    text = encode_classes(names, prompt_ensemble(cfg), text_enc)
    preds = [langseg_from_text(e, text) for e in embeddings]
    k = len(cfg.eval.known_classes)
    unknown_ids = list(range(k, len(names))) if cfg.eval.unknown_classes else None
    report = segmentation_report(preds, gts, len(names), known_ids=list(range(k)), unknown_ids=unknown_ids)
    return report, preds


def eval_avgsim(embeddings, features, k=36, seed=0):
    """Mean cosine between our segment embeddings and encoder segment features.

    Segments come from clustering our embeddings and are applied to both maps.
    """
    v_all, i_all = [], []
    for n, (e, f) in enumerate(zip(embeddings, features)):
        ids = cluster_to_segments(e, k=k, seed=seed + n)
        v = pool_segments(e, ids)
        i = pool_segments(f, v.ids)
        ok = ~(v.degenerate | i.degenerate)
        v_all.append(v.embeddings[ok])
        i_all.append(i.embeddings[ok])
    return compute_avgsim(np.concatenate(v_all), np.concatenate(i_all))


def segment_majority(ids, gt, n_classes, ignore=255):
    """Majority ground-truth class of every segment (ignore pixels skipped)."""
    n_seg = int(ids.max()) + 1
    keep = gt != ignore
    table = np.zeros((n_seg, n_classes), dtype=np.int64)
    np.add.at(table, (ids[keep], gt[keep]), 1)
    return np.argmax(table, axis=1), table.sum(axis=1) > 0


def labelled_segments(embeddings, gts, n_classes, k=36, seed=0):
    feats, labels, maps = [], [], []
    for n, (e, g) in enumerate(zip(embeddings, gts)):
        ids = cluster_to_segments(e, k=k, seed=seed + n)
        segs = pool_segments(e, ids)
        lab, has = segment_majority(segs.ids, g, n_classes)
        ok = has & ~segs.degenerate
        feats.append(segs.embeddings[ok])
        labels.append(lab[ok])
        maps.append(segs)
    return np.concatenate(feats), np.concatenate(labels), maps


def eval_knn(train_emb, train_gts, eval_emb, eval_gts, n_classes, k=20, segments=36, seed=0):
    tf, tl, _ = labelled_segments(train_emb, train_gts, n_classes, segments, seed)
    preds = []
    for n, e in enumerate(eval_emb):
        segs = pool_segments(e, cluster_to_segments(e, k=segments, seed=seed + n))
        lab = knn_classify_segments(segs.embeddings, tf, tl, k=k)
        preds.append(lab[segs.ids])
    return segmentation_report(preds, eval_gts, n_classes), preds


def eval_linear(train_emb, train_gts, eval_emb, eval_gts, n_classes, max_pixels=20000, seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([e.reshape(-1, e.shape[-1]) for e in train_emb])
    y = np.concatenate([g.ravel() for g in train_gts])
    keep = np.flatnonzero(y != 255)
    if len(keep) > max_pixels:
        keep = np.sort(rng.choice(keep, max_pixels, replace=False))
    preds = [linear_probe(x[keep], y[keep], e) for e in eval_emb]
    return segmentation_report(preds, eval_gts, n_classes), preds


def unknown_discovery(bank: PrototypeBank, text_enc, cfg: RunConfig, features, gts):
    """How well unknown prototypes capture each held-out class.

    Returns, per held-out class, the best cosine between an unknown
    prototype and the class text embedding and the fraction of that class's
    encoder segments pseudo-labelled as some unknown class.
    """
    out = {}
    if not cfg.eval.unknown_classes:
        return out
    names = cfg.class_names
    text = encode_classes(cfg.eval.unknown_classes, prompt_ensemble(cfg), text_enc)
    unknown = bank.as_numpy()[bank.k :]
    unknown = unknown / np.linalg.norm(unknown, axis=1, keepdims=True)
    seg_maps, _ = encoder_segments(features, k=cfg.train.segments_per_view, seed=cfg.seed)
    for j, name in enumerate(cfg.eval.unknown_classes):
        cls = names.index(name)
        member = []
        for ids, f, g in zip(seg_maps, features, gts):
            segs = pool_segments(f, ids)
            lab, has = segment_majority(segs.ids, g, len(names))
            sel = has & (lab == cls) & ~segs.degenerate
            member.append(segs.embeddings[sel])
        member = np.concatenate(member)
        rate = float(np.mean(pseudo_label(member, bank.as_numpy()) >= bank.k)) if len(member) else float("nan")
        out[name] = {"best_cosine": float(np.max(unknown @ text[j])), "unknown_rate": rate, "n_segments": len(member)}
    return out


def eval_tracking(model_or_encoder, frames, masks, top_r=5, radius=12):
    if hasattr(model_or_encoder, "embed"):
        embs = [model_or_encoder.embed(f) for f in frames]
    else:
        embs = [encode_dense(model_or_encoder, f) for f in frames]
    pred = propagate_masks(embs, masks[0], top_r=top_r, radius=radius)
    j, f, per_frame = compute_jf(pred, masks)
    return MetricReport(j_mean=j, f_mean=f), pred, per_frame


# -- reports ---------------------------------------------------------------------


def report_rows(report: MetricReport, chash, run_name, mode, fold=None, class_names=None):
    row = {"run": run_name, "mode": mode, "config_hash": chash}
    if fold is not None:
        row["fold"] = fold
    row.update(report.as_row(class_names))
    return row


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)


def rows_to_csv(rows):
    columns = []
    for r in rows:
        for k in r:
            if k not in columns:
                columns.append(k)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(r.get(k)) for k in columns})
    return buf.getvalue()


def write_csv(path, rows):
    Path(path).write_text(rows_to_csv(rows), encoding="utf-8")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def plot_metrics(path, rows, metrics, chash, title=""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows) * len(metrics)), 3))
    width = 0.8 / max(1, len(metrics))
    xs = np.arange(len(rows))
    for j, m in enumerate(metrics):
        vals = [float(r[m]) if r.get(m) not in (None, "") else 0.0 for r in rows]
        ax.bar(xs + j * width, vals, width, label=m)
    ax.set_xticks(xs + width * (len(metrics) - 1) / 2)
    ax.set_xticklabels([str(r.get("run", i)) for i, r in enumerate(rows)], rotation=20, fontsize=7)
    ax.set_ylim(0, 1)
    ax.set_title(title or f"config {chash}", fontsize=8)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Description": f"config_hash={chash}"})
    plt.close(fig)


def plot_loss_trace(path, records, chash):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    it = [r["iteration"] for r in records]
    for key in ("total", "contrastive", "embedding", "semantic", "unknown"):
        ax.plot(it, [r[key] for r in records], label=key, lw=0.8)
    ax.set_xlabel("iteration")
    ax.legend(fontsize=7)
    ax.set_title(f"config {chash}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Description": f"config_hash={chash}"})
    plt.close(fig)


def read_log(path):
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
