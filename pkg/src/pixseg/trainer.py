"""Training loop: views, segments, the three model losses and the unknown-prototype update."""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
import torch

from .contrastive import MemoryBank, ViewSegments, build_pair_sets, contrastive_loss, sample_anchors
from .geometry import apply_to_image, sample_transform, warp_dense_map
from .guidance import embedding_consistency_loss, semantic_consistency_loss
from .model import PixelEmbedder
from .prototypes import PrototypeBank, pseudo_label, unknown_update_loss
from .segmentation import cluster_to_segments, pool_segments, pool_segments_torch

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


def total_loss(l_t, l_e, l_s, weights=(1.0, 1.0, 1.0)):
    """Weighted sum of the contrastive, embedding and semantic terms."""
    parts = {"contrastive": l_t, "embedding": l_e, "semantic": l_s}
    for name, value in parts.items():
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} loss is not finite: {v}")
    w_t, w_e, w_s = weights
    return w_t * l_t + w_e * l_e + w_s * l_s


def lr_at(iteration, max_iter, lr0, power=0.9):
    """Polynomial decay from ``lr0`` at 0 to zero at ``max_iter``."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return lr0 * (1.0 - iteration / max_iter) ** power


def set_determinism(enabled=True):
    if enabled:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


@dataclass
class TrainingSample:
    image: np.ndarray  # (H0, W0, 3) floats in [0, 1]
    features: np.ndarray  # (H0, W0, d_c) encoder features on the original image
    regions: np.ndarray  # (H0, W0) region prior ids


class Trainer:
    """Holds the model, unknown prototypes, optimizer and memory bank.

    All randomness of an iteration derives from ``(seed, iteration)`` so a
    resumed run replays exactly what an uninterrupted one would.
    """

    def __init__(self, cfg, aug_cfg, samples: List[TrainingSample], bank: PrototypeBank, config_hash=""):
        self.cfg = cfg
        self.aug_cfg = aug_cfg
        self.samples = samples
        self.bank = bank
        self.config_hash = config_hash
        set_determinism(cfg.deterministic)
        d_c = samples[0].features.shape[-1]
        dim = cfg.embed_dim if cfg.embed_dim is not None else d_c
        if dim != d_c or bank.dim != d_c:
            raise ValueError(f"embedding dim {dim} must equal encoder dim {d_c} and bank dim {bank.dim}")
        torch.manual_seed(cfg.seed)
        self.model = PixelEmbedder(dim, hidden=cfg.hidden)
        self.optimizer = torch.optim.SGD(
            [
                {"params": list(self.model.parameters()), "name": "model"},
                {"params": [bank.unknown], "name": "unknown_prototypes", "weight_decay": 0.0},
            ],
            lr=cfg.lr,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
        )
        self.memory = MemoryBank(dim, cfg.bank_depth)
        self.iteration = 0

    # -- one step ----------------------------------------------------------------

    def _make_views(self, rng):
        cfg = self.cfg
        n = len(self.samples)
        batch = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        images, feats, regions, owners = [], [], [], []
        for b, idx in enumerate(batch):
            s = self.samples[idx]
            for _ in range(cfg.views_per_image):
                t = sample_transform(int(rng.integers(2**31)), self.aug_cfg, s.image.shape[:2])
                view, corr = apply_to_image(s.image, t)
                images.append(view)
                feats.append(warp_dense_map(s.features, corr, mode="bilinear"))
                regions.append(warp_dense_map(s.regions, corr, mode="nearest"))
                owners.append(b)
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise ValueError("views differ in size; set augment.out_size or use equally sized images")
        return images, feats, regions, owners

    def step(self):
        cfg = self.cfg
        it = self.iteration
        rng = np.random.default_rng([cfg.seed, it])
        images, feats, regions, owners = self._make_views(rng)

        x = torch.as_tensor(np.stack(images), dtype=torch.float32).permute(0, 3, 1, 2)
        z = self.model(x).permute(0, 2, 3, 1)  # (V, H, W, d)
        n_views, h, w, d = z.shape
        z_np = z.detach().double().numpy()

        views, seg_v, seg_i, seg_bad = [], [], [], []
        for vi in range(n_views):
            ids = cluster_to_segments(z_np[vi], k=cfg.segments_per_view, iters=cfg.kmeans_iters,
                                      seed=int(rng.integers(2**31)))
            clip_segs = pool_segments(feats[vi], ids)
            ids = clip_segs.ids
            v_s, bad = pool_segments_torch(z[vi].reshape(-1, d), ids, len(clip_segs))
            bad = bad.numpy() | clip_segs.degenerate
            views.append(ViewSegments(owners[vi], regions[vi], ids, bad))
            seg_v.append(v_s)
            seg_i.append(clip_segs.embeddings)
            seg_bad.append(bad)
        v_all = torch.cat(seg_v)
        i_all_np = np.concatenate(seg_i)
        ok = ~np.concatenate(seg_bad)
        i_all = torch.as_tensor(i_all_np, dtype=v_all.dtype)

        # contrastive term
        bank_entries = self.memory.snapshot(dtype=v_all.dtype)
        a_view, a_pix = sample_anchors(views, cfg.anchors_per_view, rng)
        pairs = build_pair_sets(views, len(bank_entries), a_view, a_pix)
        z_anchor = z.reshape(n_views, h * w, d)[torch.as_tensor(pairs.anchor_view), torch.as_tensor(pairs.anchor_pixel)]
        l_t = contrastive_loss(z_anchor, torch.cat([v_all, bank_entries]), pairs.positive, pairs.negative, cfg.kappa)

        # guidance terms on usable segments
        ok_t = torch.as_tensor(ok)
        v_ok, i_ok = v_all[ok_t], i_all[ok_t]
        l_e = embedding_consistency_loss(v_ok, i_ok)
        labels = pseudo_label(i_all_np[ok], self.bank.as_numpy())
        l_s = semantic_consistency_loss(v_ok, self.bank.all(), labels, cfg.semantic_temperature)
        unk = labels >= self.bank.k
        l_u = unknown_update_loss(self.bank.unknown, i_ok[torch.as_tensor(unk)], labels[unk] - self.bank.k)

        loss = total_loss(l_t, l_e, l_s, cfg.loss_weights)
        if not math.isfinite(float(l_u.detach())):
            raise NonFiniteLossError(f"unknown-prototype loss is not finite: {float(l_u)}")

        lr = lr_at(it, cfg.iterations, cfg.lr, cfg.poly_power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        (loss + l_u).backward()
        self.optimizer.step()
        self.bank.renormalize()
        self.memory.push(v_all[ok_t].detach())
        self.iteration += 1
        return {
            "iteration": it,
            "lr": lr,
            "total": float(loss.detach()),
            "contrastive": float(l_t.detach()),
            "embedding": float(l_e.detach()),
            "semantic": float(l_s.detach()),
            "unknown": float(l_u.detach()),
            "excluded_anchors": pairs.n_excluded,
            "unknown_assigned": int(unk.sum()),
        }

    # -- loop and persistence -------------------------------------------------------

    def fit(self, iterations=None, log_path=None, checkpoint_dir=None):
        end = self.cfg.iterations if iterations is None else min(iterations, self.cfg.iterations)
        records = []
        fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while self.iteration < end:
                try:
                    rec = self.step()
                except NonFiniteLossError:
                    if checkpoint_dir:
                        self.save_checkpoint(Path(checkpoint_dir) / "abort.pt")
                    raise
                rec["config_hash"] = self.config_hash
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                every = self.cfg.checkpoint_every
                if checkpoint_dir and every and self.iteration % every == 0:
                    self.save_checkpoint(Path(checkpoint_dir) / f"ckpt_{self.iteration:06d}.pt")
        finally:
            if fh:
                fh.close()
        return records

    def state_dict(self):
        return {
            "version": CHECKPOINT_VERSION,
            "iteration": self.iteration,
            "config_hash": self.config_hash,
            "model": self.model.state_dict(),
            "unknown": self.bank.unknown.detach().clone(),
            "known": torch.from_numpy(self.bank.known_array.copy()),
            "names": list(self.bank.names),
            "optimizer": self.optimizer.state_dict(),
            "memory": self.memory.state_dict(),
        }

    def load_state_dict(self, state):
        if state.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('version')}")
        self.model.load_state_dict(state["model"])
        with torch.no_grad():
            self.bank.unknown.copy_(state["unknown"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.memory.load_state_dict(state["memory"])
        self.iteration = state["iteration"]

    def save_checkpoint(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)

    def load_checkpoint(self, path):
        self.load_state_dict(torch.load(path, weights_only=False))


def load_model_from_checkpoint(path):
    state = torch.load(path, weights_only=False)
    weights = state["model"]
    last = [k for k in weights if k.endswith("weight")][-1]
    dim = weights[last].shape[0]
    hidden = weights["body.0.weight"].shape[0]
    depth = sum(1 for k, v in weights.items() if k.endswith("weight") and v.shape[-1] == 3)
    model = PixelEmbedder(dim, hidden=hidden, depth=depth)
    model.load_state_dict(weights)
    model.eval()
    bank = PrototypeBank(state["known"].double().numpy(), state["names"], state["unknown"].double().numpy())
    return model, bank, state
