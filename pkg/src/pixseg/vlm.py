"""Frozen vision-language encoders: contracts, prompt ensembling, a stub and a CLIP adapter."""

import json
import logging
import re
import warnings
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import List, Protocol, Sequence

import numpy as np

from .geometry import ViewCorrespondence, warp_dense_map
from .segmentation import ConfigurationError

log = logging.getLogger(__name__)

PLACEHOLDER = "{}"


class EncoderUnavailableError(RuntimeError):
    pass


class DenseFeatureEncoder(Protocol):
    stride: int

    def encode_dense_native(self, image: np.ndarray) -> np.ndarray:
        """(H', W', d_c) features on the encoder's own grid."""

    def fingerprint(self) -> str:
        ...


class TextEncoder(Protocol):
    def encode(self, text: str) -> np.ndarray:
        """Unit d_c vector."""


@dataclass(frozen=True)
class PromptEnsemble:
    templates: tuple

    def __post_init__(self):
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise ConfigurationError(f"template needs exactly one {PLACEHOLDER!r}: {t!r}")

    def __len__(self):
        return len(self.templates)

    def fill(self, name):
        return [t.replace(PLACEHOLDER, name) for t in self.templates]

    @classmethod
    def from_file(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in (s.strip() for s in lines) if line and not line.startswith("#")))

    @classmethod
    def default(cls):
        text = resources.files("pixseg").joinpath("data/prompt_templates.txt").read_text(encoding="utf-8")
        return cls(tuple(line for line in text.splitlines() if line.strip()))


def encode_class_text(name, ensemble, text_enc):
    """Renormalised mean of the text embeddings of every filled template."""
    if not name:
        raise ValueError("class name must be non-empty")
    if len(ensemble) == 0:
        raise ConfigurationError("prompt ensemble is empty")
    vecs = np.stack([text_enc.encode(p) for p in ensemble.fill(name)])
    mean = vecs.mean(axis=0)
    return mean / np.linalg.norm(mean)


def encode_classes(names, ensemble, text_enc):
    return np.stack([encode_class_text(n, ensemble, text_enc) for n in names])


def resize_grid(grid, out_h, out_w):
    """Bilinear resize with pixel-centre alignment."""
    h, w = grid.shape[:2]
    if (h, w) == (out_h, out_w):
        return np.asarray(grid, dtype=np.float64)
    rows = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    rr, cc = np.meshgrid(np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1), indexing="ij")
    corr = ViewCorrespondence(np.stack([rr, cc], -1), np.ones((out_h, out_w), bool))
    return warp_dense_map(grid, corr, mode="bilinear")


def encode_dense(encoder, image):
    """Encoder features resized to the image resolution and renormalised."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h % encoder.stride or w % encoder.stride:
        raise ValueError(f"image size {(h, w)} not divisible by encoder stride {encoder.stride}")
    native = encoder.encode_dense_native(image)
    out = resize_grid(native, h, w)
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    return out / np.maximum(norm, 1e-12)


def make_palette_vectors(n, dim, seed=0):
    """``n`` orthonormal rows in ``dim`` dimensions."""
    if dim < n:
        raise ConfigurationError(f"need dim >= {n} for orthogonal palette vectors")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
    return q.T.copy()


@dataclass
class PaletteEntry:
    name: str
    color: tuple
    vector: np.ndarray


def save_palette(path, entries: Sequence[PaletteEntry]):
    payload = {
        "dim": int(len(entries[0].vector)),
        "entries": [
            {"name": e.name, "color": [float(c) for c in e.color], "vector": [float(v) for v in e.vector]}
            for e in entries
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_palette(path) -> List[PaletteEntry]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = [PaletteEntry(e["name"], tuple(e["color"]), np.asarray(e["vector"], float)) for e in raw["entries"]]
    if len({e.name for e in entries}) != len(entries):
        raise ConfigurationError("palette names must be unique")
    return entries


class StubTextEncoder:
    """Maps any text mentioning a vocabulary word to that word's palette vector."""

    def __init__(self, vocabulary, text_noise=0.0):
        self.vocabulary = {k: np.asarray(v, float) for k, v in vocabulary.items()}
        self.text_noise = text_noise
        dim = len(next(iter(self.vocabulary.values())))
        mean = np.mean(list(self.vocabulary.values()), axis=0)
        n = np.linalg.norm(mean)
        self._fallback = mean / n if n > 1e-12 else np.full(dim, 1 / np.sqrt(dim))
        words = sorted(self.vocabulary, key=len, reverse=True)
        self._pattern = re.compile(r"\b(" + "|".join(re.escape(w) for w in words) + r")\b", re.IGNORECASE)
        self._lower = {w.lower(): w for w in self.vocabulary}

    def encode(self, text):
        hits = self._pattern.findall(text)
        if not hits:
            warnings.warn(f"text {text!r} matches no stub vocabulary word", stacklevel=2)
            vec = self._fallback
        else:
            vec = self.vocabulary[self._lower[max(hits, key=len).lower()]]
        if self.text_noise > 0:
            rng = np.random.default_rng(zlib.crc32(text.encode("utf-8")))
            vec = vec + rng.standard_normal(vec.shape) * self.text_noise / np.sqrt(vec.size)
        return vec / np.linalg.norm(vec)


class StubDenseEncoder:
    """Per-pixel nearest-palette lookup plus seeded noise.

    ``noise_sigma`` is the expected norm of the additive noise before
    renormalisation. With ``stride > 1`` the image is block-averaged first,
    mimicking a coarse transformer grid.
    """

    def __init__(self, entries, noise_sigma=0.0, seed=0, stride=1):
        colors = np.array([e.color for e in entries], dtype=np.float64)
        vectors = np.stack([e.vector for e in entries]).astype(np.float64)
        if len(np.unique(vectors.round(12), axis=0)) != len(vectors):
            raise ConfigurationError("palette vectors must be pairwise distinct")
        self.colors = colors
        self.vectors = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        self.noise_sigma = float(noise_sigma)
        self.seed = int(seed)
        self.stride = int(stride)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def nearest_palette(self, image):
        image = np.asarray(image, dtype=np.float64)
        d2 = ((image[..., None, :] - self.colors) ** 2).sum(-1)
        return np.argmin(d2, axis=-1)

    def encode_dense_native(self, image):
        image = np.asarray(image, dtype=np.float64)
        if self.stride > 1:
            h, w, c = image.shape
            s = self.stride
            image = image.reshape(h // s, s, w // s, s, c).mean(axis=(1, 3))
        feats = self.vectors[self.nearest_palette(image)]
        if self.noise_sigma > 0:
            digest = zlib.crc32(np.ascontiguousarray(image).tobytes())
            rng = np.random.default_rng([self.seed, digest])
            feats = feats + rng.standard_normal(feats.shape) * (self.noise_sigma / np.sqrt(self.dim))
        return feats / np.linalg.norm(feats, axis=-1, keepdims=True)

    def fingerprint(self):
        h = zlib.crc32(self.vectors.tobytes() + self.colors.tobytes())
        return f"stub-{h:08x}-n{self.noise_sigma}-s{self.seed}-st{self.stride}"


def stub_encoder(entries, noise_sigma=0.0, seed=0, stride=1, text_noise=0.0):
    dense = StubDenseEncoder(entries, noise_sigma=noise_sigma, seed=seed, stride=stride)
    text = StubTextEncoder({e.name: dense.vectors[i] for i, e in enumerate(entries)}, text_noise)
    return dense, text


# CLIP normalisation constants
_CLIP_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
_CLIP_STD = np.array([0.26862954, 0.26130258, 0.27577711])


def attnpool_dense(attnpool, feats):
    """Dense output of a CLIP attention-pooling head with query/key removed.

    The value projection and the output projection run as two consecutive
    per-location linear layers over an ``(B, C, h, w)`` feature map.
    """
    import torch.nn.functional as F

    v = F.conv2d(feats, attnpool.v_proj.weight[:, :, None, None], attnpool.v_proj.bias)
    return F.conv2d(v, attnpool.c_proj.weight[:, :, None, None], attnpool.c_proj.bias)


class ClipResNetDense:
    """Dense features from an open_clip ResNet image tower."""

    def __init__(self, model, tokenizer, name="clip"):
        import torch

        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        self.name = name
        self.stride = 32
        self._torch = torch

    def _trunk(self, x):
        vis = self.model.visual
        x = vis.stem(x)
        for layer in (vis.layer1, vis.layer2, vis.layer3, vis.layer4):
            x = layer(x)
        return x

    def encode_dense_native(self, image):
        torch = self._torch
        img = (np.asarray(image, np.float64) - _CLIP_MEAN) / _CLIP_STD
        x = torch.from_numpy(img.transpose(2, 0, 1)[None]).float()
        with torch.no_grad():
            out = attnpool_dense(self.model.visual.attnpool, self._trunk(x))
        out = out[0].permute(1, 2, 0).double().numpy()
        return out / np.linalg.norm(out, axis=-1, keepdims=True)

    def encode(self, text):
        torch = self._torch
        with torch.no_grad():
            emb = self.model.encode_text(self.tokenizer([text]))[0].double().numpy()
        return emb / np.linalg.norm(emb)

    def fingerprint(self):
        return f"clip-{self.name}"


def load_clip_adapter(name="RN50", pretrained="openai"):
    try:
        import open_clip
    except ImportError as exc:
        raise EncoderUnavailableError("open_clip is not installed; pip install open_clip_torch") from exc
    if not name.startswith("RN"):
        raise EncoderUnavailableError(f"dense adapter supports ResNet CLIP towers only, got {name}")
    model, _, _ = open_clip.create_model_and_transforms(name, pretrained=pretrained)
    enc = ClipResNetDense(model, open_clip.get_tokenizer(name), name)
    return enc, enc


class FeatureCache:
    """Per-image dense features stored as ``.npy`` under ``root/<fingerprint>/``."""

    def __init__(self, root, encoder):
        self.dir = Path(root) / encoder.fingerprint()
        self.encoder = encoder

    def get(self, image_id, image):
        path = self.dir / f"{image_id}.npy"
        if path.exists():
            return np.load(path)
        feats = encode_dense(self.encoder, image)
        self.dir.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npy")
        np.save(tmp, feats)
        tmp.replace(path)
        return feats
