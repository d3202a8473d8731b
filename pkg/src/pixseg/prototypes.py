"""Known and unknown class prototypes in the frozen encoder's feature space."""

import struct
from pathlib import Path

import numpy as np
import torch

from .segmentation import ConfigurationError

BANK_MAGIC = b"PXPROTO\x00"
BANK_VERSION = 1
_HEADER = struct.Struct("<8sIIII")


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def build_known_prototypes(text_emb, seg_feats, m=32):
    """Average of the ``m`` segments scoring highest for each class.

    Scores are cosine similarities to the class text embeddings, softmax
    normalised across classes per segment. Ties keep the lower segment index.
    """
    text_emb = np.asarray(text_emb, dtype=np.float64)
    seg_feats = np.asarray(seg_feats, dtype=np.float64)
    if len(seg_feats) < m:
        raise ConfigurationError(f"need at least m={m} segments, have {len(seg_feats)}")
    scores = softmax(seg_feats @ text_emb.T, axis=1)
    protos = []
    for c in range(text_emb.shape[0]):
        top = np.argsort(-scores[:, c], kind="stable")[:m]
        protos.append(seg_feats[top].mean(axis=0))
    return _unit(np.stack(protos))


def init_unknown_prototypes(seg_feats, u=64, seed=0):
    """``u`` distinct segment features drawn without replacement."""
    seg_feats = np.asarray(seg_feats, dtype=np.float64)
    if len(seg_feats) < u:
        raise ConfigurationError(f"need at least u={u} segments, have {len(seg_feats)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(seg_feats), size=u, replace=False)
    return _unit(seg_feats[idx]), idx


def pseudo_label(seg_feats, prototypes):
    """Index of the most similar prototype per segment, lowest index on ties."""
    seg_feats = np.asarray(seg_feats, dtype=np.float64)
    single = seg_feats.ndim == 1
    feats = np.atleast_2d(seg_feats)
    norm = np.linalg.norm(feats, axis=1, keepdims=True)
    sims = (feats / np.maximum(norm, 1e-12)) @ _unit(np.asarray(prototypes, np.float64)).T
    labels = np.argmax(sims, axis=1)
    return int(labels[0]) if single else labels


def unknown_update_loss(unknown, feats, assign):
    """Mean of ``1 - cos(c_{a_s}, f_s)`` over segments assigned to unknown classes.

    ``assign`` holds indices into ``unknown`` (0..u-1). The gradient reaches
    ``unknown`` only; ``feats`` are treated as constants.
    """
    assign = torch.as_tensor(assign, dtype=torch.long)
    if assign.numel() == 0:
        return unknown.sum() * 0.0
    protos = torch.nn.functional.normalize(unknown, dim=1)[assign]
    f = torch.nn.functional.normalize(torch.as_tensor(feats, dtype=unknown.dtype).detach(), dim=1)
    return (1.0 - (protos * f).sum(dim=1)).mean()


class PrototypeBank:
    """``k`` fixed known prototypes followed by ``u`` learnable unknown ones."""

    def __init__(self, known, names, unknown, dtype=torch.float32, config_hash=""):
        known = np.asarray(known, dtype=np.float64)
        self.config_hash = config_hash
        if len(names) != len(known):
            raise ValueError("one name per known prototype")
        self.names = list(names)
        self._known_np = known.copy()
        self._known_np.setflags(write=False)
        self.known = torch.tensor(known, dtype=dtype)
        self.unknown = torch.nn.Parameter(torch.tensor(np.asarray(unknown, np.float64), dtype=dtype))

    @property
    def k(self):
        return self.known.shape[0]

    @property
    def u(self):
        return self.unknown.shape[0]

    @property
    def L(self):
        return self.k + self.u

    @property
    def dim(self):
        return self.known.shape[1]

    @property
    def known_array(self):
        return self._known_np

    def all(self, detach=True):
        unk = self.unknown.detach() if detach else self.unknown
        return torch.cat([self.known, unk], dim=0)

    def as_numpy(self):
        return np.concatenate([self._known_np, self.unknown.detach().double().numpy()], axis=0)

    @torch.no_grad()
    def renormalize(self, tol=1e-6):
        """Project unknown prototypes back to the sphere; rows already there are left bitwise intact."""
        norm = self.unknown.norm(dim=1, keepdim=True)
        off = (norm - 1.0).abs() > tol
        self.unknown.copy_(torch.where(off, self.unknown / norm.clamp_min(1e-12), self.unknown))

    def save(self, path, config_hash=None):
        """Header, class names and the config hash as length-prefixed UTF-8, then float64 rows."""
        chash = self.config_hash if config_hash is None else config_hash
        header = _HEADER.pack(BANK_MAGIC, BANK_VERSION, self.dim, self.k, self.u)
        strings = [n.encode("utf-8") for n in self.names] + [chash.encode("utf-8")]
        names = b"".join(struct.pack("<I", len(b)) + b for b in strings)
        payload = np.ascontiguousarray(self.as_numpy(), dtype="<f8").tobytes()
        Path(path).write_bytes(header + names + payload)

    @classmethod
    def load(cls, path, dtype=torch.float32):
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise ValueError(f"{path}: truncated prototype bank file")
        magic, version, dim, k, u = _HEADER.unpack_from(raw, 0)
        if magic != BANK_MAGIC:
            raise ValueError(f"{path}: not a prototype bank file")
        if version != BANK_VERSION:
            raise ValueError(f"{path}: unsupported bank version {version}")
        off = _HEADER.size
        strings = []
        try:
            for _ in range(k + 1):
                (n,) = struct.unpack_from("<I", raw, off)
                off += 4
                strings.append(raw[off : off + n].decode("utf-8"))
                off += n
        except (struct.error, UnicodeDecodeError) as exc:
            raise ValueError(f"{path}: corrupt name table") from exc
        if len(raw) - off != (k + u) * dim * 8:
            raise ValueError(f"{path}: payload size does not match header (d={dim}, k={k}, u={u})")
        vecs = np.frombuffer(raw, dtype="<f8", count=(k + u) * dim, offset=off).reshape(k + u, dim)
        return cls(vecs[:k], strings[:k], vecs[k:], dtype=dtype, config_hash=strings[k])
