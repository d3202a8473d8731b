"""Brute-force reference implementations shared by unit and acceptance tests."""

import numpy as np


def argmax_first(values):
    best, arg = -np.inf, -1
    for j, v in enumerate(values):
        if v > best:
            best, arg = v, j
    return arg


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def pseudo_label(feats, protos):
    p = unit(protos)
    return np.array([argmax_first([float(unit(f) @ q) for q in p]) for f in feats])


def langseg(emb, text):
    h, w, _ = emb.shape
    t = unit(text)
    out = np.zeros((h, w), int)
    for i in range(h):
        for j in range(w):
            out[i, j] = argmax_first([float(unit(emb[i, j]) @ c) for c in t])
    return out


def knn(queries, train, labels, k):
    tr = unit(train)
    out = []
    for q in unit(queries):
        sims = [(-float(q @ t), idx) for idx, t in enumerate(tr)]
        sims.sort()
        votes = {}
        for _, idx in sims[:k]:
            votes[labels[idx]] = votes.get(labels[idx], 0) + 1
        top = max(votes.values())
        out.append(min(c for c, v in votes.items() if v == top))
    return np.array(out)


def miou(pred, gt, n_classes, ignore=255):
    ious = []
    for c in range(n_classes):
        tp = fp = fn = 0
        for p, g in zip(np.ravel(pred), np.ravel(gt)):
            if g == ignore:
                continue
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return float(np.mean(ious))
