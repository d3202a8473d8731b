"""Segment-level alignment with the frozen encoder.

``embedding_consistency_loss`` pulls our segment embeddings onto the
encoder's segment features; ``semantic_consistency_loss`` asks our segments
to predict the encoder's pseudo-labels over the prototype bank.
"""

import torch
import torch.nn.functional as F


class AlignmentError(ValueError):
    pass


def embedding_consistency_loss(v, i):
    """Mean of ``1 - cos(v_s, i_s)`` over matched segment rows."""
    if v.shape != i.shape:
        raise AlignmentError(f"segment sets differ: {tuple(v.shape)} vs {tuple(i.shape)}")
    if v.shape[0] == 0:
        return v.sum() * 0.0
    return (1.0 - F.cosine_similarity(v, i, dim=1, eps=1e-12)).mean()


def class_probabilities(v, prototypes, temperature=1.0):
    sims = F.normalize(v, dim=1) @ F.normalize(prototypes, dim=1).T
    return torch.softmax(sims / temperature, dim=1)


def semantic_consistency_loss(v, prototypes, labels, temperature=1.0):
    """Cross-entropy of ``softmax(cos(v, C))`` against pseudo-labels.

    Prototypes enter as constants.
    """
    labels = torch.as_tensor(labels, dtype=torch.long, device=v.device)
    if v.shape[0] == 0:
        return v.sum() * 0.0
    sims = F.normalize(v, dim=1) @ F.normalize(prototypes.detach(), dim=1).T
    return F.cross_entropy(sims / temperature, labels)
