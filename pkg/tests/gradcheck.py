"""Central finite differences for scalar torch functions."""

import numpy as np
import torch


def fd_gradient(fn, x, h=1e-6):
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(x).item()
        flat[i] = old - h
        down = fn(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(fn, x):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach()
    numeric = fd_gradient(fn, x)
    scale = max(float(numeric.norm()), float(analytic.norm()), 1e-12)
    return float((analytic - numeric).norm()) / scale


def random_unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return torch.tensor(x / np.linalg.norm(x, axis=1, keepdims=True), dtype=torch.float64)
