"""Central finite-difference gradient checks shared by the test modules."""

import numpy as np
import torch


def fd_compare(loss_fn, params, n_coords=200, h=1e-6, seed=0):
    """Analytic vs central-difference gradient on a random subset of coordinates.

    Returns (aggregate relative error, worst per-coordinate relative error over
    coordinates whose numeric gradient exceeds 1e-6, number compared).
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    flat = [(p, i) for p in params for i in range(p.numel())]
    analytic_all = torch.cat([torch.zeros(p.numel(), dtype=p.dtype) if p.grad is None else p.grad.reshape(-1) for p in params]).detach()
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)
    analytic, numeric = [], []
    with torch.no_grad():
        for k in picks:
            p, i = flat[k]
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + h
            up = loss_fn().item()
            view[i] = orig - h
            down = loss_fn().item()
            view[i] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(analytic_all[k].item())
    a, n = np.array(analytic), np.array(numeric)
    agg = np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-300)
    big = np.abs(n) > 1e-6
    worst = float(np.max(np.abs(a - n)[big] / np.abs(n)[big])) if big.any() else 0.0
    return float(agg), worst, int(big.sum())
