"""Finite-difference gradient checks shared by the test modules."""

import math

import numpy as np
import torch


def _central(fn, view, i, h):
    old = float(view[i])
    with torch.no_grad():
        view[i] = old + h
        up = float(fn())
        view[i] = old - h
        dn = float(fn())
        view[i] = old
    return (up - dn) / (2 * h)


def fd_relative_error(fn, params, n=50, h=1e-4, seed=0, floor=1e-5):
    """Worst relative error between autograd and Richardson-extrapolated central differences.

    Denominators are floored at ``floor`` so that structurally zero gradients
    (e.g. attention key biases) are compared against round-off in absolute terms.
    Each coordinate is also retried with a step ten times smaller, since a ReLU
    kink inside the stencil makes the larger step meaningless.
    """
    rng = np.random.default_rng(seed)
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    flat = [(p, g, i) for p, g in zip(params, grads) for i in range(p.numel())]
    picks = rng.choice(len(flat), size=min(n, len(flat)), replace=False)
    worst = 0.0
    for j in picks:
        p, g, i = flat[j]
        view = p.data.view(-1)
        an = 0.0 if g is None else float(g.view(-1)[i])
        err = math.inf
        for step in (h, h / 10):
            fd = (4 * _central(fn, view, i, step / 2) - _central(fn, view, i, step)) / 3
            err = min(err, abs(fd - an) / max(floor, abs(fd), abs(an)))
            if err <= 1e-6:
                break
        worst = max(worst, err)
    return worst
