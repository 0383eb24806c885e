"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from ectextile import tensornet as tn

REL_TOL = 1e-5
ABS_FLOOR = 1e-7


def analytic_grads(loss_fn, params):
    for p in params:
        p.zero_grad()
    with tn.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]


def numeric_grad(loss_fn, param, h=1e-6, max_entries=None, rng=None):
    flat = param.value.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
    out = np.full(flat.size, np.nan)
    for k in idx:
        orig = flat[k]
        flat[k] = orig + h
        up = float(loss_fn().value)
        flat[k] = orig - h
        down = float(loss_fn().value)
        flat[k] = orig
        out[k] = (up - down) / (2 * h)
    return out.reshape(param.shape)


def worst_violation(loss_fn, params, h=1e-6, max_entries=None):
    """Largest |a - n| / (REL_TOL * max(|a|, |n|) + ABS_FLOOR); <= 1 passes."""
    grads = analytic_grads(loss_fn, params)
    worst = 0.0
    for p, g in zip(params, grads):
        num = numeric_grad(loss_fn, p, h, max_entries)
        mask = ~np.isnan(num)
        a, n = g[mask], num[mask]
        ratio = np.abs(a - n) / (REL_TOL * np.maximum(np.abs(a), np.abs(n)) + ABS_FLOOR)
        worst = max(worst, float(ratio.max(initial=0.0)))
    return worst
