import numpy as np
import torch


def finite_difference_check(loss_fn, params, n_samples=100, seed=0, h=1e-6, floor=1e-7):
    """Worst relative error between autograd and central differences.

    ``n_samples`` scalar parameter entries are drawn (without replacement)
    across ``params``. Relative error is ``|a - f| / max(|a|, |f|, floor)``.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[i])
            p = params[i].view(-1)
            orig = p[j].item()
            p[j] = orig + h
            up = loss_fn().item()
            p[j] = orig - h
            down = loss_fn().item()
            p[j] = orig
            fd = (up - down) / (2 * h)
            an = grads[i].view(-1)[j].item()
            err = abs(an - fd) / max(abs(an), abs(fd), floor)
            worst = max(worst, err)
    return worst


def const_policy_bundle(policy, values, shape=(1, 1, 1)):
    """Bundle whose variant at angle k is a constant image of ``values[k]``."""
    from s3tta.augment import AugmentedBundle

    variants = {k: np.full(shape, v, dtype=np.float32) for k, v in enumerate(values)}
    return AugmentedBundle(policy, variants, shape[:2])
