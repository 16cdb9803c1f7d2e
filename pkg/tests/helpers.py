"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from stmgen.autodiff import Tensor


def fd_grad(fn, leaves, step=1e-5):
    """Central finite-difference gradients of scalar fn() w.r.t. each leaf.

    `fn` must recompute the loss from the current leaf values every call.
    Returns one numpy array per leaf. Leaves must be float64.
    """
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def check_grads(fn, leaves, rtol=1e-4, step=1e-5, max_entries=None, rng=None,
                atol=1e-8):
    """Run backward + finite differences and assert relative error < rtol.

    If `max_entries` is set, only a random subset of entries per leaf is
    finite-difference checked (backward still covers everything).
    """
    for leaf in leaves:
        leaf.grad = None
    loss = fn()
    loss.backward()
    analytic = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
                for leaf in leaves]

    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        gflat = ga.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            if max(abs(fd), abs(gflat[i])) < atol:
                continue   # both zero up to finite-difference noise
            denom = max(abs(fd), abs(gflat[i]), 1e-6)
            rel = abs(fd - gflat[i]) / denom
            assert rel < rtol, (
                f"grad mismatch at leaf entry {i}: analytic={gflat[i]}, fd={fd}, rel={rel}")


def param64(rng, *shape, scale=0.5):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)
