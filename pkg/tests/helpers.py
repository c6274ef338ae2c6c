"""Shared independent oracles and gradient-check utilities for the test suite.

Everything here is deliberately written with plain loops so it cannot share a
bug with the vectorized implementations it checks.
"""

from __future__ import annotations

import numpy as np

from rrwnet.autodiff import Tensor


def naive_conv2d(x, w, b):
    """Sliding-window cross-correlation with zero padding k//2, nested loops."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    pad = kh // 2
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((cout, h, wd), dtype=x.dtype)
    for o in range(cout):
        for y in range(h):
            for z in range(wd):
                acc = 0.0
                for i in range(cin):
                    for dy in range(kh):
                        for dx in range(kw):
                            acc += w[o, i, dy, dx] * xp[i, y + dy, z + dx]
                out[o, y, z] = acc + b[o]
    return out


def naive_max_pool2(x):
    """Exhaustive 2x2 window max."""
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2), dtype=x.dtype)
    for i in range(c):
        for y in range(h // 2):
            for z in range(w // 2):
                out[i, y, z] = max(x[i, 2 * y, 2 * z], x[i, 2 * y, 2 * z + 1],
                                   x[i, 2 * y + 1, 2 * z], x[i, 2 * y + 1, 2 * z + 1])
    return out


def finite_difference_grad(scalar_fn, leaf: Tensor, eps=1e-6, indices=None):
    """Central finite differences of ``scalar_fn()`` w.r.t. ``leaf.data``.

    ``scalar_fn`` must re-run the full forward pass reading ``leaf.data``.
    Returns a dict {flat_index: derivative} for the requested indices (all by
    default). Use float64 leaves for meaningful comparisons.
    """
    flat = leaf.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grads = {}
    for idx in indices:
        orig = flat[idx]
        flat[idx] = orig + eps
        up = scalar_fn()
        flat[idx] = orig - eps
        down = scalar_fn()
        flat[idx] = orig
        grads[idx] = (up - down) / (2.0 * eps)
    return grads


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def check_gradients(build_loss, leaves, rng, eps=1e-6, tol=1e-4, max_per_leaf=None):
    """Assert analytic grads match central differences for every leaf.

    ``build_loss`` takes no arguments and returns a scalar Tensor built from
    the (float64) ``leaves``. Returns the worst relative error observed.
    """
    loss = build_loss()
    for leaf in leaves:
        leaf.grad = None
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf did not receive a gradient"
        n = leaf.data.size
        if max_per_leaf is not None and n > max_per_leaf:
            idx = rng.choice(n, size=max_per_leaf, replace=False)
        else:
            idx = range(n)
        numeric = finite_difference_grad(lambda: build_loss().item(), leaf,
                                         eps=eps, indices=idx)
        analytic = leaf.grad.reshape(-1)
        for i, fd in numeric.items():
            err = relative_error(float(analytic[i]), fd)
            worst = max(worst, err)
            assert err < tol, (
                f"gradient mismatch at flat index {i}: "
                f"analytic {analytic[i]!r} vs numeric {fd!r} (rel err {err:.3g})")
    return worst
