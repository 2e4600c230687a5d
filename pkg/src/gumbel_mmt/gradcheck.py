"""Central finite-difference gradient checking.

``gradient_error`` rebuilds the forward pass from scratch for every probe, so
any stochastic pieces inside ``forward`` must be re-seeded by the caller
(e.g. construct a fresh NoiseSource with a fixed seed on each call).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff
from .autodiff import Tensor


def numeric_gradient(forward: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """d(forward)/d(leaf) by central differences, perturbing leaf.data in place."""
    flat = leaf.data.reshape(-1)
    out = np.zeros_like(flat)
    with autodiff.no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = forward().item()
            flat[i] = keep - h
            down = forward().item()
            flat[i] = keep
            out[i] = (up - down) / (2.0 * h)
    return out.reshape(leaf.shape)


def gradient_error(forward: Callable[[], Tensor], leaves: Sequence[Tensor],
                   h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error for each leaf is ||analytic - numeric||_inf normalised by the
    combined gradient magnitude, which keeps near-zero gradients from
    inflating the ratio.
    """
    for leaf in leaves:
        leaf.alloc_grad()
        leaf.zero_grad()
    autodiff.reset_tape()
    autodiff.backward(forward())
    analytic = [leaf.grad.copy() for leaf in leaves]
    autodiff.reset_tape()

    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        n = numeric_gradient(forward, leaf, h=h)
        scale = max(float(np.abs(a).max(initial=0.0)),
                    float(np.abs(n).max(initial=0.0)), 1e-8)
        worst = max(worst, float(np.abs(a - n).max(initial=0.0)) / scale)
    return worst
