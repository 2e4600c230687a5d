"""Shared test utilities: a registry of finite-difference gradient cases for
every differentiable primitive.  Each factory draws random inputs in [-2, 2]
(resampled away from relu/hinge kinks) and returns (forward, leaves, tol)."""

from __future__ import annotations

import numpy as np

from gumbel_mmt import autodiff as ad
from gumbel_mmt.autodiff import Tensor
from gumbel_mmt.gradcheck import gradient_error


def rand_tensor(rng, shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def rand_away_from_zero(rng, shape, gap=1e-3):
    x = rng.uniform(-2.0, 2.0, size=shape)
    while (np.abs(x) < gap).any():
        bad = np.abs(x) < gap
        x[bad] = rng.uniform(-2.0, 2.0, size=int(bad.sum()))
    return Tensor(x)


def _case_matmul(rng):
    a, b = rand_tensor(rng, (3, 4)), rand_tensor(rng, (4, 2))
    return lambda: ad.reduce_sum(ad.matmul(a, b)), [a, b], 1e-6


def _case_add(rng):
    a, b = rand_tensor(rng, (3, 3)), rand_tensor(rng, (3, 3))
    return lambda: ad.reduce_sum(ad.mul(ad.add(a, b), ad.add(a, b))), [a, b], 1e-4


def _case_sub(rng):
    a, b = rand_tensor(rng, (2, 5)), rand_tensor(rng, (2, 5))
    return lambda: ad.reduce_sum(ad.mul(ad.sub(a, b), a)), [a, b], 1e-4


def _case_mul(rng):
    a, b = rand_tensor(rng, (4, 3)), rand_tensor(rng, (4, 3))
    return lambda: ad.reduce_sum(ad.mul(a, b)), [a, b], 1e-4


def _case_scale(rng):
    x = rand_tensor(rng, (3, 4))
    c = float(rng.uniform(-2, 2))
    return lambda: ad.reduce_sum(ad.mul(ad.scale(x, c), x)), [x], 1e-4


def _case_add_scalar(rng):
    x = rand_tensor(rng, (6,))
    return lambda: ad.reduce_sum(ad.mul(ad.add_scalar(x, 1.5), x)), [x], 1e-4


def _case_add_bias(rng):
    x, b = rand_tensor(rng, (4, 3)), rand_tensor(rng, (3,))
    return lambda: ad.reduce_sum(ad.mul(ad.add_bias(x, b), ad.add_bias(x, b))), [x, b], 1e-4


def _case_relu(rng):
    x = rand_away_from_zero(rng, (5, 4))
    return lambda: ad.reduce_sum(ad.mul(ad.relu(x), x)), [x], 1e-4


def _case_sigmoid(rng):
    x = rand_tensor(rng, (4, 4))
    return lambda: ad.reduce_sum(ad.sigmoid(x)), [x], 1e-6


def _case_softplus(rng):
    x = rand_tensor(rng, (7,))
    return lambda: ad.reduce_sum(ad.softplus(x)), [x], 1e-4


def _case_softmax_rows(rng):
    x = rand_tensor(rng, (3, 5))
    w = Tensor(rng.uniform(-1, 1, size=(3, 5)))
    return lambda: ad.reduce_sum(ad.mul(ad.softmax_rows(x), w)), [x], 1e-4


def _case_layer_norm(rng):
    x = rand_tensor(rng, (3, 6))
    gain, bias = rand_tensor(rng, (6,)), rand_tensor(rng, (6,))
    return lambda: ad.reduce_sum(ad.mul(ad.layer_norm(x, gain, bias),
                                        ad.layer_norm(x, gain, bias))), [x, gain, bias], 1e-4


def _case_cross_entropy(rng):
    logits = rand_tensor(rng, (5, 7))
    targets = rng.integers(0, 7, size=5)
    targets[0] = 0  # exercise pad skipping
    return lambda: ad.cross_entropy(logits, targets, pad_id=0), [logits], 1e-5


def _case_cosine_similarity(rng):
    a, b = rand_tensor(rng, (6,)), rand_tensor(rng, (6,))
    return lambda: ad.cosine_similarity(a, b), [a, b], 1e-4


def _case_concat_cols(rng):
    a, b, c = rand_tensor(rng, (3, 2)), rand_tensor(rng, (3, 4)), rand_tensor(rng, (3, 1))
    w = Tensor(rng.uniform(-1, 1, size=(3, 7)))
    return lambda: ad.reduce_sum(ad.mul(ad.concat_cols([a, b, c]), w)), [a, b, c], 1e-4


def _case_reshape(rng):
    x = rand_tensor(rng, (3, 4))
    w = Tensor(rng.uniform(-1, 1, size=(2, 6)))
    return lambda: ad.reduce_sum(ad.mul(ad.reshape(x, (2, 6)), w)), [x], 1e-4


def _case_transpose2d(rng):
    x = rand_tensor(rng, (3, 4))
    w = Tensor(rng.uniform(-1, 1, size=(4, 3)))
    return lambda: ad.reduce_sum(ad.mul(ad.transpose2d(x), w)), [x], 1e-4


def _case_slice_rows(rng):
    x = rand_tensor(rng, (6, 3))
    w = Tensor(rng.uniform(-1, 1, size=(3, 3)))
    return lambda: ad.reduce_sum(ad.mul(ad.slice_rows(x, 1, 4), w)), [x], 1e-4


def _case_embedding_lookup(rng):
    table = rand_tensor(rng, (8, 4))
    ids = rng.integers(0, 8, size=5)
    w = Tensor(rng.uniform(-1, 1, size=(5, 4)))
    return lambda: ad.reduce_sum(ad.mul(ad.embedding_lookup(table, ids), w)), [table], 1e-4


def _case_reduce_sum(rng):
    x = rand_tensor(rng, (4, 5))
    return lambda: ad.mul(ad.reduce_sum(x), ad.reduce_sum(x)), [x], 1e-4


def _case_reduce_mean(rng):
    x = rand_tensor(rng, (4, 5))
    return lambda: ad.mul(ad.reduce_mean(x), ad.reduce_mean(x)), [x], 1e-4


def _case_mean_axis0(rng):
    x = rand_tensor(rng, (5, 3))
    w = Tensor(rng.uniform(-1, 1, size=(3,)))
    return lambda: ad.reduce_sum(ad.mul(ad.mean_axis0(x), w)), [x], 1e-4


def _case_mask_fill(rng):
    x = rand_tensor(rng, (4, 4))
    mask = rng.random((4, 4)) < 0.3
    return lambda: ad.reduce_sum(ad.sigmoid(ad.mask_fill(x, mask, -30.0))), [x], 1e-4


PRIMITIVE_CASES = {
    "matmul": _case_matmul,
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "add_scalar": _case_add_scalar,
    "add_bias": _case_add_bias,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "softplus": _case_softplus,
    "softmax_rows": _case_softmax_rows,
    "layer_norm": _case_layer_norm,
    "cross_entropy": _case_cross_entropy,
    "cosine_similarity": _case_cosine_similarity,
    "concat_cols": _case_concat_cols,
    "reshape": _case_reshape,
    "transpose2d": _case_transpose2d,
    "slice_rows": _case_slice_rows,
    "embedding_lookup": _case_embedding_lookup,
    "reduce_sum": _case_reduce_sum,
    "reduce_mean": _case_reduce_mean,
    "mean_axis0": _case_mean_axis0,
    "mask_fill": _case_mask_fill,
}


def check_primitive(name: str, n_cases: int, seed: int = 0) -> float:
    """Run n_cases random gradient checks for one primitive; returns the worst
    relative error seen (asserting each case against its tolerance)."""
    rng = np.random.default_rng([seed, hash(name) % (2 ** 32)])
    worst = 0.0
    for _ in range(n_cases):
        forward, leaves, tol = PRIMITIVE_CASES[name](rng)
        err = gradient_error(forward, leaves)
        assert err < tol, f"{name}: rel err {err:.3g} >= {tol}"
        worst = max(worst, err)
    return worst
