"""Finite-difference checks of every differentiable op and of the full network loss."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .models import SmallConvNet

THRESHOLD = 1e-2
EPSILON = 1e-3


def _away_from_zero(rng, shape, margin=0.05):
    # relu/maxpool are not differentiable at kinks/ties; keep points 2*eps+ away
    mag = rng.uniform(margin, 1.5, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _cases(seed: int) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)))
    k = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5)
    b = Tensor(rng.standard_normal(4))
    r_conv = Tensor(rng.standard_normal((2, 4, 8, 8)))

    xr = Tensor(_away_from_zero(rng, (3, 7)))
    r_relu = Tensor(rng.standard_normal((3, 7)))

    # distinct values in every 2x2 window, separated by more than 2*eps
    pool = rng.permutation(np.arange(2 * 3 * 4 * 4)).reshape(2, 3, 4, 4) * 0.05
    xp = Tensor(pool)
    r_pool = Tensor(rng.standard_normal((2, 3, 2, 2)))

    xd = Tensor(rng.standard_normal((3, 5)))
    wd = Tensor(rng.standard_normal((5, 4)))
    bd = Tensor(rng.standard_normal(4))
    r_dense = Tensor(rng.standard_normal((3, 4)))

    logits = Tensor(rng.standard_normal((4, 12)) * 2)
    labels = rng.integers(0, 12, 4)
    base = rng.integers(0, 3, 4)

    img = Tensor(rng.uniform(0, 1, (2, 1, 3, 4)))
    offset = rng.uniform(0, 0.4, (2, 1, 3, 4)).astype(np.float32)
    mask = rng.random((2, 1, 3, 4)) < 0.4
    r_img = Tensor(rng.standard_normal((2, 1, 3, 4)))

    net = SmallConvNet(1, 8, 8, 3, 2, seed=seed)
    net_x = Tensor(rng.uniform(0, 1, (2, 1, 8, 8)))
    net_y = rng.integers(0, 6, 2)

    def net_loss_input(t):
        return ad.softmax_cross_entropy(net.frozen()(t), net_y)

    def net_loss_param(name):
        def f(t):
            view = net.frozen()
            view.params[name] = t
            return ad.softmax_cross_entropy(view(net_x), net_y)

        return lambda: grad_check(f, net.params[name], EPSILON, seed=seed)

    def proj(out, r):
        return (out * r).sum()

    return {
        "conv2d.input": lambda: grad_check(lambda t: proj(ad.conv2d(t, k, b, 1, 1), r_conv), x, EPSILON, seed=seed),
        "conv2d.kernel": lambda: grad_check(lambda t: proj(ad.conv2d(x, t, b, 1, 1), r_conv), k, EPSILON, seed=seed),
        "conv2d.bias": lambda: grad_check(lambda t: proj(ad.conv2d(x, k, t, 1, 1), r_conv), b, EPSILON, seed=seed),
        "relu": lambda: grad_check(lambda t: proj(ad.relu(t), r_relu), xr, EPSILON, seed=seed),
        "maxpool2d": lambda: grad_check(lambda t: proj(ad.maxpool2d(t, 2), r_pool), xp, EPSILON, seed=seed),
        "dense.input": lambda: grad_check(lambda t: proj(ad.dense(t, wd, bd), r_dense), xd, EPSILON, seed=seed),
        "dense.weight": lambda: grad_check(lambda t: proj(ad.dense(xd, t, bd), r_dense), wd, EPSILON, seed=seed),
        "dense.bias": lambda: grad_check(lambda t: proj(ad.dense(xd, wd, t), r_dense), bd, EPSILON, seed=seed),
        "softmax_cross_entropy": lambda: grad_check(lambda t: ad.softmax_cross_entropy(t, labels), logits, EPSILON, seed=seed),
        "marginal_cross_entropy": lambda: grad_check(lambda t: ad.marginal_cross_entropy(t, base, 4), logits, EPSILON, seed=seed),
        "shift_divide": lambda: grad_check(lambda t: proj(ad.shift_divide(t, offset, 1.4), r_img), img, EPSILON, seed=seed),
        "masked_fill": lambda: grad_check(lambda t: proj(ad.masked_fill(t, mask, 1.0), r_img), img, EPSILON, seed=seed),
        "mul": lambda: grad_check(lambda t: (t * t).sum(), xd, EPSILON, seed=seed),
        "smallconvnet.input": lambda: grad_check(net_loss_input, net_x, EPSILON, seed=seed),
        "smallconvnet.conv1": net_loss_param("conv1.weight"),
        "smallconvnet.fc2": net_loss_param("fc2.weight"),
    }


def run_suite(seeds: Iterable[int] = range(20)) -> dict[str, float]:
    """Worst relative error per check over all ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, check in _cases(seed).items():
            worst[name] = max(worst.get(name, 0.0), check())
    return worst
