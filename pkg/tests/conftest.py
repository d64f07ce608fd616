import numpy as np
import pytest

from smartfreeze import nn

L = nn.LayerSpec


def finite_difference_grads(layers, params, x, y, keys, h=1e-5):
    """Central-difference gradients of the mean CE loss; the independent
    oracle for every backward test."""

    def loss():
        return nn.loss_ce(nn.forward(layers, params, x)[-1], y)

    out = {}
    for (i, name) in keys:
        w = params[i][name]
        g = np.zeros_like(w)
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = w[idx]
            w[idx] = old + h
            lp = loss()
            w[idx] = old - h
            lm = loss()
            w[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        out[(i, name)] = g
    return out


def max_rel_err(analytic, numeric, floor=1e-6):
    worst = 0.0
    for k, ga in analytic.items():
        gn = numeric[k]
        denom = np.maximum(floor, np.maximum(np.abs(ga), np.abs(gn)))
        worst = max(worst, float(np.max(np.abs(ga - gn) / denom)))
    return worst


def tiny_conv_net():
    layers = [
        L("conv2d", (2, 3, 3, 1, 1)),
        L("relu"),
        L("maxpool2x2"),
        L("flatten"),
        L("dense", (3 * 2 * 2, 4)),
        L("relu"),
        L("dense", (4, 3)),
    ]
    return layers, (2, 4, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
