"""Central finite-difference check of the hand-written backward pass."""

import numpy as np

from oracles import conv2d_same
from uwaloc import nn

H = 1e-5
KINK_MARGIN = 1e-3


def tiny_spec(M=5, L=4, dropout=0.0, task="classifier"):
    return nn.ModelSpec(L=L, M=M, conv_channels=(3, 4, 3), kernel_sizes=(3, 5, 5), n_features=7,
                        dropout=dropout, task=task)


def min_preactivation(params, x):
    """Smallest |pre-activation| of any ReLU, from the loop-convolution oracle."""
    T = params.tensors
    h = np.asarray(x, dtype=float)
    margins = []
    for n in range(1, len(params.spec.kernel_sizes) + 1):
        z = conv2d_same(h, T[f"conv{n}.weight"], T[f"conv{n}.bias"])
        margins.append(np.abs(z).min())
        h = np.maximum(z, 0)
    flat = h.transpose(0, 2, 3, 1).reshape(h.shape[0], -1)
    margins.append(np.abs(flat @ T["fc.weight"] + T["fc.bias"]).min())
    return min(margins)


def random_case(seed, task="classifier"):
    """A random tiny net, batch and target whose ReLUs sit away from their kinks."""
    rng = np.random.default_rng(seed)
    for attempt in range(200):
        spec = tiny_spec(M=1 if task == "regressor" else 5, task=task)
        params = nn.init_params(spec, int(rng.integers(2**31)))
        for k, v in params.tensors.items():
            if k.endswith(".bias"):
                v[...] = rng.uniform(-0.3, 0.3, v.shape)
        x = rng.standard_normal((2, 2, spec.L, spec.L))
        if min_preactivation(params, x) > KINK_MARGIN:
            break
    else:  # pragma: no cover - a kink-free draw is found in a few attempts
        raise RuntimeError("no kink-free network found")
    if task == "regressor":
        y = rng.uniform(0, 1, (2, 1))
        loss = "mse"
    else:
        y = rng.dirichlet(np.ones(spec.M), size=2)
        loss = "ce"
    return params, x, y, loss


def loss_value(params, x, y, loss):
    out = nn.forward(params, x).logits
    if loss == "ce":
        return float(np.mean(nn.cross_entropy(y, out)))
    return float(np.mean((out[:, 0] - y[:, 0]) ** 2))


def max_relative_error(params, x, y, loss):
    """Largest relative deviation over every coordinate of every tensor."""
    _, grads = nn.loss_and_gradients(params, x, y, loss=loss)
    worst = 0.0
    for name, t in params.tensors.items():
        g = grads[name]
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + H
            lp = loss_value(params, x, y, loss)
            t[idx] = old - H
            lm = loss_value(params, x, y, loss)
            t[idx] = old
            num = (lp - lm) / (2 * H)
            scale = max(abs(num), abs(g[idx]), 1e-6)
            worst = max(worst, abs(num - g[idx]) / scale)
    return worst
