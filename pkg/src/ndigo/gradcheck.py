"""Finite-difference checks for every hand-written layer and loss.

Each checker builds a random small instance from ``seed``, forms a scalar
objective and returns the worst relative error between the backward pass and
central differences over all parameters and inputs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .nn import (
    MLP,
    Conv2d,
    GRUCell,
    Linear,
    Params,
    bernoulli_nll,
    categorical_nll,
    max_relative_error,
    numerical_grad,
    squared_error,
)

FD_EPS = 1e-5
ATOL = 1e-7


def _compare(f: Callable[[], float], arrays: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
             rng: np.random.Generator, max_entries: int = 40, atol: float = ATOL) -> float:
    worst = 0.0
    for name, arr in arrays.items():
        flat = list(np.ndindex(arr.shape))
        if len(flat) > max_entries:
            pick = rng.choice(len(flat), size=max_entries, replace=False)
            flat = [flat[i] for i in pick]
        num = numerical_grad(f, arr, FD_EPS, flat)
        a = np.array([analytic[name][i] for i in flat])
        n = np.array([num[i] for i in flat])
        worst = max(worst, max_relative_error(a, n, atol))
    return worst


def _zero(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_linear(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n_in, n_out, N = rng.integers(2, 7, size=3)
    layer = Linear("lin", n_in, n_out, rng)
    layer.params["lin.b"][...] = rng.standard_normal(n_out)
    x = rng.standard_normal((N, n_in))
    w = rng.standard_normal((N, n_out))
    f = lambda: float((layer.forward(x)[0] * w).sum())  # noqa: E731
    grads = _zero(layer.params)
    y, cache = layer.forward(x)
    dx = layer.backward(w, cache, grads)
    return _compare(f, {**layer.params, "x": x}, {**grads, "x": dx}, rng)


def check_mlp(seed: int) -> float:
    rng = np.random.default_rng(seed)
    n_in, n_hid, n_out, N = rng.integers(2, 7, size=4)
    mlp = MLP("mlp", n_in, n_hid, n_out, rng)
    mlp.params["mlp.l1.b"][...] = 0.1 * rng.standard_normal(n_hid)
    x = rng.standard_normal((N, n_in))
    w = rng.standard_normal((N, n_out))
    f = lambda: float((mlp.forward(x)[0] * w).sum())  # noqa: E731
    grads = _zero(mlp.params)
    _, cache = mlp.forward(x)
    dx = mlp.backward(w, cache, grads)
    return _compare(f, {**mlp.params, "x": x}, {**grads, "x": dx}, rng)


def check_conv(seed: int, stride: int | None = None) -> float:
    rng = np.random.default_rng(seed)
    stride = stride or int(rng.integers(1, 3))
    c_in, c_out = rng.integers(1, 4, size=2)
    h, w_ = rng.integers(3, 7, size=2)
    conv = Conv2d("conv", c_in, c_out, stride, rng)
    conv.params["conv.b"][...] = rng.standard_normal(c_out)
    x = rng.standard_normal((2, h, w_, c_in))
    y, _ = conv.forward(x)
    w = rng.standard_normal(y.shape)
    f = lambda: float((conv.forward(x)[0] * w).sum())  # noqa: E731
    grads = _zero(conv.params)
    _, cache = conv.forward(x)
    dx = conv.backward(w, cache, grads)
    return _compare(f, {**conv.params, "x": x}, {**grads, "x": dx}, rng)


def check_gru(seed: int, steps: int = 3) -> float:
    """Unrolled over a few steps so the recurrent path is exercised."""
    rng = np.random.default_rng(seed)
    n_in, H, N = rng.integers(2, 6, size=3)
    cell = GRUCell("gru", n_in, H, rng)
    for k in ("gru.bx", "gru.bh"):
        cell.params[k][...] = 0.3 * rng.standard_normal(3 * H)
    xs = rng.standard_normal((steps, N, n_in))
    h0 = rng.standard_normal((N, H))
    ws = rng.standard_normal((steps, N, H))

    def f():
        h, total = h0, 0.0
        for t in range(steps):
            h, _ = cell.forward(xs[t], h)
            total += float((h * ws[t]).sum())
        return total

    grads = _zero(cell.params)
    h, caches = h0, []
    for t in range(steps):
        h, c = cell.forward(xs[t], h)
        caches.append(c)
    dh = np.zeros_like(h0)
    dxs = np.zeros_like(xs)
    for t in range(steps - 1, -1, -1):
        dxs[t], dh = cell.backward(ws[t] + dh, caches[t], grads)
    return _compare(f, {**cell.params, "x": xs, "h0": h0}, {**grads, "x": dxs, "h0": dh}, rng)


def check_softmax_xent(seed: int) -> float:
    rng = np.random.default_rng(seed)
    N, C = rng.integers(1, 6), rng.integers(2, 30)
    floor = float(rng.choice([0.0, 1e-6, 1e-3]))
    logits = 2.0 * rng.standard_normal((N, C))
    target = rng.integers(C, size=N)
    f = lambda: float(categorical_nll(logits, target, floor)[0].sum())  # noqa: E731
    _, g = categorical_nll(logits, target, floor)
    return _compare(f, {"logits": logits}, {"logits": g}, rng)


def check_bernoulli_xent(seed: int) -> float:
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 26)))
    floor = float(rng.choice([0.0, 1e-6, 1e-3]))
    logits = 2.0 * rng.standard_normal(shape)
    target = (rng.random(shape) < 0.5).astype(np.float64)
    f = lambda: float(bernoulli_nll(logits, target, floor)[0].sum())  # noqa: E731
    _, g = bernoulli_nll(logits, target, floor)
    return _compare(f, {"logits": logits}, {"logits": g}, rng)


def check_l2(seed: int) -> float:
    rng = np.random.default_rng(seed)
    N, D = rng.integers(1, 6, size=2)
    pred = rng.standard_normal((N, D))
    target = rng.standard_normal((N, D))
    f = lambda: float(squared_error(pred, target)[0].sum())  # noqa: E731
    _, g = squared_error(pred, target)
    return _compare(f, {"pred": pred}, {"pred": g}, rng)


LAYER_CHECKS: dict[str, Callable[[int], float]] = {
    "linear": check_linear,
    "mlp": check_mlp,
    "conv_stride1": lambda s: check_conv(s, 1),
    "conv_stride2": lambda s: check_conv(s, 2),
    "gru": check_gru,
    "softmax_xent": check_softmax_xent,
    "bernoulli_xent": check_bernoulli_xent,
    "l2": check_l2,
}


def check_params(loss_fn: Callable[[], float], params: Params, grads: Params, seed: int = 0,
                 per_tensor: int = 6) -> float:
    """Spot-check ``grads`` of a whole model against ``loss_fn`` on a few entries per tensor.

    Whole-model losses are large sums, so central differences carry round-off
    of about eps_mach |f| / h.  The relative error's denominator is floored at
    1e4 times that level, i.e. gradients below it are compared absolutely.
    """
    rng = np.random.default_rng(seed)
    noise = np.finfo(np.float64).eps * abs(loss_fn()) / FD_EPS
    return _compare(loss_fn, params, grads, rng, max_entries=per_tensor, atol=max(ATOL, 1e4 * noise))
