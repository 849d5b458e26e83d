"""Hand-rolled neural network primitives with explicit backward passes.

Every layer exposes ``forward(x) -> (y, cache)`` and
``backward(dy, cache, grads) -> dx``; parameter gradients are *accumulated*
into ``grads`` under the layer's parameter names, so the same layer can be
applied at many time steps and its gradients summed.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

Params = dict[str, np.ndarray]


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class Module:
    """Owns a flat dict of named parameter arrays."""

    params: Params

    def zero_grads(self) -> Params:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


class Linear(Module):
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator):
        self.W, self.b = f"{name}.W", f"{name}.b"
        self.n_in, self.n_out = n_in, n_out
        self.params = {
            self.W: _glorot(rng, n_in, n_out, (n_in, n_out)),
            self.b: np.zeros(n_out),
        }

    def forward(self, x: np.ndarray):
        return x @ self.params[self.W] + self.params[self.b], x

    def backward(self, dy: np.ndarray, x: np.ndarray, grads: Params) -> np.ndarray:
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        grads[self.W] += x2.T @ dy2
        grads[self.b] += dy2.sum(axis=0)
        return dy @ self.params[self.W].T


class MLP(Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, name: str, n_in: int, n_hidden: int, n_out: int, rng):
        self.l1 = Linear(f"{name}.l1", n_in, n_hidden, rng)
        self.l2 = Linear(f"{name}.l2", n_hidden, n_out, rng)
        self.params = {**self.l1.params, **self.l2.params}
        self.l1.params = self.l2.params = self.params

    def forward(self, x):
        a, c1 = self.l1.forward(x)
        hid = np.maximum(a, 0.0)
        y, c2 = self.l2.forward(hid)
        return y, (c1, a, c2)

    def backward(self, dy, cache, grads):
        c1, a, c2 = cache
        dh = self.l2.backward(dy, c2, grads)
        dh = dh * (a > 0)
        return self.l1.backward(dh, c1, grads)


class Conv2d(Module):
    """3x3 convolution on channels-last maps, zero padding 1."""

    def __init__(self, name: str, c_in: int, c_out: int, stride: int, rng, k: int = 3):
        self.W, self.b = f"{name}.W", f"{name}.b"
        self.k, self.stride, self.pad = k, stride, k // 2
        self.c_in, self.c_out = c_in, c_out
        fan_in = k * k * c_in
        self._index_cache: dict = {}
        self.params = {
            self.W: _glorot(rng, fan_in, c_out, (fan_in, c_out)),
            self.b: np.zeros(c_out),
        }

    def out_size(self, size: int) -> int:
        return (size + 2 * self.pad - self.k) // self.stride + 1

    def _indices(self, h: int, w: int):
        key = (h, w)
        if key not in self._index_cache:
            p, k, s = self.pad, self.k, self.stride
            hp, wp = h + 2 * p, w + 2 * p
            ho, wo = self.out_size(h), self.out_size(w)
            rows = (np.arange(ho) * s)[:, None, None, None] + np.arange(k)[None, None, :, None]
            cols = (np.arange(wo) * s)[None, :, None, None] + np.arange(k)[None, None, None, :]
            idx = (rows * wp + cols).reshape(-1)  # (ho*wo*k*k,) into the padded map
            scatter = np.zeros((idx.size, hp * wp))
            scatter[np.arange(idx.size), idx] = 1.0
            self._index_cache[key] = (idx, scatter, ho, wo)
        return self._index_cache[key]

    def forward(self, x: np.ndarray):
        n, h, w, c = x.shape
        idx, _, ho, wo = self._indices(h, w)
        p = self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))).reshape(n, -1, c)
        cols = xp[:, idx, :].reshape(n, ho, wo, -1)
        y = cols @ self.params[self.W] + self.params[self.b]
        return y, (x.shape, cols)

    def backward(self, dy, cache, grads, need_dx: bool = True):
        shape, cols = cache
        n, h, w, c = shape
        grads[self.W] += cols.reshape(-1, cols.shape[-1]).T @ dy.reshape(-1, self.c_out)
        grads[self.b] += dy.reshape(-1, self.c_out).sum(axis=0)
        if not need_dx:
            return None
        _, scatter, ho, wo = self._indices(h, w)
        dcols = (dy @ self.params[self.W].T).reshape(n, -1, c)
        p = self.pad
        dxp = (dcols.transpose(0, 2, 1) @ scatter).reshape(n, c, h + 2 * p, w + 2 * p)
        return dxp[:, :, p : p + h, p : p + w].transpose(0, 2, 3, 1)


class GRUCell(Module):
    """Gated recurrent cell; gate order (reset, update, candidate).

    h' = (1 - u) * n + u * h, with n = tanh(Wx_n x + r * (Wh_n h + bh_n) + bx_n).
    """

    def __init__(self, name: str, n_in: int, n_hidden: int, rng):
        self.Wx, self.Wh = f"{name}.Wx", f"{name}.Wh"
        self.bx, self.bh = f"{name}.bx", f"{name}.bh"
        self.n_in, self.n_hidden = n_in, n_hidden
        H = n_hidden
        self.params = {
            self.Wx: _glorot(rng, n_in, H, (n_in, 3 * H)),
            self.Wh: np.concatenate(
                [np.linalg.qr(rng.standard_normal((H, H)))[0] for _ in range(3)], axis=1
            ),
            self.bx: np.zeros(3 * H),
            self.bh: np.zeros(3 * H),
        }

    def forward(self, x: np.ndarray, h: np.ndarray):
        P, H = self.params, self.n_hidden
        gx = x @ P[self.Wx] + P[self.bx]
        gh = h @ P[self.Wh] + P[self.bh]
        r = sigmoid(gx[:, :H] + gh[:, :H])
        u = sigmoid(gx[:, H : 2 * H] + gh[:, H : 2 * H])
        n = np.tanh(gx[:, 2 * H :] + r * gh[:, 2 * H :])
        h_new = (1.0 - u) * n + u * h
        return h_new, (x, h, r, u, n, gh[:, 2 * H :])

    def backward(self, dh_new, cache, grads):
        x, h, r, u, n, ghn = cache
        P = self.params
        dn = dh_new * (1.0 - u)
        du = dh_new * (h - n)
        dh = dh_new * u
        dn_pre = dn * (1.0 - n * n)
        du_pre = du * u * (1.0 - u)
        dr_pre = dn_pre * ghn * r * (1.0 - r)
        dgx = np.concatenate([dr_pre, du_pre, dn_pre], axis=1)
        dgh = np.concatenate([dr_pre, du_pre, dn_pre * r], axis=1)
        grads[self.Wx] += x.T @ dgx
        grads[self.bx] += dgx.sum(axis=0)
        grads[self.Wh] += h.T @ dgh
        grads[self.bh] += dgh.sum(axis=0)
        dx = dgx @ P[self.Wx].T
        dh = dh + dgh @ P[self.Wh].T
        return dx, dh


# ---------------------------------------------------------------------------
# Losses.  Each returns (loss per row, gradient w.r.t. the logits).


def categorical_nll(logits: np.ndarray, target: np.ndarray, floor: float = 0.0):
    """-ln p[target] where p = floor + (1 - C*floor) * softmax(logits).

    ``target`` holds class indices with shape ``logits.shape[:-1]``.
    """
    C = logits.shape[-1]
    q = softmax(logits)
    alpha = 1.0 - C * floor
    q_y = np.take_along_axis(q, target[..., None], axis=-1)[..., 0]
    p_y = floor + alpha * q_y
    loss = -np.log(p_y)
    w = (alpha * q_y / p_y)[..., None]
    grad = w * q
    np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], -1) - w, -1)
    return loss, grad


def bernoulli_nll(logits: np.ndarray, target: np.ndarray, floor: float = 0.0):
    """Elementwise -ln p(target) with p(1) = floor + (1 - 2*floor) * sigmoid(logits)."""
    s = sigmoid(logits)
    alpha = 1.0 - 2.0 * floor
    p1 = floor + alpha * s
    p0 = floor + alpha * (1.0 - s)
    ds = alpha * s * (1.0 - s)
    loss = np.where(target > 0, -np.log(p1), -np.log(p0))
    grad = np.where(target > 0, -ds / p1, ds / p0)
    return loss, grad


def squared_error(pred: np.ndarray, target: np.ndarray):
    """Squared Euclidean distance per row and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return (diff * diff).sum(axis=-1), 2.0 * diff


# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: Params, lr: float, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.clip_norm = clip_norm
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: Params) -> None:
        self.t += 1
        scale = 1.0
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            g = g * scale
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array(self.t)
        return out


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5,
                   idx: Iterable[tuple] | None = None) -> dict[tuple, float]:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place)."""
    out = {}
    for i in idx if idx is not None else np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + eps
        fp = f()
        arr[i] = old - eps
        fm = f()
        arr[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-8) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    return float((np.abs(analytic - numeric) / denom).max())


def bind(*modules: Module) -> Params:
    """Merge the modules' parameters into one dict shared by all of them."""
    merged: Params = {}
    for m in modules:
        clash = merged.keys() & m.params.keys()
        if clash:
            raise ValueError(f"duplicate parameter names {sorted(clash)}")
        merged.update(m.params)
    for m in modules:
        _rebind(m, merged)
    return merged


def _rebind(m: Module, merged: Params) -> None:
    m.params = merged
    for sub in ("l1", "l2"):
        if hasattr(m, sub):
            _rebind(getattr(m, sub), merged)


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}
