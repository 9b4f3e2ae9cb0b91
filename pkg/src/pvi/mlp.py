"""Fully connected networks with hand-written reverse-mode products.

Parameters live in one flat vector. Layout, layer by layer: the weight
matrix of shape ``(fan_in, fan_out)`` in row-major order, then the bias of
length ``fan_out``. A layer maps ``x -> act(x @ W + b)``.

Every function accepts a single input of shape ``(d_in,)`` or a batch of
shape ``(n, d_in)``; parameter VJPs are summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_generator

ACTIVATIONS = ("leaky_relu", "relu", "identity")
OUTPUTS = ACTIVATIONS + ("softplus",)


@dataclass(frozen=True)
class MlpSpec:
    sizes: tuple[int, ...]
    activation: str = "leaky_relu"
    slope: float = 0.01
    output: str = "identity"
    eps: float = 1e-8  # added after a softplus output

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(s <= 0 for s in self.sizes):
            raise ValueError(f"layer sizes must be positive: {self.sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output not in OUTPUTS:
            raise ValueError(f"unknown output transform {self.output!r}")
        if not 0.0 < self.slope < 1.0:
            raise ValueError("leaky slope must lie in (0, 1)")

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    @property
    def d_out(self) -> int:
        return self.sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def layer_activation(self, i: int) -> str:
        return self.output if i == self.n_layers - 1 else self.activation


def nn(d_in: int, d_h: int, d_out: int, **kw) -> MlpSpec:
    """Two hidden layers of width ``d_h``: Linear, act, Linear, act, Linear."""
    return MlpSpec((d_in, d_h, d_h, d_out), **kw)


def unflatten(spec: MlpSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    flat = np.asarray(flat, dtype=float)
    if flat.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {flat.shape}")
    layers = []
    off = 0
    for a, b in zip(spec.sizes[:-1], spec.sizes[1:]):
        W = flat[off : off + a * b].reshape(a, b)
        off += a * b
        layers.append((W, flat[off : off + b]))
        off += b
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def init_params(spec: MlpSpec, rng) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    gen = as_generator(rng)
    layers = []
    for a, b in zip(spec.sizes[:-1], spec.sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        layers.append((gen.uniform(-lim, lim, size=(a, b)), np.zeros(b)))
    return flatten(layers)


def _act(name: str, u: np.ndarray, spec: MlpSpec) -> np.ndarray:
    if name == "identity":
        return u
    if name == "relu":
        return np.maximum(u, 0.0)
    if name == "leaky_relu":
        return np.where(u >= 0.0, u, spec.slope * u)
    return np.logaddexp(0.0, u) + spec.eps


def _act_grad(name: str, u: np.ndarray, spec: MlpSpec) -> np.ndarray:
    if name == "identity":
        return np.ones_like(u)
    if name == "relu":
        return (u >= 0.0).astype(float)
    if name == "leaky_relu":
        return np.where(u >= 0.0, 1.0, spec.slope)
    return 0.5 * (1.0 + np.tanh(0.5 * u))  # logistic sigmoid


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != spec.d_in:
        raise ValueError(f"input has shape {x.shape}, expected (..., {spec.d_in})")
    return x2, single


def _forward(spec, layers, x):
    pre = []
    h = x
    inputs = []
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        u = h @ W + b
        pre.append(u)
        h = _act(spec.layer_activation(i), u, spec)
    return h, inputs, pre


def forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    x2, single = _as_batch(spec, x)
    out, _, _ = _forward(spec, unflatten(spec, params), x2)
    return out[0] if single else out


def preactivations(spec: MlpSpec, params: np.ndarray, x) -> list[np.ndarray]:
    """Pre-activation values of every layer (useful to stay clear of kinks)."""
    x2, _ = _as_batch(spec, x)
    return _forward(spec, unflatten(spec, params), x2)[2]


def vjp(spec: MlpSpec, params: np.ndarray, x, cotangent, *, want_params=True, want_input=True):
    """Reverse pass. Returns ``(params_vjp, input_vjp)``; either may be None."""
    x2, single = _as_batch(spec, x)
    v = np.asarray(cotangent, dtype=float)
    v2 = v[None, :] if v.ndim == 1 else v
    if v2.shape != (x2.shape[0], spec.d_out):
        raise ValueError(f"cotangent has shape {v.shape}, expected (..., {spec.d_out})")
    layers = unflatten(spec, params)
    _, inputs, pre = _forward(spec, layers, x2)
    grads = [None] * spec.n_layers
    g = v2
    for i in range(spec.n_layers - 1, -1, -1):
        g = g * _act_grad(spec.layer_activation(i), pre[i], spec)
        if want_params:
            grads[i] = (inputs[i].T @ g, g.sum(axis=0))
        if i > 0 or want_input:
            g = g @ layers[i][0].T
    gp = flatten(grads) if want_params else None
    gi = (g[0] if single else g) if want_input else None
    return gp, gi


def vjp_params(spec: MlpSpec, params: np.ndarray, x, cotangent) -> np.ndarray:
    return vjp(spec, params, x, cotangent, want_input=False)[0]


def vjp_input(spec: MlpSpec, params: np.ndarray, x, cotangent) -> np.ndarray:
    return vjp(spec, params, x, cotangent, want_params=False)[1]
