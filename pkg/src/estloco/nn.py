"""Fully connected ELU networks on flat parameter vectors, with exact backprop and Adam."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output; ELU on hidden layers, identity on the output."""

    widths: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 3:
            raise ValueError("an MLP needs an input, at least one hidden layer and an output")
        if min(widths) < 1:
            raise ValueError(f"all widths must be >= 1, got {widths}")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def layout(self) -> list:
        """Offsets of each layer's weight (in, out) and bias (out,) in the flat vector."""
        out, offset = [], 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            w = (offset, offset + a * b, (a, b))
            offset += a * b
            out.append((w, (offset, offset + b)))
            offset += b
        return out

    def unpack(self, params: np.ndarray) -> list:
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        return [(params[w0:w1].reshape(shape), params[b0:b1]) for (w0, w1, shape), (b0, b1) in self.layout()]


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(spec: MlpSpec, rng: np.random.Generator, hidden_gain: float = np.sqrt(2.0),
                output_gain: float = 0.01) -> np.ndarray:
    """Orthogonal weights (gain sqrt(2) hidden, 0.01 output) and zero biases."""
    params = np.zeros(spec.n_params)
    layout = spec.layout()
    for i, ((w0, w1, (a, b)), _) in enumerate(layout):
        gain = output_gain if i == len(layout) - 1 else hidden_gain
        params[w0:w1] = _orthogonal(rng, a, b, gain).ravel()
    return params


def elu(x: np.ndarray) -> np.ndarray:
    neg = np.minimum(x, 0.0)
    np.expm1(neg, out=neg)
    out = np.maximum(x, 0.0)
    out += neg
    return out


def elu_grad_from_output(h: np.ndarray) -> np.ndarray:
    """ELU derivative written through its output: 1 where positive, h + 1 elsewhere."""
    d = np.minimum(h, 0.0)
    d += 1.0
    return d


class ForwardCache(NamedTuple):
    inputs: list   # input to each layer (the previous layer's activation)


def forward(params: np.ndarray, spec: MlpSpec, x: np.ndarray, return_cache: bool = False):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {spec.n_in}")
    layers = spec.unpack(params)
    inputs = []
    h = x
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w
        z += b
        h = elu(z) if i < len(layers) - 1 else z
    if return_cache:
        return h, ForwardCache(inputs)
    return h


def backward(params: np.ndarray, spec: MlpSpec, cache: ForwardCache, grad_out: np.ndarray,
             need_input_grad: bool = True):
    """Reverse-mode pass: gradients w.r.t. the flat parameters and the input batch."""
    layers = spec.unpack(params)
    grad = np.zeros_like(params)
    g = np.asarray(grad_out, dtype=float)
    if g.shape[-1] != spec.n_out or g.shape[:-1] != cache.inputs[0].shape[:-1]:
        raise ValueError("cotangent shape does not match the network output")
    layout = spec.layout()
    grad_input = None
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        (w0, w1, _), (b0, b1) = layout[i]
        h = cache.inputs[i]
        grad[w0:w1] = (h.reshape(-1, h.shape[-1]).T @ g.reshape(-1, g.shape[-1])).ravel()
        grad[b0:b1] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        if i == 0 and not need_input_grad:
            break
        g = g @ w.T
        if i > 0:
            g *= elu_grad_from_output(h)
        else:
            grad_input = g
    return grad, grad_input


def input_gradient(params: np.ndarray, spec: MlpSpec, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _, cache = forward(params, spec, x, return_cache=True)
    return backward(params, spec, cache, grad_out)[1]


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 5e-4) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr)

    def with_lr(self, lr: float) -> "AdamState":
        return replace(self, lr=float(lr))


def adam_step(adam: AdamState, params: np.ndarray, gradient: np.ndarray):
    """Bias-corrected Adam; returns the new state and new parameters."""
    if gradient.shape != params.shape or adam.m.shape != params.shape:
        raise ValueError("gradient, moments and parameters must share a shape")
    t = adam.step + 1
    m = adam.beta1 * adam.m + (1 - adam.beta1) * gradient
    v = adam.beta2 * adam.v + (1 - adam.beta2) * gradient * gradient
    m_hat = m / (1 - adam.beta1 ** t)
    v_hat = v / (1 - adam.beta2 ** t)
    new_params = params - adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps)
    return replace(adam, m=m, v=v, step=t), new_params
