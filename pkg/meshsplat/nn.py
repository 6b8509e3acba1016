"""Small fully connected networks with hand-written backward passes, and Adam."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

ACTIVATIONS = ("none", "sigmoid", "tanh")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    return probs * (grad - np.sum(probs * grad, axis=axis, keepdims=True))


class Mlp:
    """ReLU network; parameters are stored as [W0, b0, W1, b1, ...] with W of shape (in, out)."""

    def __init__(
        self,
        widths: Sequence[int],
        output_activation: str = "none",
        output_scale: float = 1.0,
        rng: Optional[np.random.Generator] = None,
        zero_last: bool = False,
    ):
        if len(widths) < 2:
            raise ShapeError("an MLP needs at least input and output widths")
        if output_activation not in ACTIVATIONS:
            raise ShapeError(f"unknown output activation {output_activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = tuple(int(w) for w in widths)
        self.output_activation = output_activation
        self.output_scale = float(output_scale)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))
        if zero_last:
            self.params[-2][:] = 0.0
            self.params[-1][:] = 0.0

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def zero_(self) -> "Mlp":
        for p in self.params:
            p[:] = 0.0
        return self

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[-1] != self.widths[0]:
            raise ShapeError(f"expected input width {self.widths[0]}, got {h.shape[-1]}")
        inputs, pre = [], []
        for layer in range(self.n_layers):
            w, b = self.params[2 * layer], self.params[2 * layer + 1]
            inputs.append(h)
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if layer < self.n_layers - 1 else z
        if self.output_activation == "sigmoid":
            h = sigmoid(h)
        elif self.output_activation == "tanh":
            h = np.tanh(h)
        activated = h
        out = self.output_scale * activated
        cache = {"inputs": inputs, "pre": pre, "activated": activated, "squeeze": squeeze}
        return (out[0] if squeeze else out), cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: dict, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        grad = np.asarray(grad_out, dtype=np.float64)
        if cache["squeeze"]:
            grad = grad[None, :]
        if grad.shape != cache["activated"].shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match output {cache['activated'].shape}")
        grad = grad * self.output_scale
        act = cache["activated"]
        if self.output_activation == "sigmoid":
            grad = grad * act * (1.0 - act)
        elif self.output_activation == "tanh":
            grad = grad * (1.0 - act * act)
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for layer in reversed(range(self.n_layers)):
            if layer < self.n_layers - 1:
                grad = grad * (cache["pre"][layer] > 0.0)
            w = self.params[2 * layer]
            grads[2 * layer] = cache["inputs"][layer].T @ grad
            grads[2 * layer + 1] = grad.sum(axis=0)
            grad = grad @ w.T
        return grads, (grad[0] if cache["squeeze"] else grad)

    def named_parameters(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{i}": p for i, p in enumerate(self.params)}

    @staticmethod
    def named_gradients(prefix: str, grads: list[np.ndarray]) -> dict[str, np.ndarray]:
        return {f"{prefix}.{i}": g for i, g in enumerate(grads)}

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        if len(arrays) != len(self.params):
            raise ShapeError("parameter list length mismatch")
        for p, a in zip(self.params, arrays):
            if p.shape != np.shape(a):
                raise ShapeError(f"parameter shape {np.shape(a)} does not match {p.shape}")
            p[...] = a


def encode(x: np.ndarray, num_frequencies: int) -> np.ndarray:
    """[x, sin(2^j pi x), cos(2^j pi x)] blocks along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for j in range(num_frequencies):
        arg = (2.0**j) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def encode_backward(x: np.ndarray, num_frequencies: int, grad: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    out = grad[..., :d].copy()
    for j in range(num_frequencies):
        freq = (2.0**j) * np.pi
        g_sin = grad[..., d * (1 + 2 * j): d * (2 + 2 * j)]
        g_cos = grad[..., d * (2 + 2 * j): d * (3 + 2 * j)]
        out += freq * (np.cos(freq * x) * g_sin - np.sin(freq * x) * g_cos)
    return out


class PoseEncoder:
    """Control-point positions -> encoded -> width-64 hidden layer -> pose vector."""

    def __init__(self, n_points: int, dim: int = 32, hidden: int = 64, num_frequencies: int = 2,
                 rng: Optional[np.random.Generator] = None):
        self.n_points = n_points
        self.num_frequencies = num_frequencies
        in_width = 3 * n_points * (1 + 2 * num_frequencies)
        self.mlp = Mlp([in_width, hidden, dim], rng=rng)
        self.dim = dim

    def forward(self, positions: np.ndarray) -> tuple[np.ndarray, dict]:
        flat = np.asarray(positions, dtype=np.float64).reshape(-1)
        out, cache = self.mlp.forward(encode(flat, self.num_frequencies))
        return out, {"flat": flat, "mlp": cache}

    def backward(self, cache: dict, grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        grads, g_enc = self.mlp.backward(cache["mlp"], grad)
        g_flat = encode_backward(cache["flat"], self.num_frequencies, g_enc)
        return grads, g_flat.reshape(-1, 3)


@dataclass(frozen=True)
class LrSchedule:
    """Exponential decay from lr_start to lr_end over total_steps; constant when lr_end is None."""

    lr_start: float
    lr_end: Optional[float] = None
    total_steps: int = 1

    def at(self, step: int) -> float:
        if self.lr_end is None:
            return self.lr_start
        frac = min(max(step, 0), self.total_steps) / max(self.total_steps, 1)
        return float(self.lr_start * (self.lr_end / self.lr_start) ** frac)


class Adam:
    """Bias-corrected Adam over named parameters, one schedule per group.

    Moment buffers follow parameters that grow along their first axis
    (tree subdivision appends rows); new rows start with zero moments.
    """

    def __init__(self, schedules: dict[str, LrSchedule], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.schedules = dict(schedules)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def lr(self, group: str) -> float:
        return self.schedules[group].at(self.step_count)

    def _moments(self, name: str, param: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.m.get(name)
        if m is None:
            m = self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
        elif m.shape != param.shape:
            if m.shape[1:] != param.shape[1:] or m.shape[0] > param.shape[0]:
                raise ShapeError(f"parameter {name} changed shape {m.shape} -> {param.shape}")
            pad = [(0, param.shape[0] - m.shape[0])] + [(0, 0)] * (param.ndim - 1)
            m = self.m[name] = np.pad(m, pad)
            self.v[name] = np.pad(self.v[name], pad)
        return m, self.v[name]

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], groups: dict[str, str]) -> None:
        t = self.step_count + 1
        corr1 = 1.0 - self.beta1**t
        corr2 = 1.0 - self.beta2**t
        for name in sorted(grads):
            param, grad = params[name], grads[name]
            if grad.shape != param.shape:
                raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter {param.shape}")
            m, v = self._moments(name, param)
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            lr = self.lr(groups[name])
            param -= lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
        self.step_count = t
