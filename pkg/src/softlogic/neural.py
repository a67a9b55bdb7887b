"""Neural predicate providers: a softmax multilayer perceptron with manual backprop."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

PARAMS_MAGIC = b"NPRV"
PARAMS_VERSION = 1
HIDDEN_ACTIVATIONS = ("relu", "elu", "identity")


@dataclass(frozen=True)
class ProviderSpec:
    """Architecture of a provider.

    ``layers`` lists the widths of every affine layer after the input; the
    last one is the output width and must match the number of classes.
    """

    layers: tuple[int, ...]
    activations: tuple[str, ...]
    input_width: Optional[int] = None
    features: Optional[str] = None
    classes: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if not self.layers or any(n < 1 for n in self.layers):
            raise ValueError("layer widths must be positive")
        if len(self.activations) != len(self.layers):
            raise ValueError(
                f"{len(self.layers)} layers but {len(self.activations)} activations"
            )
        if self.activations[-1] != "softmax":
            raise ValueError("final activation must be softmax")
        bad = [a for a in self.activations[:-1] if a not in HIDDEN_ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown hidden activation(s) {bad}")
        if self.classes and len(self.classes) != self.layers[-1]:
            raise ValueError(
                f"output width {self.layers[-1]} but {len(self.classes)} classes"
            )

    @property
    def output_width(self) -> int:
        return self.layers[-1]


class Provider(Protocol):
    """Contract a neural predicate must satisfy."""

    output_width: int

    def forward(self, x: np.ndarray) -> np.ndarray: ...

    def backward(self, upstream: np.ndarray) -> None: ...

    def step(self, learning_rate: float) -> None: ...


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    return z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(float)
    if name == "elu":
        return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
    return np.ones_like(z)


class MLPProvider:
    """Multilayer perceptron ending in a softmax over ``spec.classes``."""

    def __init__(self, spec: ProviderSpec, input_width: Optional[int] = None):
        width = input_width if input_width is not None else spec.input_width
        if width is None:
            raise ValueError("input width unknown: set 'input' or supply features")
        if spec.input_width is not None and input_width is not None and spec.input_width != input_width:
            raise ValueError(f"input width {input_width} does not match spec {spec.input_width}")
        self.spec = spec
        self.input_width = int(width)
        self.output_width = spec.output_width
        rng = np.random.default_rng(spec.seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        fan_in = self.input_width
        for n in spec.layers:
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, n)))
            self.biases.append(rng.uniform(-bound, bound, size=n))
            fan_in = n
        self.grad_w = [np.zeros_like(w) for w in self.weights]
        self.grad_b = [np.zeros_like(b) for b in self.biases]
        self.step_count = 0
        self._cache = None

    # -- evaluation --------------------------------------------------------

    def _run(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.ndim != 2 or x2.shape[1] != self.input_width:
            raise ValueError(f"expected input width {self.input_width}, got shape {x.shape}")
        inputs, pre = [], []
        h = x2
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pre.append(z)
            h = softmax(z) if i == last else _act(self.spec.activations[i], z)
        return h, (inputs, pre, h, single)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without caching."""
        out, cache = self._run(x)
        return out[0] if cache[3] else out

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._cache = self._run(x)
        return out[0] if self._cache[3] else out

    def backward(self, upstream: np.ndarray) -> None:
        """Accumulate parameter gradients for upstream dL/d(output)."""
        if self._cache is None:
            raise RuntimeError("backward called without a preceding forward")
        inputs, pre, out, single = self._cache
        u = np.asarray(upstream, dtype=float)
        u = u[None, :] if single else u
        if u.shape != out.shape:
            raise ValueError(f"upstream shape {u.shape} does not match output {out.shape}")
        # softmax Jacobian-vector product
        delta = out * (u - (u * out).sum(axis=1, keepdims=True))
        for i in range(len(self.weights) - 1, -1, -1):
            self.grad_w[i] += inputs[i].T @ delta
            self.grad_b[i] += delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * _act_grad(self.spec.activations[i - 1], pre[i - 1])

    def zero_grad(self) -> None:
        for g in self.grad_w + self.grad_b:
            g.fill(0.0)

    def step(self, learning_rate: float) -> None:
        for w, g in zip(self.weights, self.grad_w):
            w -= learning_rate * g
        for b, g in zip(self.biases, self.grad_b):
            b -= learning_rate * g
        self.zero_grad()
        self.step_count += 1

    # -- flat parameter access ----------------------------------------------

    def parameters(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b.ravel()]
        return np.concatenate(parts)

    def gradients(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.grad_w, self.grad_b):
            parts += [w.ravel(), b.ravel()]
        return np.concatenate(parts)

    def set_parameters(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.parameters().size:
            raise ValueError(f"expected {self.parameters().size} parameters, got {flat.size}")
        i = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[i : i + w.size].reshape(w.shape)
            i += w.size
            b[...] = flat[i : i + b.size]
            i += b.size

    def to_bytes(self) -> bytes:
        return PARAMS_MAGIC + struct.pack("<I", PARAMS_VERSION) + self.parameters().astype("<f8").tobytes()

    def load_bytes(self, data: bytes) -> None:
        if data[:4] != PARAMS_MAGIC:
            raise ValueError("not a provider parameter file")
        (version,) = struct.unpack("<I", data[4:8])
        if version != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        self.set_parameters(np.frombuffer(data[8:], dtype="<f8"))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def load(self, path) -> None:
        with open(path, "rb") as fh:
            self.load_bytes(fh.read())
