"""Small fully connected regressor trained with mini-batch Adam on MSE."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    init_seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if len(self.layer_widths) < 1 or min(self.layer_widths) < 1:
            raise ValueError("need at least one hidden layer of width >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def _act(name, z):
    return np.tanh(z) if name == "tanh" else np.maximum(z, 0.0)


def _act_grad(name, z, a):
    return 1.0 - a * a if name == "tanh" else (z > 0).astype(z.dtype)


@dataclass
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @classmethod
    def init(cls, n_in: int, spec: MlpSpec) -> "Mlp":
        rng = np.random.default_rng(spec.init_seed)
        sizes = [n_in, *spec.layer_widths, 1]
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            scale = math.sqrt(2.0 / a) if spec.activation == "relu" else math.sqrt(1.0 / a)
            ws.append(rng.standard_normal((a, b)) * scale)
            bs.append(np.zeros(b))
        return cls(ws, bs, spec.activation)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def forward(self, X: np.ndarray, keep: bool = False):
        a = X
        cache = [(None, X)]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            a = z if i == last else _act(self.activation, z)
            cache.append((z, a))
        out = a[:, 0]
        return (out, cache) if keep else out

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.forward(np.atleast_2d(X))

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray):
        """Mean squared error and its gradient for every parameter."""
        out, cache = self.forward(X, keep=True)
        n = X.shape[0]
        err = out - y
        loss = float(np.mean(err * err))
        delta = (2.0 / n) * err[:, None]
        grads_w, grads_b = [], []
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev = cache[i][1]
            grads_w.append(a_prev.T @ delta)
            grads_b.append(delta.sum(axis=0))
            if i:
                z, a = cache[i]
                delta = (delta @ self.weights[i].T) * _act_grad(self.activation, z, a)
        grads_w.reverse()
        grads_b.reverse()
        return loss, [g for wb in zip(grads_w, grads_b) for g in wb]

    def to_dict(self) -> dict:
        return {"activation": self.activation,
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        return cls([np.array(w, dtype=float) for w in d["weights"]],
                   [np.array(b, dtype=float) for b in d["biases"]], d["activation"])


def train(X: np.ndarray, y: np.ndarray, spec: MlpSpec) -> tuple[Mlp, list[float]]:
    """Fit an Mlp from a seeded initialisation; returns the net and per-epoch loss."""
    if len(X) == 0:
        raise ValueError("no training pairs")
    net = Mlp.init(X.shape[1], spec)
    params = net.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng(spec.init_seed + 1)
    history = []
    step = 0
    n = len(X)
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            loss, grads = net.loss_and_grads(X[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            total += loss * len(idx)
            step += 1
            c1 = 1 - b1**step
            c2 = 1 - b2**step
            for j, (p, g) in enumerate(zip(params, grads)):
                if spec.weight_decay and j % 2 == 0:
                    g = g + spec.weight_decay * p
                m[j] = b1 * m[j] + (1 - b1) * g
                v[j] = b2 * v[j] + (1 - b2) * g * g
                p -= spec.learning_rate * (m[j] / c1) / (np.sqrt(v[j] / c2) + eps)
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        history.append(epoch_loss)
    return net, history
