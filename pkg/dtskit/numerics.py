"""
Dense numerics substrate: float64 matrices, named RNG streams, a small
feed-forward network with exact reverse-mode gradients and SGD with momentum.
"""

import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from dtskit.errors import ArgumentError, DimensionError, TrainingDivergedError

DenseMatrix = npt.NDArray[np.float64]

ACTIVATIONS = ("tanh", "relu")


def as_matrix(values: npt.ArrayLike, name: str = "matrix") -> DenseMatrix:
    """Coerce to a finite row-major float64 2-D array."""
    matrix = np.ascontiguousarray(values, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ArgumentError(f"{name} contains non-finite entries")
    return matrix


def all_finite(*arrays: np.ndarray) -> bool:
    return all(bool(np.all(np.isfinite(a))) for a in arrays)


class Rng:
    """Seeded random stream identified by a slash-separated name.

    Equal (seed, stream) pairs produce equal draws regardless of which other
    streams were used before.
    """

    def __init__(self, seed: int, stream: str = "root") -> None:
        if seed < 0:
            raise ArgumentError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream = stream
        parts = stream.split("/")
        spawn_key = tuple(zlib.crc32(part.encode("utf-8")) for part in parts)
        sequence = np.random.SeedSequence(self.seed, spawn_key=spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def spawn(self, name: str) -> "Rng":
        """Independent child stream; does not advance this stream."""
        return Rng(self.seed, f"{self.stream}/{name}")

    def normal(self, rows: int, cols: int) -> DenseMatrix:
        return self.generator.standard_normal((rows, cols))

    def uniform(self, low: float, high: float, size: Tuple[int, ...]) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size: int) -> npt.NDArray[np.int64]:
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> npt.NDArray[np.int64]:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream!r})"


def softmax(logits: DenseMatrix) -> DenseMatrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def log_softmax(logits: DenseMatrix) -> DenseMatrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def binary_cross_entropy_with_logits(
    logits: DenseMatrix, targets: np.ndarray
) -> Tuple[float, DenseMatrix]:
    """Mean BCE of a single-logit column against 0/1 targets, with its gradient."""
    if logits.ndim != 2 or logits.shape[1] != 1:
        raise DimensionError(f"expected (N, 1) logits, got {logits.shape}")
    if logits.shape[0] == 0:
        raise ArgumentError("binary cross-entropy of an empty batch")
    z = logits[:, 0]
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise DimensionError(f"targets {y.shape} do not match logits {logits.shape}")
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = ((sigmoid(z) - y) / z.shape[0]).reshape(-1, 1)
    return float(losses.mean()), grad


@dataclass
class MlpCache:
    """Activations recorded by a forward pass, consumed by backward."""

    inputs: List[DenseMatrix]
    pre_activations: List[DenseMatrix]
    output: DenseMatrix


@dataclass
class MlpGradients:
    weights: List[DenseMatrix]
    biases: List[np.ndarray]
    input: DenseMatrix
    hidden_shifts: List[DenseMatrix]

    def flat(self) -> List[np.ndarray]:
        """Gradients in the same order as Mlp.parameters()."""
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class Mlp:
    """Fully connected network; hidden layers share one activation, the last
    layer is linear. Weights are stored (in, out) so a batch maps as x @ W + b.
    """

    widths: Tuple[int, ...]
    weights: List[DenseMatrix]
    biases: List[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ArgumentError(f"unknown activation {self.activation!r}")
        if len(self.widths) < 2:
            raise ArgumentError("an Mlp needs at least input and output widths")
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(
            self.weights
        ):
            raise DimensionError("layer count does not match widths")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.widths[k], self.widths[k + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise DimensionError(
                    f"layer {k}: weight {w.shape} / bias {b.shape}, expected {expected}"
                )

    @classmethod
    def create(cls, widths: Sequence[int], activation: str, rng: Rng) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        weights: List[DenseMatrix] = []
        biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(tuple(int(w) for w in widths), weights, biases, activation)

    @classmethod
    def zeros(cls, widths: Sequence[int], activation: str = "tanh") -> "Mlp":
        weights = [np.zeros((i, o)) for i, o in zip(widths[:-1], widths[1:])]
        biases = [np.zeros(o) for o in widths[1:]]
        return cls(tuple(int(w) for w in widths), weights, biases, activation)

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    @property
    def hidden_widths(self) -> Tuple[int, ...]:
        return self.widths[1:-1]

    def parameters(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def parameter_count(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.widths[:-1], self.widths[1:]))

    def copy(self) -> "Mlp":
        return Mlp(
            self.widths,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def _activate(self, z: DenseMatrix) -> DenseMatrix:
        if self.activation == "tanh":
            return np.tanh(z)
        return np.maximum(z, 0.0)

    def _activation_grad(self, z: DenseMatrix, a: DenseMatrix) -> DenseMatrix:
        if self.activation == "tanh":
            return 1.0 - a * a
        return (z > 0.0).astype(np.float64)

    def _check_input(self, batch: DenseMatrix) -> None:
        if batch.ndim != 2 or batch.shape[1] != self.input_width:
            raise DimensionError(
                f"batch shape {batch.shape} does not match net input width "
                f"{self.input_width} (widths {self.widths})"
            )

    def forward_cached(
        self,
        batch: DenseMatrix,
        hidden_shifts: Optional[Sequence[DenseMatrix]] = None,
    ) -> MlpCache:
        """Forward pass recording what backward needs.

        hidden_shifts, when given, holds one additive term per hidden layer,
        applied to that layer's pre-activation.
        """
        self._check_input(batch)
        n_hidden = len(self.hidden_widths)
        if hidden_shifts is not None and len(hidden_shifts) != n_hidden:
            raise DimensionError(
                f"expected {n_hidden} hidden shifts, got {len(hidden_shifts)}"
            )
        inputs: List[DenseMatrix] = []
        pre: List[DenseMatrix] = []
        a = batch
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w + b
            if k < n_hidden:
                if hidden_shifts is not None:
                    z = z + hidden_shifts[k]
                pre.append(z)
                a = self._activate(z)
            else:
                pre.append(z)
                a = z
        return MlpCache(inputs=inputs, pre_activations=pre, output=a)

    def forward(
        self,
        batch: DenseMatrix,
        hidden_shifts: Optional[Sequence[DenseMatrix]] = None,
    ) -> DenseMatrix:
        return self.forward_cached(batch, hidden_shifts).output

    def backward(self, cache: MlpCache, upstream: DenseMatrix) -> MlpGradients:
        """Exact reverse-mode gradients of sum(upstream * output)."""
        if upstream.shape != cache.output.shape:
            raise DimensionError(
                f"upstream gradient {upstream.shape} does not match output "
                f"{cache.output.shape}"
            )
        n_hidden = len(self.hidden_widths)
        grad_w: List[DenseMatrix] = [np.empty(0)] * len(self.weights)
        grad_b: List[np.ndarray] = [np.empty(0)] * len(self.biases)
        grad_shift: List[DenseMatrix] = [np.empty(0)] * n_hidden
        g = upstream
        for k in reversed(range(len(self.weights))):
            if k < n_hidden:
                z = cache.pre_activations[k]
                a = cache.inputs[k + 1]
                g = g * self._activation_grad(z, a)
                grad_shift[k] = g
            grad_w[k] = cache.inputs[k].T @ g
            grad_b[k] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return MlpGradients(grad_w, grad_b, g, grad_shift)


def mlp_forward(net: Mlp, batch: DenseMatrix) -> DenseMatrix:
    return net.forward(batch)


def mlp_backward(
    net: Mlp, batch: DenseMatrix, upstream_grad: DenseMatrix
) -> MlpGradients:
    return net.backward(net.forward_cached(batch), upstream_grad)


def annealed_lr(lr0: float, progress: float, a: float = 10.0, b: float = 0.75) -> float:
    """lr0 / (1 + a p)^b with p = step / total_steps."""
    return lr0 / (1.0 + a * progress) ** b


@dataclass
class SgdMomentum:
    """v <- m v + g, p <- p - lr v, with optional global-norm clipping of g."""

    lr: float
    momentum: float = 0.9
    clip_norm: Optional[float] = None
    velocities: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            raise ArgumentError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError(f"momentum must be in [0, 1), got {self.momentum}")

    def step(
        self,
        params: Sequence[np.ndarray],
        grads: Sequence[np.ndarray],
        lr: Optional[float] = None,
        step_index: int = 0,
    ) -> Sequence[np.ndarray]:
        """Apply one update in place and return the parameters."""
        if len(params) != len(grads):
            raise DimensionError(
                f"{len(params)} parameter tensors but {len(grads)} gradients"
            )
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise DimensionError(f"gradient {g.shape} does not match {p.shape}")
        if not all_finite(*grads):
            raise TrainingDivergedError("non-finite gradient", step_index)
        if not self.velocities:
            self.velocities = [np.zeros_like(p) for p in params]
        elif len(self.velocities) != len(params):
            raise DimensionError("optimizer was built for a different parameter list")

        scale = 1.0
        if self.clip_norm is not None:
            norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm

        rate = self.lr if lr is None else lr
        for p, g, v in zip(params, grads, self.velocities):
            v *= self.momentum
            v += scale * g if scale != 1.0 else g
            p -= rate * v
        return params


def sgd_step(
    opt: SgdMomentum, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]
) -> Sequence[np.ndarray]:
    return opt.step(params, grads)
