"""Small float64 numeric kernel with hand-written backward passes.

Layers follow a forward/backward convention: ``forward`` returns the output
and a cache, ``backward`` takes the cache and the upstream gradient and
accumulates parameter gradients in place, returning the input gradient.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-12


class NumericError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


class TrainingError(NumericError):
    pass


def sub_seed(seed: int, purpose: str) -> int:
    """Derive a named 64-bit sub-seed so every stage can be reproduced alone."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, purpose: str | None = None) -> np.random.Generator:
    s = seed if purpose is None else sub_seed(seed, purpose)
    return np.random.default_rng(s)


def xavier_uniform(rows: int, cols: int, seed: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"xavier_uniform needs positive dims, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    return make_rng(seed).uniform(-bound, bound, size=(rows, cols))


@dataclass
class Param:
    """A trainable tensor with its gradient and Adam moment buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)


def adam_step(p: Param, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update of ``p``; the gradient is zeroed afterwards."""
    g = p.grad
    if not np.all(np.isfinite(g)):
        bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        raise TrainingError(
            f"non-finite gradient in {p.name!r} at step {p.step_count + 1} ({bad} entries)"
        )
    p.step_count += 1
    t = p.step_count
    p.adam_m *= beta1
    p.adam_m += (1.0 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1.0 - beta2) * g * g
    m_hat = p.adam_m / (1.0 - beta1**t)
    v_hat = p.adam_v / (1.0 - beta2**t)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    p.zero_grad()


class Dense:
    """Affine layer ``Y = X @ W.T + b`` with optional ReLU."""

    def __init__(self, name: str, in_dim: int, out_dim: int, seed: int, relu: bool):
        self.W = Param(f"{name}.weight", xavier_uniform(out_dim, in_dim, seed))
        self.b = Param(f"{name}.bias", np.zeros(out_dim))
        self.relu = relu

    @property
    def params(self) -> list[Param]:
        return [self.W, self.b]

    def forward(self, X: np.ndarray):
        Y, cache = dense_forward(self.W.value, self.b.value, X, self.relu)
        return Y, cache

    def backward(self, cache, dY: np.ndarray) -> np.ndarray:
        dW, db, dX = dense_backward(cache, dY)
        self.W.grad += dW
        self.b.grad += db
        return dX


def dense_forward(W: np.ndarray, b: np.ndarray, X: np.ndarray, relu: bool):
    if X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ValueError(f"input shape {X.shape} does not match weight {W.shape}")
    if b.shape != (W.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match weight {W.shape}")
    Z = X @ W.T + b
    Y = np.maximum(Z, 0.0) if relu else Z
    return Y, (W, X, Z, relu)


def dense_backward(cache, dY: np.ndarray):
    W, X, Z, relu = cache
    if dY.shape != Z.shape:
        raise ValueError(f"upstream gradient {dY.shape} does not match output {Z.shape}")
    dZ = dY * (Z > 0.0) if relu else dY
    dW = dZ.T @ X
    db = dZ.sum(axis=0)
    dX = dZ @ W
    return dW, db, dX


class Embedding:
    """Lookup table; row 0 is the UNKNOWN slot of the matching vocabulary."""

    def __init__(self, name: str, num: int, dim: int, seed: int):
        self.table = Param(f"{name}.weight", xavier_uniform(num, dim, seed))

    @property
    def params(self) -> list[Param]:
        return [self.table]

    @property
    def num(self) -> int:
        return self.table.value.shape[0]

    def forward(self, idx: np.ndarray):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num):
            raise IndexError(
                f"{self.table.name}: index outside [0, {self.num}) "
                f"(min {idx.min()}, max {idx.max()})"
            )
        return self.table.value[idx], idx

    def backward(self, idx: np.ndarray, dY: np.ndarray) -> None:
        np.add.at(self.table.grad, idx, dY)


def l2_normalize_rows(X: np.ndarray, eps: float = NORM_EPS):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    denom = np.maximum(norms, eps)
    Y = X / denom
    return Y, (Y, denom)


def l2_normalize_backward(cache, dY: np.ndarray) -> np.ndarray:
    Y, denom = cache
    # rows clamped by eps are a plain scaling by 1/eps
    clamped = denom[:, 0] <= NORM_EPS
    dX = (dY - Y * np.sum(Y * dY, axis=1, keepdims=True)) / denom
    if np.any(clamped):
        dX[clamped] = dY[clamped] / denom[clamped]
    return dX


def singular_values(X: np.ndarray) -> np.ndarray:
    """Singular values in descending order."""
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise NumericError("singular_values: matrix has non-finite entries")
    try:
        s = np.linalg.svd(X, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge for {X.shape} matrix: {exc}") from exc
    return np.sort(s)[::-1]
