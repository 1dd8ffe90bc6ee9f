"""Dense float64 linear algebra helpers, seeded randomness and a gradient checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and rank 2.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

DEGENERATE_NORM = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 rank-2 array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass ``upstream`` where the forward input was positive, zero elsewhere."""
    if x.shape != upstream.shape:
        raise DimensionError(f"relu_backward shapes differ: {x.shape} vs {upstream.shape}")
    return np.where(x > 0.0, upstream, 0.0)


def softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    s = x / temperature
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    s = x / temperature
    s = s - s.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Divide each row by its Euclidean norm.

    Returns ``(normalized, degenerate)`` where ``degenerate`` is a boolean
    vector marking rows whose norm fell below ``DEGENERATE_NORM``; those rows
    come back as zeros.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    out = x / safe[:, None]
    out[degenerate] = 0.0
    return out, degenerate


def l2_normalize_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of row normalization at ``x``.

    Degenerate rows get zero gradient.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    y = x / safe[:, None]
    proj = np.einsum("ij,ij->i", y, upstream)
    grad = (upstream - y * proj[:, None]) / safe[:, None]
    grad[degenerate] = 0.0
    return grad


class RngState:
    """Seeded random stream.

    Backed by the Philox-4x64-10 counter-based generator: the state is a
    256-bit counter and a 128-bit key derived from ``seed`` through numpy's
    ``SeedSequence``. Every draw advances the counter, so the sequence is a
    pure function of the seed and the order of calls.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def child(self, tag: int) -> "RngState":
        """Independent stream derived from ``(seed, tag)``; does not advance this one."""
        child = RngState.__new__(RngState)
        child.seed = self.seed
        ss = np.random.SeedSequence([self.seed, int(tag)])
        child._gen = np.random.Generator(np.random.Philox(ss))
        return child

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * scale

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def choice_weighted(self, p: np.ndarray) -> int:
        return int(self._gen.choice(len(p), p=p))

    def random_raw(self, n: int) -> np.ndarray:
        """Raw 64-bit outputs, used to pin the stream in regression tests."""
        return self._gen.bit_generator.random_raw(n)


LossFn = Callable[[Sequence[np.ndarray]], tuple[float, Sequence[np.ndarray]]]


def finite_diff_check(loss_fn: LossFn, params: Sequence[np.ndarray], epsilon: float = 1e-5) -> float:
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` with one gradient per
    parameter. Parameters are perturbed on copies; the caller's arrays are
    left untouched. Returns the max over all entries of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    work = [np.array(p, dtype=np.float64, copy=True) for p in params]
    loss, grads = loss_fn(work)
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss}")
    if len(grads) != len(work):
        raise DimensionError(f"expected {len(work)} gradients, got {len(grads)}")
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(work, analytic):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = loss_fn(work)[0]
            flat[k] = orig - epsilon
            down = loss_fn(work)[0]
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"loss is not finite near entry {k}")
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(gflat[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
