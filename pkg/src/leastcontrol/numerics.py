"""Dense linear algebra, activations and seeded stochastic helpers.

All numeric state in this library lives in float64 numpy arrays: vectors
are 1-D ``(n,)`` arrays and matrices are row-major 2-D ``(rows, cols)``
arrays.  Batches of vectors are stored column-wise as ``(n, B)`` so that
a single-sample vector is just the ``B=1`` case with the last axis
dropped.

Randomness goes through :class:`Rng`, a thin wrapper around numpy's
PCG64 counter-based generator.  Normal deviates use numpy's ziggurat
implementation.  Both choices are fixed here so that golden tests are
reproducible across platforms: the same seed always yields the same
stream.
"""

from __future__ import annotations

from enum import Enum

import numpy as np


class DimensionMismatch(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce ``x`` to a finite float64 1-D array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return v


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite float64 2-D array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return m


def require_finite(x: np.ndarray, context: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {context}")
    return x


def gemv(a: np.ndarray, x: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Matrix-vector product ``A x`` or ``A^T x`` with explicit shape checks.

    ``x`` may also be a ``(k, B)`` batch of column vectors, in which case
    the result is the corresponding batch.
    """
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"gemv expects a 2-D matrix, got shape {a.shape}")
    expected = a.shape[0] if transpose else a.shape[1]
    if x.shape[0] != expected:
        raise DimensionMismatch(
            f"gemv: matrix {a.shape}{'^T' if transpose else ''} cannot act on "
            f"vector of length {x.shape[0]}"
        )
    return (a.T if transpose else a) @ x


class Activation(Enum):
    """Pointwise nonlinearity of the network state.

    ``SOFTMAX`` is only valid inside the cross-entropy loss composition
    and has no standalone derivative here.
    """

    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"
    SOFTMAX = "softmax"


def activation_apply(kind: Activation, phi: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return np.tanh(phi)
    if kind is Activation.RELU:
        return np.maximum(phi, 0.0)
    if kind is Activation.IDENTITY:
        return np.array(phi, dtype=np.float64, copy=True)
    raise ValueError(f"{kind} cannot be applied as a state activation")


def activation_deriv(kind: Activation, phi: np.ndarray) -> np.ndarray:
    """Diagonal of the activation Jacobian, evaluated elementwise at ``phi``."""
    if kind is Activation.TANH:
        t = np.tanh(phi)
        return 1.0 - t * t
    if kind is Activation.RELU:
        return (np.asarray(phi) > 0.0).astype(np.float64)
    if kind is Activation.IDENTITY:
        return np.ones_like(np.asarray(phi, dtype=np.float64))
    raise ValueError(f"{kind} has no standalone derivative")


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over axis 0 (works on ``(c,)`` or ``(c, B)``)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=0, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=0, keepdims=True)


class Rng:
    """Seeded random stream (PCG64).  Same seed, same draws, any platform."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def split(self, salt: int) -> "Rng":
        """Derive an independent stream; deterministic in (seed, salt)."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + salt) % (2**63))


def ou_step(eps: np.ndarray, tau_eps: float, dt: float, rng: Rng) -> np.ndarray:
    """One Euler-Maruyama step of unit-scale Ornstein-Uhlenbeck noise.

    eps_next = eps + (dt / tau_eps) * (-eps + dxi / sqrt(dt)),
    dxi ~ N(0, Id) drawn fresh each call.  The stationary variance of the
    continuous process is 1 / (2 tau_eps).
    """
    if dt <= 0.0 or tau_eps <= 0.0:
        raise ValueError("ou_step requires dt > 0 and tau_eps > 0")
    eps = np.asarray(eps, dtype=np.float64)
    dxi = rng.normal(eps.shape)
    return eps + (dt / tau_eps) * (-eps + dxi / np.sqrt(dt))


MAX_DENSE_SOLVE_DIM = 256


def lu_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A z = b`` by partial-pivot LU (LAPACK dgesv via numpy).

    Reserved for oracles and verification on small systems; training
    paths never invert matrices.
    """
    a = as_matrix(a, "lu_solve lhs")
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"lu_solve needs a square matrix, got {a.shape}")
    assert a.shape[0] <= MAX_DENSE_SOLVE_DIM, "dense solves are capped at n=256"
    try:
        z = np.linalg.solve(a, np.asarray(b, dtype=np.float64))
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError(f"singular system in lu_solve: {err}") from err
    return require_finite(z, "lu_solve result")


def spectral_norm_estimate(a: np.ndarray, rng: Rng, iters: int = 50) -> float:
    """Power-iteration estimate of the largest singular value of ``a``."""
    a = np.asarray(a, dtype=np.float64)
    v = rng.normal((a.shape[1],))
    v /= np.linalg.norm(v) + 1e-30
    sigma = 0.0
    for _ in range(iters):
        w = a @ v
        v = a.T @ w
        nv = np.linalg.norm(v)
        if nv < 1e-30:
            return 0.0
        v /= nv
        sigma = np.sqrt(nv)
    return float(sigma)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity between two flattened arrays (0 if either is 0)."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))
