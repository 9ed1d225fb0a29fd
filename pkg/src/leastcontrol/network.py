"""Equilibrium network model, structural variants and losses.

The core object is a leaky recurrent cell

    d(phi)/dt = f(phi, theta) = -phi + W sigma(phi) + U x + b

whose fixed point ``phi*`` (where ``f`` vanishes) is the network's
output state.  Outputs are always the trailing ``c`` units of ``phi``.
Two structural variants are built on top of the dense cell:

* layered feedforward networks, where a block mask on ``W``/``U`` makes
  the fixed point coincide with an ordinary forward pass, and
* decoder-absorbing augmentation, which appends ``c`` linear readout
  units fed by a trained matrix inside ``W`` so that the loss never
  depends on the parameters directly.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from leastcontrol.numerics import (
    Activation,
    DimensionMismatch,
    Rng,
    activation_apply,
    activation_deriv,
    as_matrix,
    as_vector,
    gemv,
    softmax,
    spectral_norm_estimate,
)

CHECKPOINT_MAGIC = b"LCPNET1\x00"


@dataclass
class EquilibriumNetwork:
    """Parameters and structure of one equilibrium cell.

    ``w_mask``/``u_mask`` are 0/1 arrays marking which entries are
    allowed to be nonzero; masked entries stay exactly zero through
    every update.  ``layer_sizes`` records the feedforward layout when
    the mask encodes one.  ``decoder_units`` counts trailing readout
    units appended by :func:`absorb_decoder`.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    activation: Activation
    output_dim: int
    w_mask: np.ndarray | None = None
    u_mask: np.ndarray | None = None
    layer_sizes: tuple[int, ...] | None = None
    decoder_units: int = 0

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")
        self.U = as_matrix(self.U, "U")
        self.b = as_vector(self.b, "b")
        n = self.W.shape[0]
        if self.W.shape != (n, n):
            raise DimensionMismatch(f"W must be square, got {self.W.shape}")
        if self.U.shape[0] != n or self.b.shape[0] != n:
            raise DimensionMismatch("U rows and b length must match W")
        if not (0 < self.output_dim <= n):
            raise ValueError(f"output_dim {self.output_dim} out of range for n={n}")
        if self.w_mask is not None:
            self.w_mask = (np.asarray(self.w_mask) != 0).astype(np.float64)
            if self.w_mask.shape != self.W.shape:
                raise DimensionMismatch("w_mask shape must match W")
        if self.u_mask is not None:
            self.u_mask = (np.asarray(self.u_mask) != 0).astype(np.float64)
            if self.u_mask.shape != self.U.shape:
                raise DimensionMismatch("u_mask shape must match U")
        self.apply_masks()

    # -- basic geometry -------------------------------------------------
    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def c(self) -> int:
        return self.output_dim

    def apply_masks(self) -> None:
        if self.w_mask is not None:
            self.W *= self.w_mask
        if self.u_mask is not None:
            self.U *= self.u_mask

    def output(self, phi: np.ndarray) -> np.ndarray:
        """Read the trailing output block, y = D phi with D = [0 Id]."""
        return phi[-self.c :] if phi.ndim == 1 else phi[-self.c :, :]

    def lift_output(self, u: np.ndarray) -> np.ndarray:
        """Embed an output-sized vector into state space (D^T u)."""
        n = self.n
        if u.ndim == 1:
            out = np.zeros(n)
            out[-self.c :] = u
        else:
            out = np.zeros((n, u.shape[1]))
            out[-self.c :, :] = u
        return out

    def copy(self) -> "EquilibriumNetwork":
        return replace(
            self,
            W=self.W.copy(),
            U=self.U.copy(),
            b=self.b.copy(),
            w_mask=None if self.w_mask is None else self.w_mask.copy(),
            u_mask=None if self.u_mask is None else self.u_mask.copy(),
        )


def free_dynamics(net: EquilibriumNetwork, phi: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate f(phi, theta) = -phi + W sigma(phi) + U x + b.

    ``phi`` may be ``(n,)`` or a column batch ``(n, B)`` with ``x``
    shaped accordingly.
    """
    phi = np.asarray(phi, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if phi.shape[0] != net.n:
        raise DimensionMismatch(f"state has {phi.shape[0]} units, net has {net.n}")
    if x.shape[0] != net.d:
        raise DimensionMismatch(f"input has dim {x.shape[0]}, net expects {net.d}")
    bias = net.b if phi.ndim == 1 else net.b[:, None]
    return -phi + net.W @ activation_apply(net.activation, phi) + net.U @ x + bias


def jacobian_transpose_vec(
    net: EquilibriumNetwork, phi: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """Apply the transposed state Jacobian: d_phi f(phi)^T v = -v + sigma'(phi) * (W^T v)."""
    phi = np.asarray(phi, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != net.n or phi.shape[0] != net.n:
        raise DimensionMismatch("jacobian_transpose_vec: state dimension mismatch")
    return -v + activation_deriv(net.activation, phi) * gemv(net.W, v, transpose=True)


def jacobian_matrix(net: EquilibriumNetwork, phi: np.ndarray) -> np.ndarray:
    """Dense d_phi f(phi) = -Id + W diag(sigma'(phi)); oracle use only."""
    phi = as_vector(phi, "phi")
    return -np.eye(net.n) + net.W * activation_deriv(net.activation, phi)[None, :]


def layer_slices(layer_sizes) -> list[slice]:
    """State-vector slices of each layer for a feedforward layout.

    ``layer_sizes`` includes the input width first; the state holds the
    remaining layers back to back.
    """
    sizes = list(layer_sizes)[1:]
    slices, start = [], 0
    for s in sizes:
        slices.append(slice(start, start + s))
        start += s
    return slices


def build_feedforward(
    layer_sizes,
    activation: Activation = Activation.TANH,
    rng: Rng | None = None,
) -> EquilibriumNetwork:
    """Equilibrium network whose fixed point is a layered forward pass.

    ``layer_sizes = [d, h_1, ..., h_L]``: the state stacks layers 1..L
    and the mask wires layer l only to layer l-1, so fixed-point
    iteration settles in exactly L sweeps to
    ``phi_l = W_l sigma(phi_{l-1}) + b_l`` (with ``sigma(phi_0) = x``).
    Weights start at Uniform(+-1/sqrt(fan_in)).
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("a feedforward build needs at least [input, output] sizes")
    if any(s <= 0 for s in sizes):
        raise ValueError("layer sizes must be positive")
    rng = rng or Rng(0)
    d, hidden = sizes[0], sizes[1:]
    n = sum(hidden)
    W = np.zeros((n, n))
    U = np.zeros((n, d))
    w_mask = np.zeros((n, n))
    u_mask = np.zeros((n, d))
    slices = layer_slices(sizes)
    bound0 = 1.0 / np.sqrt(d)
    U[slices[0], :] = rng.uniform(-bound0, bound0, (hidden[0], d))
    u_mask[slices[0], :] = 1.0
    for l in range(1, len(hidden)):
        bound = 1.0 / np.sqrt(hidden[l - 1])
        W[slices[l], slices[l - 1]] = rng.uniform(
            -bound, bound, (hidden[l], hidden[l - 1])
        )
        w_mask[slices[l], slices[l - 1]] = 1.0
    return EquilibriumNetwork(
        W=W,
        U=U,
        b=np.zeros(n),
        activation=activation,
        output_dim=hidden[-1],
        w_mask=w_mask,
        u_mask=u_mask,
        layer_sizes=tuple(sizes),
    )


def build_recurrent(
    n_units: int,
    input_dim: int,
    output_dim: int,
    activation: Activation = Activation.TANH,
    rng: Rng | None = None,
    spectral_limit: float = 0.9,
) -> EquilibriumNetwork:
    """Fully-connected recurrent cell with contractive initialization.

    Entries start at Uniform(+-1/sqrt(fan_in)); W is then rescaled so its
    estimated spectral norm stays below ``spectral_limit``, which keeps
    the free fixed-point iteration convergent at init.
    """
    rng = rng or Rng(0)
    bw = 1.0 / np.sqrt(n_units)
    W = rng.uniform(-bw, bw, (n_units, n_units))
    est = spectral_norm_estimate(W, rng.split(1))
    if est > spectral_limit:
        W *= spectral_limit / est
    bu = 1.0 / np.sqrt(input_dim)
    U = rng.uniform(-bu, bu, (n_units, input_dim))
    return EquilibriumNetwork(
        W=W,
        U=U,
        b=np.zeros(n_units),
        activation=activation,
        output_dim=output_dim,
    )


def absorb_decoder(
    net: EquilibriumNetwork, decoder: np.ndarray, decoder_bias: np.ndarray
) -> EquilibriumNetwork:
    """Append linear readout units driven by a trained decoder matrix.

    The augmented cell has block weights ``[[W, 0], [D, 0]]`` and input
    map ``[U; 0]``; at equilibrium the appended block equals
    ``D sigma(phi) + b_dec`` while the original units evolve exactly as
    before.  The loss then reads the appended block through the fixed
    selector, so it never depends on the trained parameters.
    """
    decoder = as_matrix(decoder, "decoder")
    decoder_bias = as_vector(decoder_bias, "decoder bias")
    c, n = decoder.shape
    if c == 0:
        raise ValueError("decoder must have at least one output row")
    if n != net.n or decoder_bias.shape[0] != c:
        raise DimensionMismatch(
            f"decoder {decoder.shape} incompatible with a {net.n}-unit network"
        )
    if net.decoder_units:
        raise ValueError("network already carries an absorbed decoder")
    nn = n + c
    W = np.zeros((nn, nn))
    W[:n, :n] = net.W
    W[n:, :n] = decoder
    U = np.zeros((nn, net.d))
    U[:n, :] = net.U
    b = np.concatenate([net.b, decoder_bias])
    base_w_mask = net.w_mask if net.w_mask is not None else np.ones((n, n))
    base_u_mask = net.u_mask if net.u_mask is not None else np.ones((n, net.d))
    w_mask = np.zeros((nn, nn))
    w_mask[:n, :n] = base_w_mask
    w_mask[n:, :n] = 1.0
    u_mask = np.zeros((nn, net.d))
    u_mask[:n, :] = base_u_mask
    return EquilibriumNetwork(
        W=W,
        U=U,
        b=b,
        activation=net.activation,
        output_dim=c,
        w_mask=w_mask,
        u_mask=u_mask,
        decoder_units=c,
    )


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossSpec:
    """Output loss: plain MSE or softmax cross-entropy with optional soft targets.

    ``soft_target_epsilon`` only affects classification targets built by
    :meth:`target_distribution`: the correct class gets ``1 - eps`` and
    the remaining mass spreads evenly, which keeps the minimal-loss
    logits finite even under a zero-leak output controller.
    """

    kind: str = "mse"
    soft_target_epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in ("mse", "softmax_ce"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not (0.0 <= self.soft_target_epsilon < 0.5):
            raise ValueError("soft_target_epsilon must lie in [0, 0.5)")

    def target_distribution(self, labels, num_classes: int) -> np.ndarray:
        """Columns of class targets, one per label, rows summing to one."""
        labels = np.asarray(labels, dtype=np.int64).ravel()
        eps = self.soft_target_epsilon
        off = eps / (num_classes - 1) if num_classes > 1 else 0.0
        t = np.full((num_classes, labels.shape[0]), off)
        t[labels, np.arange(labels.shape[0])] = 1.0 - eps
        return t


def _check_distribution(target: np.ndarray) -> None:
    sums = np.sum(target, axis=0)
    if np.any(target < -1e-12) or np.any(np.abs(sums - 1.0) > 1e-9):
        raise ValueError("softmax_ce targets must be probability distributions")


def output_error(loss: LossSpec, y: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of the loss in the output, d L / d y.

    MSE: y - target.  Softmax cross-entropy: softmax(y) - target.
    """
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise DimensionMismatch(f"output {y.shape} vs target {target.shape}")
    if loss.kind == "mse":
        return y - target
    _check_distribution(target if target.ndim == 2 else target[:, None])
    return softmax(y) - target


def loss_value(loss: LossSpec, y: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample loss; scalar for a single sample, ``(B,)`` for a batch."""
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise DimensionMismatch(f"output {y.shape} vs target {target.shape}")
    if loss.kind == "mse":
        return 0.5 * np.sum((y - target) ** 2, axis=0)
    logp = y - np.max(y, axis=0, keepdims=True)
    logp = logp - np.log(np.sum(np.exp(logp), axis=0, keepdims=True))
    return -np.sum(target * logp, axis=0)


def loss_hessian_output(loss: LossSpec, y: np.ndarray) -> np.ndarray:
    """Dense d^2 L / d y^2 for a single output vector (verification use)."""
    y = as_vector(y, "y")
    if loss.kind == "mse":
        return np.eye(y.shape[0])
    p = softmax(y)
    return np.diag(p) - np.outer(p, p)


# ---------------------------------------------------------------------------
# checkpoint format ("LCPNET1"): shape header then row-major float64 payload

_ACT_IDS = {a: i for i, a in enumerate(Activation)}
_ACT_FROM_ID = {i: a for a, i in _ACT_IDS.items()}


def save_checkpoint(net: EquilibriumNetwork, path: str) -> None:
    layer_sizes = net.layer_sizes or ()
    header = struct.pack(
        "<6I",
        net.n,
        net.d,
        net.c,
        _ACT_IDS[net.activation],
        net.decoder_units,
        len(layer_sizes),
    )
    mask_flag = struct.pack("<I", 1 if net.w_mask is not None else 0)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(header)
    buf.write(mask_flag)
    buf.write(struct.pack(f"<{len(layer_sizes)}I", *layer_sizes))
    buf.write(np.ascontiguousarray(net.W).tobytes())
    buf.write(np.ascontiguousarray(net.U).tobytes())
    buf.write(np.ascontiguousarray(net.b).tobytes())
    if net.w_mask is not None:
        buf.write(net.w_mask.astype(np.uint8).tobytes())
        buf.write((net.u_mask if net.u_mask is not None else np.ones_like(net.U)).astype(np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> EquilibriumNetwork:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not an LCPNET1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    n, d, c, act_id, decoder_units, n_layers = struct.unpack_from("<6I", raw, off)
    off += 24
    (mask_flag,) = struct.unpack_from("<I", raw, off)
    off += 4
    layer_sizes = struct.unpack_from(f"<{n_layers}I", raw, off)
    off += 4 * n_layers

    def take_f64(count):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        return arr

    W = take_f64(n * n).reshape(n, n)
    U = take_f64(n * d).reshape(n, d)
    b = take_f64(n)
    w_mask = u_mask = None
    if mask_flag:
        w_mask = np.frombuffer(raw, dtype=np.uint8, count=n * n, offset=off).reshape(n, n).astype(np.float64)
        off += n * n
        u_mask = np.frombuffer(raw, dtype=np.uint8, count=n * d, offset=off).reshape(n, d).astype(np.float64)
        off += n * d
    return EquilibriumNetwork(
        W=W,
        U=U,
        b=b,
        activation=_ACT_FROM_ID[act_id],
        output_dim=c,
        w_mask=w_mask,
        u_mask=u_mask,
        layer_sizes=tuple(layer_sizes) or None,
        decoder_units=decoder_units,
    )
