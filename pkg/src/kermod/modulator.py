"""Explicit kernel modulation.

A convolution layer's frozen 4D weight (k_n, k_c, k_h, k_w) is flattened to
(k_n*k_c, k_h*k_w) so every row is one channel's spatial patch, pushed
through a small per-layer MLP acting on the right (row @ U per layer, no
biases, activation after every layer), and reshaped back. Only the MLP
matrices train; the convolution weight never does.

Default construction (depth 2, tanh, matrices initialized to identity plus
N(0, 0.001) noise) makes modulation start as a near-identity map, so the
modulated network initially behaves like the frozen base network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_METHODS = ("identity_noise", "orthogonal", "diagonal")


class ModulatorError(Exception):
    pass


@dataclass(frozen=True)
class KernelShape:
    """Extents of one convolution weight: kernels, channels, height, width."""
    k_n: int
    k_c: int
    k_h: int
    k_w: int

    def __post_init__(self):
        for name in ("k_n", "k_c", "k_h", "k_w"):
            if getattr(self, name) < 1:
                raise ModulatorError(f"KernelShape.{name} must be >= 1")

    @property
    def spatial(self) -> int:
        return self.k_h * self.k_w

    @classmethod
    def of(cls, w) -> "KernelShape":
        arr = w.data if isinstance(w, Tensor) else np.asarray(w)
        if arr.ndim != 4:
            raise ModulatorError(f"expected a 4D convolution weight, got shape {arr.shape}")
        return cls(*arr.shape)


@dataclass(frozen=True)
class InitSpec:
    """How modulator matrices are initialized.

    identity_noise: U = I + N(0, sigma) elementwise (sigma is a standard
    deviation). orthogonal: U drawn Haar-uniform from the orthogonal group.
    diagonal: U = diag(1 + N(0, sigma)); off-diagonal entries are zero and
    permanently untrainable.
    """
    method: str = "identity_noise"
    sigma: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.method not in INIT_METHODS:
            raise ModulatorError(
                f"unknown init method {self.method!r}; expected one of {INIT_METHODS}")
        if self.sigma < 0:
            raise ModulatorError("sigma must be >= 0")


@dataclass
class KernelModulator:
    """The per-layer MLP that maps frozen weights to the weights actually used.

    ``layers`` holds square (k_h*k_w, k_h*k_w) trainable matrices, applied
    left to right as ``rows = activation(rows @ U)``. ``diagonal`` marks
    the ablation variant whose off-diagonal entries stay frozen at zero.
    """
    layers: list[Tensor]
    activation: str = "tanh"
    slope: float = 0.1
    diagonal: bool = False

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def side(self) -> int:
        return self.layers[0].shape[0]

    def trainable_param_count(self) -> int:
        if self.diagonal:
            return self.depth * self.side
        return self.depth * self.side * self.side

    def total_param_count(self) -> int:
        return self.depth * self.side * self.side

    def set_trainable(self, flag: bool):
        for u in self.layers:
            u.requires_grad = flag


def _orthogonal_matrix(side: int, rng: np.random.Generator) -> np.ndarray:
    # QR with sign correction gives a Haar-uniform orthogonal matrix
    a = rng.standard_normal((side, side))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def init_modulator(shape: KernelShape, depth: int, activation: str,
                   spec: InitSpec) -> KernelModulator:
    """Construct a modulator for weights of the given shape.

    Matrix j draws its noise from a generator seeded by (spec.seed, j), so
    construction is reproducible and independent of call order.
    """
    if depth < 1:
        raise ModulatorError(f"modulator depth must be >= 1, got {depth}")
    if activation not in ad.ACTIVATIONS:
        raise ModulatorError(
            f"unknown activation {activation!r}; expected one of {ad.ACTIVATIONS}")
    side = shape.spatial
    eye = np.eye(side)
    layers = []
    for j in range(depth):
        rng = np.random.default_rng((spec.seed, j))
        if spec.method == "identity_noise":
            u = eye.copy()
            if spec.sigma > 0:
                u += rng.normal(0.0, spec.sigma, (side, side))
        elif spec.method == "orthogonal":
            u = _orthogonal_matrix(side, rng)
        else:  # diagonal
            diag = np.ones(side)
            if spec.sigma > 0:
                diag += rng.normal(0.0, spec.sigma, side)
            u = np.diag(diag)
        t = Tensor(u, requires_grad=True, name=f"modulator.layer{j}")
        if spec.method == "diagonal":
            t.grad_mask = eye.astype(t.data.dtype)
        layers.append(t)
    return KernelModulator(layers=layers, activation=activation,
                           diagonal=(spec.method == "diagonal"))


def reshape_4d_to_2d(w: Tensor) -> Tensor:
    """(k_n, k_c, k_h, k_w) -> (k_n*k_c, k_h*k_w); row r = n*k_c + c holds
    the row-major spatial patch of kernel n, channel c."""
    if w.ndim != 4:
        raise ModulatorError(f"expected a 4D weight, got shape {w.shape}")
    kn, kc, kh, kw = w.shape
    return ad.reshape(w, (kn * kc, kh * kw))


def reshape_2d_to_4d(m: Tensor, shape: KernelShape) -> Tensor:
    """Inverse of reshape_4d_to_2d for the given kernel shape."""
    if m.ndim != 2:
        raise ModulatorError(f"expected a 2D matrix, got shape {m.shape}")
    if m.shape != (shape.k_n * shape.k_c, shape.spatial):
        raise ModulatorError(
            f"matrix shape {m.shape} does not match kernel shape {shape}")
    return ad.reshape(m, (shape.k_n, shape.k_c, shape.k_h, shape.k_w))


def modulate(w: Tensor, m: KernelModulator) -> Tensor:
    """Apply the modulator MLP to a frozen 4D weight; output has the input's shape.

    Gradients flow to the modulator matrices only; ``w`` enters the tape as
    a constant.
    """
    shape = KernelShape.of(w)
    if shape.spatial != m.side:
        raise ModulatorError(
            f"weight spatial size {shape.k_h}x{shape.k_w}={shape.spatial} does not "
            f"match modulator matrix side {m.side}")
    rows = reshape_4d_to_2d(w)
    for u in m.layers:
        rows = ad.elementwise(m.activation, ad.matmul(rows, u), m.slope)
    return reshape_2d_to_4d(rows, shape)


def modulator_param_count(shape: KernelShape, depth: int, diagonal: bool = False) -> int:
    """Trainable parameter count: depth * (k_h*k_w)^2, or depth * k_h*k_w
    for the diagonal variant (off-diagonals are frozen)."""
    if diagonal:
        return depth * shape.spatial
    return depth * shape.spatial ** 2
