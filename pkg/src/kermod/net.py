"""Layer composition and the desk-scale residual network builder.

Every parameter belongs to exactly one of four groups: convolution (the
frozen-by-default kernels), implicit (norm gamma/beta), explicit (kernel
modulator matrices), classifier (the final linear map). A ParamGroupMask
decides which groups train; everything else keeps its initial values
bit-for-bit.

``resnet_micro`` is a pre-activation residual net: three stages of basic
blocks at widths (w, 2w, 4w), norm-then-conv inside blocks, global average
pooling, then a linear classifier. With n_blocks=2 and base_width=8 it has
about 45K parameters, small enough to train on a laptop CPU in minutes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .modulator import InitSpec, KernelModulator, KernelShape, init_modulator, modulate
from .norm import NormLayer, batch_norm, group_norm, norm_forward

PARAM_GROUPS = ("convolution", "implicit", "explicit", "classifier")


class NetError(Exception):
    pass


@dataclass(frozen=True)
class ParamGroupMask:
    """Which parameter groups receive gradient updates."""
    convolution: bool = False
    implicit: bool = False
    explicit: bool = False
    classifier: bool = False

    def enabled(self) -> tuple[str, ...]:
        return tuple(g for g in PARAM_GROUPS if getattr(self, g))

    def any(self) -> bool:
        return bool(self.enabled())

    @classmethod
    def from_names(cls, names) -> "ParamGroupMask":
        names = [n.strip() for n in names if n.strip()]
        for n in names:
            if n not in PARAM_GROUPS:
                raise NetError(f"unknown parameter group {n!r}; expected one of {PARAM_GROUPS}")
        return cls(**{n: True for n in names})


MASK_ALL = ParamGroupMask(True, True, True, True)
MASK_KM = ParamGroupMask(implicit=True, explicit=True, classifier=True)
MASK_BL = ParamGroupMask(implicit=True, classifier=True)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture plus modulator construction choices.

    ``arch`` is "resnet_micro" (residual net described above) or
    "linear_probe" (flatten + linear classifier, the separable-task oracle
    model).
    """
    arch: str = "resnet_micro"
    n_blocks: int = 2
    base_width: int = 8
    input_shape: tuple[int, int, int] = (3, 32, 32)
    class_count: int = 10
    norm_kind: str = "batch"
    groups: int | None = None
    modulator_depth: int = 2
    modulator_activation: str = "tanh"
    modulator_init: str = "identity_noise"
    modulator_sigma: float = 1e-3

    def __post_init__(self):
        if self.arch not in ("resnet_micro", "linear_probe"):
            raise NetError(f"unknown architecture {self.arch!r}")
        if self.class_count < 2:
            raise NetError("class_count must be >= 2")
        if self.arch == "resnet_micro" and (self.n_blocks < 1 or self.base_width < 1):
            raise NetError("resnet_micro needs n_blocks >= 1 and base_width >= 1")


class ConvLayer:
    """A frozen-capable convolution with an optional kernel modulator."""

    def __init__(self, weight: Tensor, stride: int = 1, padding: int = 0,
                 modulator: KernelModulator | None = None, name: str = ""):
        self.weight = weight
        self.stride = stride
        self.padding = padding
        self.modulator = modulator
        self.name = name
        if modulator is not None and modulator.side != weight.shape[2] * weight.shape[3]:
            raise NetError(
                f"{name}: modulator side {modulator.side} does not match kernel "
                f"spatial size {weight.shape[2]}x{weight.shape[3]}")

    def effective_weight(self) -> Tensor:
        if self.modulator is None:
            return self.weight
        return modulate(self.weight, self.modulator)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.effective_weight(), self.stride, self.padding)


class LinearLayer:
    def __init__(self, weight: Tensor, bias: Tensor, name: str = ""):
        self.weight = weight
        self.bias = bias
        self.name = name

    def forward(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 average pooling; spatial extents must be even.

    Downsampling happens here rather than in stride-2 3x3 convolutions:
    (H + 2*padding - 3) is odd for even H, so a stride-2 3x3 conv can never
    meet conv2d's exact-divisibility contract on 32x32 inputs.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise NetError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    r = ad.reshape(x, (b, c, h // 2, 2, w // 2, 2))
    return ad.mean(r, axis=(3, 5))


class PreactBlock:
    """norm-relu-conv, norm-relu-conv, plus an identity or 1x1-conv shortcut.

    ``pool`` blocks halve the spatial extents on entry (stage transitions).
    """

    def __init__(self, norm1, conv1, norm2, conv2, shortcut=None, pool=False):
        self.norm1 = norm1
        self.conv1 = conv1
        self.norm2 = norm2
        self.conv2 = conv2
        self.shortcut = shortcut
        self.pool = pool

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if self.pool:
            x = avg_pool2(x)
        h = self.conv1.forward(ad.relu(norm_forward(x, self.norm1, mode)))
        h = self.conv2.forward(ad.relu(norm_forward(h, self.norm2, mode)))
        s = self.shortcut.forward(x) if self.shortcut is not None else x
        return h + s


class Network:
    """An ordered aggregate of layers with parameter-group bookkeeping."""

    def __init__(self, spec: NetworkSpec, mask: ParamGroupMask, init_seed: int):
        self.spec = spec
        self.mask = mask
        self.init_seed = init_seed
        self.conv_layers: list[ConvLayer] = []
        self.norm_layers: list[tuple[str, NormLayer]] = []
        self.blocks: list[PreactBlock] = []
        self.stem: ConvLayer | None = None
        self.final_norm: NormLayer | None = None
        self.classifier: LinearLayer | None = None

    # -- forward ------------------------------------------------------------

    def forward(self, x, mode: str = "train") -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise NetError(
                f"input shape {x.shape[1:]} does not match spec {self.spec.input_shape}")
        if self.spec.arch == "linear_probe":
            flat = ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
            return self.classifier.forward(flat)
        h = self.stem.forward(x)
        for block in self.blocks:
            h = block.forward(h, mode)
        h = ad.relu(norm_forward(h, self.final_norm, mode))
        pooled = ad.mean(h, axis=(2, 3))
        return self.classifier.forward(pooled)

    # -- parameter access -----------------------------------------------------

    def named_parameters(self):
        """Yield (name, tensor, group) for every parameter, in layer order."""
        for conv in self.conv_layers:
            yield f"{conv.name}.weight", conv.weight, "convolution"
            if conv.modulator is not None:
                for j, u in enumerate(conv.modulator.layers):
                    yield f"{conv.name}.modulator.layer{j}", u, "explicit"
        for name, layer in self.norm_layers:
            yield f"{name}.gamma", layer.gamma, "implicit"
            yield f"{name}.beta", layer.beta, "implicit"
        if self.classifier is not None:
            yield f"{self.classifier.name}.weight", self.classifier.weight, "classifier"
            yield f"{self.classifier.name}.bias", self.classifier.bias, "classifier"

    def trainable_parameters(self):
        return [(n, t, g) for n, t, g in self.named_parameters() if t.requires_grad]

    def parameter_by_name(self, name: str) -> Tensor:
        for n, t, _ in self.named_parameters():
            if n == name:
                return t
        raise KeyError(name)

    def zero_grads(self):
        for _, t, _ in self.named_parameters():
            t.zero_grad()

    def conv_weight_bytes(self) -> bytes:
        """Concatenated raw bytes of all convolution weights, in layer order."""
        chunks = []
        for conv in self.conv_layers:
            chunks.append(np.ascontiguousarray(conv.weight.data, dtype=np.float32).tobytes())
        return b"".join(chunks)

    def reset_running_stats(self):
        for _, layer in self.norm_layers:
            layer.running_mu = np.zeros_like(layer.running_mu)
            layer.running_sigma = np.ones_like(layer.running_sigma)
            layer.batches_tracked = 0


def count_params(net: Network) -> tuple[int, int]:
    """(trainable, total) element counts over all parameters.

    Diagonal-init modulators count only their diagonal entries as
    trainable. Norm running statistics are buffers, not parameters.
    """
    trainable = 0
    total = 0
    for _, t, _ in net.named_parameters():
        total += t.size
        if t.requires_grad:
            if t.grad_mask is not None:
                trainable += int(t.grad_mask.sum())
            else:
                trainable += t.size
    return trainable, total


def _conv_init(shape: KernelShape, rng: np.random.Generator) -> np.ndarray:
    # He initialization: zero-mean gaussian, std sqrt(2 / fan_in)
    fan_in = shape.k_c * shape.k_h * shape.k_w
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), (shape.k_n, shape.k_c, shape.k_h, shape.k_w))


class _Builder:
    def __init__(self, spec: NetworkSpec, mask: ParamGroupMask, init_seed: int):
        self.spec = spec
        self.mask = mask
        self.seed = init_seed
        self.net = Network(spec, mask, init_seed)
        self.conv_index = 0

    def conv(self, c_in, c_out, k, stride, padding, name) -> ConvLayer:
        shape = KernelShape(c_out, c_in, k, k)
        rng = np.random.default_rng((self.seed, 0, self.conv_index))
        weight = Tensor(_conv_init(shape, rng),
                        requires_grad=self.mask.convolution, name=f"{name}.weight")
        modulator = None
        if self.mask.explicit:
            sub_seed = int(np.random.SeedSequence(
                (self.seed, 1, self.conv_index)).generate_state(2, np.uint64)[0])
            init = InitSpec(method=self.spec.modulator_init,
                            sigma=self.spec.modulator_sigma, seed=sub_seed)
            modulator = init_modulator(shape, self.spec.modulator_depth,
                                       self.spec.modulator_activation, init)
        self.conv_index += 1
        layer = ConvLayer(weight, stride, padding, modulator, name=name)
        self.net.conv_layers.append(layer)
        return layer

    def norm(self, channels, name) -> NormLayer:
        if self.spec.norm_kind == "batch":
            layer = batch_norm(channels)
        else:
            groups = self.spec.groups
            layer = group_norm(channels, min(groups or 32, channels))
        layer.set_trainable(self.mask.implicit)
        self.net.norm_layers.append((name, layer))
        return layer

    def linear(self, c_in, c_out, name) -> LinearLayer:
        rng = np.random.default_rng((self.seed, 2, 0))
        weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / c_in), (c_in, c_out)),
                        requires_grad=self.mask.classifier, name=f"{name}.weight")
        bias = Tensor(np.zeros(c_out), requires_grad=self.mask.classifier,
                      name=f"{name}.bias")
        layer = LinearLayer(weight, bias, name=name)
        self.net.classifier = layer
        return layer


def build_network(spec: NetworkSpec, mask: ParamGroupMask, init_seed: int) -> Network:
    """Construct a network with trainability set per mask; deterministic in the seed.

    When ``mask.explicit`` is set, every convolution (stem, block bodies,
    and 1x1 shortcut projections alike) gets a fresh kernel modulator.
    """
    if not mask.any():
        raise NetError("ParamGroupMask enables no parameter group")
    b = _Builder(spec, mask, init_seed)
    net = b.net
    c_in, hh, ww = spec.input_shape

    if spec.arch == "linear_probe":
        b.linear(int(np.prod(spec.input_shape)), spec.class_count, "classifier")
        return net

    widths = (spec.base_width, 2 * spec.base_width, 4 * spec.base_width)
    net.stem = b.conv(c_in, widths[0], 3, 1, 1, "stem")
    prev = widths[0]
    for s, width in enumerate(widths):
        for i in range(spec.n_blocks):
            pool = s > 0 and i == 0
            name = f"stage{s + 1}.block{i}"
            norm1 = b.norm(prev, f"{name}.norm1")
            conv1 = b.conv(prev, width, 3, 1, 1, f"{name}.conv1")
            norm2 = b.norm(width, f"{name}.norm2")
            conv2 = b.conv(width, width, 3, 1, 1, f"{name}.conv2")
            shortcut = None
            if prev != width:
                shortcut = b.conv(prev, width, 1, 1, 0, f"{name}.shortcut")
            net.blocks.append(PreactBlock(norm1, conv1, norm2, conv2, shortcut, pool))
            prev = width
    net.final_norm = b.norm(prev, "head.norm")
    b.linear(prev, spec.class_count, "classifier")
    return net
