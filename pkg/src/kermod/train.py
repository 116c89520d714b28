"""SGD training loop, metrics, and the modulator ablation harness.

The optimizer is SGD with momentum. Weight decay touches only trainable
groups, and by default skips norm affine parameters and modulator matrices:
decaying modulators pulls them away from their near-identity initialization,
which is exactly the property the initialization exists to provide. Set
``decay_norm_and_modulators`` to decay them anyway.

Runs are deterministic given the config seed: batch order, augmentation
draws, and parameter initialization all derive from it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DatasetSplit, augment
from .net import Network, NetworkSpec, ParamGroupMask, build_network, count_params

DECAYABLE_GROUPS = ("convolution", "classifier")

ABLATION_AXES = {
    "activation": ("tanh", "sin", "relu", "leaky_relu"),
    "initialization": ("identity_noise", "orthogonal", "diagonal"),
    "depth": None,  # any positive int
}


class TrainError(Exception):
    pass


class TrainingDiverged(TrainError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "step"  # or "constant"
    lr_milestones: tuple[int, ...] = (12, 16)
    lr_factor: float = 0.1
    seed: int = 0
    decay_norm_and_modulators: bool = False
    augment: str = "none"  # or "crop_flip"
    augment_pad: int = 4

    def __post_init__(self):
        # lr = 0 is allowed: a zero step size must leave parameters
        # bit-identical, which is a cheap end-to-end test of the loop
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise TrainError("need epochs >= 1, batch_size >= 1, learning_rate >= 0")
        if self.lr_schedule not in ("constant", "step"):
            raise TrainError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        drops = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.learning_rate * self.lr_factor ** drops


@dataclass
class RunResult:
    final_test_accuracy: float
    accuracy_curve: list[float]          # test accuracy per epoch
    train_accuracy_curve: list[float]
    loss_curve: list[float]              # mean train loss per epoch
    trainable_params: int
    total_params: int
    wall_time_seconds: float
    final_train_accuracy: float = 0.0


class SGD:
    """Momentum SGD over a network's trainable parameters."""

    def __init__(self, net: Network, cfg: TrainConfig):
        self.cfg = cfg
        self.params = net.trainable_parameters()
        if not self.params:
            raise TrainError("no trainable parameters under the network's mask")
        self.velocity = {name: np.zeros_like(t.data) for name, t, _ in self.params}

    def _decays(self, group: str) -> bool:
        if self.cfg.weight_decay == 0:
            return False
        if self.cfg.decay_norm_and_modulators:
            return True
        return group in DECAYABLE_GROUPS

    def step(self, lr: float):
        for name, t, group in self.params:
            if t.grad is None:
                continue
            g = t.grad
            if self._decays(group):
                g = g + self.cfg.weight_decay * t.data
            v = self.velocity[name]
            v *= self.cfg.momentum
            v += g
            t.data -= (lr * v).astype(t.data.dtype)

    def zero_grad(self):
        for _, t, _ in self.params:
            t.zero_grad()


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax matches; ties resolve to the lowest index."""
    return float((logits.argmax(axis=1) == labels).mean())


def evaluate(net: Network, split: DatasetSplit, batch_size: int = 256):
    """Eval-mode mean loss and accuracy over a split."""
    total_loss = 0.0
    hits = 0
    for start in range(0, len(split), batch_size):
        xb = split.images[start:start + batch_size]
        yb = split.labels[start:start + batch_size]
        logits = net.forward(Tensor(xb), mode="eval")
        loss = ad.cross_entropy(logits, yb)
        total_loss += float(loss.data) * len(xb)
        hits += int((logits.data.argmax(axis=1) == yb).sum())
    return total_loss / len(split), hits / len(split)


def train(net: Network, train_split: DatasetSplit, test_split: DatasetSplit,
          cfg: TrainConfig, on_epoch=None) -> RunResult:
    """Train ``net`` on the train split; track test accuracy per epoch.

    ``on_epoch`` receives a dict per (epoch, split) record, matching the
    CLI's metrics stream. Raises TrainingDiverged on a non-finite loss.
    """
    if train_split.class_count != net.spec.class_count:
        raise TrainError(
            f"network expects {net.spec.class_count} classes, "
            f"dataset has {train_split.class_count}")
    if len(train_split) < 1:
        raise TrainError("empty training split")

    opt = SGD(net, cfg)
    rng = np.random.default_rng((cfg.seed, 0xA))
    n = len(train_split)
    t0 = time.perf_counter()
    test_curve, train_curve, loss_curve = [], [], []

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_hits = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = train_split.images[idx]
            if cfg.augment != "none":
                xb = augment(xb, cfg.augment, cfg.augment_pad, rng)
            yb = train_split.labels[idx]
            logits = net.forward(Tensor(np.ascontiguousarray(xb)), mode="train")
            loss = ad.cross_entropy(logits, yb)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss {float(loss.data)} at epoch {epoch} "
                    f"batch {start // cfg.batch_size} (lr={lr})")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            epoch_loss += float(loss.data) * len(idx)
            epoch_hits += int((logits.data.argmax(axis=1) == yb).sum())

        train_acc = epoch_hits / n
        mean_loss = epoch_loss / n
        test_loss, test_acc = evaluate(net, test_split)
        train_curve.append(train_acc)
        test_curve.append(test_acc)
        loss_curve.append(mean_loss)
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "split": "train", "loss": mean_loss, "acc": train_acc})
            on_epoch({"epoch": epoch, "split": "test", "loss": test_loss, "acc": test_acc})

    trainable, total = count_params(net)
    return RunResult(
        final_test_accuracy=test_curve[-1],
        accuracy_curve=test_curve,
        train_accuracy_curve=train_curve,
        loss_curve=loss_curve,
        trainable_params=trainable,
        total_params=total,
        wall_time_seconds=time.perf_counter() - t0,
        final_train_accuracy=train_curve[-1],
    )


def recovered_accuracy_ratio(method_acc: float, full_acc: float) -> float:
    """Accuracy of a parameter-efficient method relative to full training.

    Returns the raw ratio; clamp to [0, 1] only when reporting.
    """
    if full_acc <= 0:
        raise TrainError(f"full-training accuracy must be > 0, got {full_acc}")
    return method_acc / full_acc


def clamp_ratio(r: float) -> float:
    return min(max(r, 0.0), 1.0)


@dataclass
class AblationRow:
    value: object
    mean: float
    std: float
    accuracies: list[float] = field(default_factory=list)


def run_ablation(axis: str, values, data: tuple[DatasetSplit, DatasetSplit],
                 net_spec: NetworkSpec, base_cfg: TrainConfig, seeds,
                 mask: ParamGroupMask | None = None,
                 on_run=None) -> list[AblationRow]:
    """Train one network per (axis value, seed) with everything else fixed.

    Returns one row per value with the mean and standard deviation of final
    test accuracy over seeds.
    """
    if axis not in ABLATION_AXES:
        raise TrainError(f"unknown ablation axis {axis!r}; expected one of {tuple(ABLATION_AXES)}")
    allowed = ABLATION_AXES[axis]
    values = list(values)
    for v in values:
        if allowed is not None and v not in allowed:
            raise TrainError(f"unsupported {axis} value {v!r}; expected one of {allowed}")
        if allowed is None and (not isinstance(v, int) or v < 1):
            raise TrainError(f"depth values must be positive integers, got {v!r}")
    if mask is None:
        mask = ParamGroupMask(implicit=True, explicit=True, classifier=True)

    train_split, test_split = data
    rows = []
    for v in values:
        if axis == "activation":
            spec = replace(net_spec, modulator_activation=v)
        elif axis == "initialization":
            spec = replace(net_spec, modulator_init=v)
        else:
            spec = replace(net_spec, modulator_depth=v)
        accs = []
        for seed in seeds:
            cfg = replace(base_cfg, seed=int(seed))
            network = build_network(spec, mask, init_seed=int(seed))
            result = train(network, train_split, test_split, cfg)
            accs.append(result.final_test_accuracy)
            if on_run is not None:
                on_run(axis, v, int(seed), result)
        rows.append(AblationRow(value=v, mean=float(np.mean(accs)),
                                std=float(np.std(accs)), accuracies=accs))
    return rows
