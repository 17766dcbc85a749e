"""k-space line detection network: a small U-Net over (real, imaginary) channels."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import (Adam, BatchNormState, Tensor, avg_pool2d, batch_norm, concat, conv2d, relu,
                       upsample2x)
from .autodiff.tensor import make_node
from .groups import MovementGroups, group_movements, mask_to_lines
from .io import load_checkpoint, save_checkpoint
from .physics import KSpaceData

logger = logging.getLogger(__name__)


def prepare_input(k: KSpaceData | np.ndarray) -> np.ndarray:
    """Scale k-space to unit RMS and compress its dynamic range with a signed log."""
    data = k.data if isinstance(k, KSpaceData) else np.asarray(k)
    rms = math.sqrt(float(np.mean(data ** 2)))
    x = data / rms if rms > 0 else data
    return np.sign(x) * np.log1p(np.abs(x))


class KldNet:
    """U-Net with ``depth`` pooling levels, channels 16, 32, ... doubling per level.

    Each level is two 3x3 convolutions with batch norm and ReLU; the
    bottleneck keeps the deepest level's width; decoder levels concatenate
    the matching encoder output and halve the width back down. A 1x1
    convolution maps to one logit per k-space sample.
    """

    def __init__(self, depth: int = 4, base_channels: int = 16, in_channels: int = 2,
                 seed: int = 0, dtype=np.float32):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        self.base_channels = base_channels
        self.in_channels = in_channels
        self.dtype = np.dtype(dtype)
        self.channels = [base_channels * 2 ** l for l in range(depth)]
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        c_prev = in_channels
        for l, c in enumerate(self.channels):
            self._block(f"enc{l}", c_prev, c, rng)
            c_prev = c
        self._block("mid", c_prev, c_prev, rng)
        for l in reversed(range(depth)):
            c_up = c_prev
            self._block(f"dec{l}", c_up + self.channels[l], self.channels[l], rng)
            c_prev = self.channels[l]
        self.params["head.weight"] = Tensor(np.zeros((1, c_prev, 1, 1), self.dtype), requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros(1, self.dtype), requires_grad=True)
        self.training = True

    def _block(self, name: str, c_in: int, c_out: int, rng: np.random.Generator) -> None:
        for i, ci in enumerate((c_in, c_out)):
            std = math.sqrt(2.0 / (ci * 9))
            self.params[f"{name}.conv{i}"] = Tensor(
                (rng.standard_normal((c_out, ci, 3, 3)) * std).astype(self.dtype), requires_grad=True)
            self.params[f"{name}.bn{i}.gamma"] = Tensor(np.ones(c_out, self.dtype), requires_grad=True)
            self.params[f"{name}.bn{i}.beta"] = Tensor(np.zeros(c_out, self.dtype), requires_grad=True)
            self.bn[f"{name}.bn{i}"] = BatchNormState(c_out, dtype=self.dtype)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def train(self) -> "KldNet":
        self.training = True
        return self

    def eval(self) -> "KldNet":
        self.training = False
        return self

    def _apply_block(self, name: str, x: Tensor) -> Tensor:
        for i in range(2):
            x = conv2d(x, self.params[f"{name}.conv{i}"], padding=1)
            x = batch_norm(x, self.params[f"{name}.bn{i}.gamma"], self.params[f"{name}.bn{i}.beta"],
                           self.bn[f"{name}.bn{i}"], self.training)
            x = relu(x)
        return x

    def __call__(self, x) -> Tensor:
        """Logits [n, h, w] for input [n, 2, h, w] (or [h, w] for a single [2, h, w])."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        h, w = x.shape[-2:]
        factor = 2 ** self.depth
        if h % factor or w % factor:
            raise ValueError(f"extents {h}x{w} must be divisible by {factor}")
        skips = []
        for l in range(self.depth):
            x = self._apply_block(f"enc{l}", x)
            skips.append(x)
            x = avg_pool2d(x)
        x = self._apply_block("mid", x)
        for l in reversed(range(self.depth)):
            x = concat([upsample2x(x), skips[l]], axis=1)
            x = self._apply_block(f"dec{l}", x)
        logits = conv2d(x, self.params["head.weight"], self.params["head.bias"])
        logits = logits.reshape((logits.shape[0],) + logits.shape[2:])
        return logits.reshape(logits.shape[1:]) if single else logits

    # -- persistence --------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"model": "kldnet", "depth": self.depth, "base_channels": self.base_channels,
                "in_channels": self.in_channels}
        meta.update(extra or {})
        save_checkpoint(path, self.state(), meta)

    @classmethod
    def load(cls, path) -> "KldNet":
        params, meta = load_checkpoint(path)
        if meta.get("model") != "kldnet":
            raise ValueError(f"{path}: checkpoint is not a kLD-Net")
        net = cls(meta["depth"], meta["base_channels"], meta["in_channels"])
        expected = set(net.state())
        if set(params) != expected:
            raise ValueError(f"{path}: parameter names do not match the architecture")
        for k, v in net.params.items():
            v.data = params[k].astype(net.dtype)
        for k, s in net.bn.items():
            s.running_mean = params[f"{k}.running_mean"].astype(net.dtype)
            s.running_var = params[f"{k}.running_var"].astype(net.dtype)
        return net.eval()


def kldnet_forward(k: KSpaceData, net: KldNet) -> Tensor:
    """Per-sample logits [n_freq, n_phase] for one k-space."""
    return net(prepare_input(k).astype(net.dtype))


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross entropy, stable for large |logit|.

    Fused so the gradient is exactly ``(sigmoid(z) - y) / N``; composing
    relu and abs would give a zero subgradient at the zero-initialized head.
    """
    z = logits.data
    y = np.asarray(target, dtype=z.dtype)
    if y.shape != z.shape:
        raise ValueError(f"target shape {y.shape} does not match logits {z.shape}")
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        sig = np.exp(-np.logaddexp(0, -z))
        logits._accumulate(g * (sig - y) / z.size)

    return make_node(np.asarray(loss.mean(), dtype=z.dtype), (logits,), backward, "bce_with_logits")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0


Sample = tuple[KSpaceData, np.ndarray]


def _line_target(labels: np.ndarray, n_freq: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 1:
        return np.broadcast_to(labels[None, :], (n_freq, labels.size))
    return labels


def _batch(samples: Sequence[Sample], dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([prepare_input(k) for k, _ in samples]).astype(dtype)
    y = np.stack([_line_target(lbl, k.n_freq) for k, lbl in samples]).astype(dtype)
    return x, y


def train_kldnet(dataset: Sequence[Sample], config: TrainConfig | None = None,
                 net: KldNet | None = None, resample: Callable[[int, int], Sample] | None = None,
                 on_epoch: Callable[[int, float], None] | None = None) -> tuple[KldNet, list[float]]:
    """Train with Adam on BCE-with-logits; returns the network and per-epoch mean loss.

    ``resample(epoch, i)``, when given, replaces sample ``i`` with a freshly
    simulated one at the start of each epoch after the first.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    config = config or TrainConfig()
    n_freq, n_phase = dataset[0][0].n_freq, dataset[0][0].n_phase
    net = net or KldNet(depth=default_depth(n_freq, n_phase), seed=config.seed)
    net.train()
    opt = Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    samples = list(dataset)
    curve = []
    for epoch in range(config.epochs):
        if resample is not None and epoch > 0:
            samples = [resample(epoch, i) for i in range(len(samples))]
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            chunk = [samples[i] for i in order[start:start + config.batch_size]]
            x, y = _batch(chunk, net.dtype)
            loss = bce_with_logits(net(x), y)
            loss.backward()
            opt.step()
            total += float(loss.data) * len(chunk)
            count += len(chunk)
        curve.append(total / count)
        logger.info("epoch %d loss %.5f", epoch, curve[-1])
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return net.eval(), curve


def default_depth(h: int, w: int) -> int:
    """Four levels for full-size grids; two for small grids up to 64 lines."""
    return 4 if min(h, w) > 64 else 2


def validation_loss(net: KldNet, dataset: Sequence[Sample], batch_size: int = 8) -> float:
    net.eval()
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        x, y = _batch(chunk, net.dtype)
        total += float(bce_with_logits(net(x), y).data) * len(chunk)
    return total / len(dataset)


def detect_lines(k: KSpaceData, net: KldNet, line_fraction: float = 0.2) -> np.ndarray:
    net.eval()
    return mask_to_lines(kldnet_forward(k, net).data, 0.5, line_fraction)


def detect_groups(k: KSpaceData, net: KldNet) -> MovementGroups:
    return group_movements(detect_lines(k, net))


@dataclass
class DetectionScores:
    pixel_accuracy: float
    line_f1: float
    line_precision: float
    line_recall: float


def score_detector(net: KldNet, dataset: Sequence[Sample]) -> DetectionScores:
    """Pixel accuracy of thresholded logits and line-level F1 over ``dataset``."""
    net.eval()
    correct = total = 0
    tp = fp = fn = 0
    for k, labels in dataset:
        logits = kldnet_forward(k, net).data
        target = _line_target(labels, k.n_freq)
        correct += int(((logits > 0) == (target > 0.5)).sum())
        total += target.size
        pred = mask_to_lines(logits).astype(bool)
        truth = np.asarray(labels).astype(bool) if np.ndim(labels) == 1 else target.mean(axis=0) > 0.5
        tp += int((pred & truth).sum())
        fp += int((pred & ~truth).sum())
        fn += int((~pred & truth).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetectionScores(correct / total, f1, precision, recall)
