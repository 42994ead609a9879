"""Miniature fully-convolutional pose regressor and its trainer.

The network is deliberately small so that training runs in seconds on a CPU
while still exercising every loss path: a stack of 3x3 same-padded
convolutions with ReLU, 2x2 average pooling after each hidden stage, and a
final 1x1 convolution with sigmoid outputs mapping to the S x S x C grid
tensor. All gradients are exact reverse-mode derivatives computed here, so
they can be checked against finite differences.

Checkpoint format (little-endian): magic ``OPNP``, u32 version, u32 length of
a JSON metadata blob (model config plus caller metadata), the blob, then the
parameter tensors as f32 in declaration order (per hidden stage kernel and
bias, then head kernel and bias).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .gridcodec import FormatError, GridTensor
from .losses import LossSpec

CHECKPOINT_MAGIC = b"OPNP"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``channels`` is the per-stage channel plan: one entry per hidden stage,
    each either an int (one convolution) or a tuple of conv widths. A 2x2
    average pooling follows every hidden stage, so ``input_size / grid_size``
    must equal ``2 ** len(channels)``.
    """

    input_size: int = 32
    grid_size: int = 8
    channels: tuple = (16, 32)
    out_channels: int = 8
    seed: int = 0

    def __post_init__(self):
        stages = tuple(
            tuple(int(c) for c in stage) if isinstance(stage, (tuple, list)) else (int(stage),)
            for stage in self.channels
        )
        object.__setattr__(self, "channels", stages)
        widths = [c for stage in stages for c in stage]
        if not widths:
            raise ValueError("at least one hidden stage is required")
        for value in (self.input_size, self.grid_size, *widths, self.out_channels):
            if value <= 0:
                raise ValueError("all sizes must be positive")
        for size in (self.input_size, self.grid_size):
            if size & (size - 1):
                raise ValueError(f"{size} is not a power of two")
        if self.input_size // self.grid_size != 2 ** len(stages):
            raise ValueError(
                f"input {self.input_size} / grid {self.grid_size} must equal "
                f"2^{len(stages)} pooling stages"
            )

    @property
    def conv_widths(self) -> list[int]:
        return [c for stage in self.channels for c in stage]

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "grid_size": self.grid_size,
            "channels": [list(stage) for stage in self.channels],
            "out_channels": self.out_channels,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(
            input_size=int(raw["input_size"]),
            grid_size=int(raw["grid_size"]),
            channels=tuple(raw["channels"]),
            out_channels=int(raw["out_channels"]),
            seed=int(raw.get("seed", 0)),
        )


@dataclass
class ModelParams:
    """Convolution kernels and biases, in declaration order."""

    stage_weights: list[np.ndarray]  # (Cout, Cin, 3, 3)
    stage_biases: list[np.ndarray]  # (Cout,)
    head_weight: np.ndarray  # (C, Clast)
    head_bias: np.ndarray  # (C,)

    def flat(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.stage_weights, self.stage_biases):
            out += [w, b]
        out += [self.head_weight, self.head_bias]
        return out

    def check_finite(self) -> None:
        if not all(np.all(np.isfinite(a)) for a in self.flat()):
            raise TrainingDivergedError("non-finite parameter values")


def init_params(config: ModelConfig) -> ModelParams:
    """He-uniform kernels, zero biases, seeded by the model config."""
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    c_in = 1
    for c_out in config.conv_widths:
        limit = np.sqrt(6.0 / (c_in * 9))
        weights.append(rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3)))
        biases.append(np.zeros(c_out))
        c_in = c_out
    limit = np.sqrt(6.0 / c_in)
    head_w = rng.uniform(-limit, limit, size=(config.out_channels, c_in))
    return ModelParams(weights, biases, head_w, np.zeros(config.out_channels))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, _, h, width = x.shape
    c_out = w.shape[0]
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (3, 3), axis=(2, 3))  # (N, Cin, H, W, 3, 3)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * width, -1)
    out = cols @ w.reshape(c_out, -1).T + b
    return out.transpose(0, 2, 1).reshape(n, c_out, h, width), cols


def _conv3x3_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape):
    n, c_in, h, width = x_shape
    c_out = w.shape[0]
    dflat = dout.reshape(n, c_out, h * width).transpose(0, 2, 1)  # (N, HW, Cout)
    dw = np.tensordot(dflat, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    db = dflat.sum(axis=(0, 1))
    dcols = dflat @ w.reshape(c_out, -1)  # (N, HW, Cin*9)
    dcols = dcols.reshape(n, h, width, c_in, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    dpad = np.zeros((n, c_in, h + 2, width + 2))
    for dy in range(3):
        for dx in range(3):
            dpad[:, :, dy : dy + h, dx : dx + width] += dcols[:, :, dy, dx]
    return dpad[:, :, 1 : h + 1, 1 : width + 1], dw, db


def _pool2_forward(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool2_backward(dout: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0


def _forward_batch(images: np.ndarray, params: ModelParams, config: ModelConfig):
    """images: (N, H, W) normalized depth. Returns (N, S, S, C) and a cache."""
    if images.ndim != 3 or images.shape[1:] != (config.input_size, config.input_size):
        raise ValueError(
            f"expected images (N, {config.input_size}, {config.input_size}), got {images.shape}"
        )
    x = images[:, None, :, :].astype(float)
    cache = {"cols": [], "relu": [], "shapes": []}
    conv = 0
    for stage in config.channels:
        for _ in stage:
            cache["shapes"].append(x.shape)
            z, cols = _conv3x3_forward(x, params.stage_weights[conv], params.stage_biases[conv])
            cache["cols"].append(cols)
            mask = z > 0
            cache["relu"].append(mask)
            x = z * mask
            conv += 1
        x = _pool2_forward(x)
    cache["head_in"] = x
    logits = np.einsum("kc,nchw->nkhw", params.head_weight, x) + params.head_bias[:, None, None]
    pred = _sigmoid(logits)
    cache["pred"] = pred
    return pred.transpose(0, 2, 3, 1), cache


def _backward_batch(dpred: np.ndarray, cache, params: ModelParams, config: ModelConfig) -> ModelParams:
    """dpred: (N, S, S, C) gradient on the sigmoid outputs."""
    pred = cache["pred"]
    dlogits = dpred.transpose(0, 3, 1, 2) * pred * (1.0 - pred)
    head_in = cache["head_in"]
    dhead_w = np.einsum("nkhw,nchw->kc", dlogits, head_in)
    dhead_b = dlogits.sum(axis=(0, 2, 3))
    dx = np.einsum("kc,nkhw->nchw", params.head_weight, dlogits)
    dws, dbs = [], []
    conv = len(params.stage_weights)
    for stage in reversed(config.channels):
        dx = _pool2_backward(dx)
        for _ in reversed(stage):
            conv -= 1
            dz = dx * cache["relu"][conv]
            dx, dw, db = _conv3x3_backward(
                dz, cache["cols"][conv], params.stage_weights[conv], cache["shapes"][conv]
            )
            dws.append(dw)
            dbs.append(db)
    return ModelParams(dws[::-1], dbs[::-1], dhead_w, dhead_b)


def forward(image: np.ndarray, params: ModelParams, config: ModelConfig) -> GridTensor:
    """Run one normalized depth image through the network."""
    pred, _ = _forward_batch(np.asarray(image, dtype=float)[None], params, config)
    return GridTensor(pred[0])


def backward(
    image: np.ndarray,
    target: GridTensor,
    params: ModelParams,
    config: ModelConfig,
    loss_spec: LossSpec,
) -> tuple[ModelParams, float]:
    """Exact parameter gradients of the total loss for one image."""
    grads, loss = _loss_and_grads(np.asarray(image, dtype=float)[None], [target], params, config, loss_spec)
    return grads, loss


def _loss_and_grads(
    images: np.ndarray,
    targets: Sequence[GridTensor],
    params: ModelParams,
    config: ModelConfig,
    loss_spec: LossSpec,
) -> tuple[ModelParams, float]:
    """Mean loss over the batch and the matching parameter gradients."""
    preds, cache = _forward_batch(images, params, config)
    n = preds.shape[0]
    dpred = np.empty_like(preds)
    total = 0.0
    for i in range(n):
        loss_i, grad_i = loss_spec.loss_and_grad(targets[i], GridTensor(preds[i]))
        total += loss_i
        dpred[i] = grad_i.values / n
    grads = _backward_batch(dpred, cache, params, config)
    return grads, total / n


class Adam:
    """Adam with the usual bias correction; state per parameter tensor."""

    def __init__(self, arrays: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class PlateauScheduler:
    """Divide the learning rate when the monitored loss stops improving.

    After ``patience`` consecutive epochs without a new best loss the rate is
    divided by ``factor`` and the stall counter restarts.
    """

    def __init__(self, lr: float, patience: int, factor: float):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.stall = 0

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stall = 0
        else:
            self.stall += 1
            if self.stall >= self.patience:
                self.lr /= self.factor
                self.stall = 0
        return self.lr


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    plateau_patience: int = 3
    lr_decay_factor: float = 10.0
    epochs: int = 50
    batch_size: int = 8
    loss_variant: str = "ori1"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.plateau_patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float  # NaN when no validation split is used
    lr: float


def train(
    dataset: Sequence[tuple[np.ndarray, GridTensor]],
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_spec: LossSpec,
    rng: np.random.Generator,
    val_dataset: Sequence[tuple[np.ndarray, GridTensor]] | None = None,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Adam training loop with plateau learning-rate decay.

    The monitored loss is the validation loss when a validation set is given,
    otherwise the epoch's mean training loss. Deterministic for a fixed
    generator state and single-threaded execution.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    params = init_params(model_config)
    optimizer = Adam(params.flat(), train_config.learning_rate)
    scheduler = PlateauScheduler(
        train_config.learning_rate, train_config.plateau_patience, train_config.lr_decay_factor
    )
    images = np.stack([np.asarray(img, dtype=float) for img, _ in dataset])
    targets = [t for _, t in dataset]
    history: list[EpochRecord] = []

    for epoch in range(train_config.epochs):
        optimizer.lr = scheduler.lr
        order = rng.permutation(len(dataset))
        running = 0.0
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            grads, loss = _loss_and_grads(
                images[batch], [targets[i] for i in batch], params, model_config, loss_spec
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss} at epoch {epoch}")
            optimizer.step(grads.flat())
            running += loss * len(batch)
        train_loss = running / len(dataset)

        val_loss = float("nan")
        if val_dataset:
            val_images = np.stack([np.asarray(img, dtype=float) for img, _ in val_dataset])
            val_preds, _ = _forward_batch(val_images, params, model_config)
            val_loss = float(
                np.mean(
                    [
                        loss_spec.loss_and_grad(t, GridTensor(val_preds[i]))[0]
                        for i, (_, t) in enumerate(val_dataset)
                    ]
                )
            )
        history.append(EpochRecord(epoch, train_loss, val_loss, optimizer.lr))
        scheduler.update(val_loss if val_dataset else train_loss)
    params.check_finite()
    return params, history


# ---------------------------------------------------------------------------
# checkpoint and history files
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, config: ModelConfig, meta: dict | None = None) -> None:
    blob = json.dumps({"model": config.to_dict(), "meta": meta or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for tensor in params.flat():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, blob_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + blob_len].decode())
    config = ModelConfig.from_dict(header["model"])
    reference = init_params(config)
    offset = 12 + blob_len
    tensors = []
    for ref in reference.flat():
        count = ref.size
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        if arr.size != count:
            raise FormatError(f"{path}: truncated parameter payload")
        tensors.append(arr.astype(float).reshape(ref.shape))
        offset += count * 4
    n_stages = len(reference.stage_weights)
    params = ModelParams(
        stage_weights=tensors[0 : 2 * n_stages : 2],
        stage_biases=tensors[1 : 2 * n_stages : 2],
        head_weight=tensors[-2],
        head_bias=tensors[-1],
    )
    return params, config, header.get("meta", {})


def save_history(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss), repr(rec.lr)])
