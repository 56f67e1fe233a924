"""Nightlight-class pretraining, checkpoints and feature extraction."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .._io import atomic_write
from ..errors import EmptyDataset, NonFiniteLoss, ShapeMismatch, ValidationError
from .functional import softmax_cross_entropy
from .models import Model, ModelSpec, _leaf_layers, build_model

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SWCKPT01"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    learning_rate: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass
class Checkpoint:
    spec: ModelSpec
    state: dict[str, np.ndarray]
    epoch: int
    val_accuracy: float
    seed: int = 0
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    _model: Model | None = field(default=None, repr=False, compare=False)

    def model(self, dtype=np.float32) -> Model:
        """Network with this checkpoint's weights; built once and cached."""
        if self._model is None or self._model.dtype != np.dtype(dtype):
            m = build_model(self.spec, self.seed, dtype=dtype)
            m.load_state(self.state)
            self._model = m
        return self._model

    def save(self, path):
        """Header (JSON) followed by little-endian float32 blobs in declaration order."""
        names = list(self.state)
        header = {
            "architecture": self.spec.architecture,
            "band_mode": self.spec.band_mode,
            "spec": self.spec.to_dict(),
            "seed": int(self.seed),
            "epoch": int(self.epoch),
            "val_accuracy": float(self.val_accuracy),
            "tensors": [{"name": n, "shape": list(self.state[n].shape)} for n in names],
            "history": self.history,
            "extra": self.extra,
        }
        head = json.dumps(header, sort_keys=True).encode()
        blobs = b"".join(np.ascontiguousarray(self.state[n], dtype="<f4").tobytes() for n in names)
        return atomic_write(path, CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + blobs)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = open(path, "rb").read()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16: 16 + n])
        offset = 16 + n
        state = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            state[t["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(t["shape"]).copy()
            offset += 4 * count
        if offset != len(raw):
            raise ValidationError(f"{path}: {len(raw) - offset} trailing bytes")
        return cls(ModelSpec.from_dict(header["spec"]), state, header["epoch"], header["val_accuracy"],
                   header["seed"], header.get("history", []), header.get("extra", {}))


def _check_dataset(name, data, n_channels):
    x, y = data
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise EmptyDataset(f"{name} dataset is empty")
    if x.ndim != 4 or x.shape[1] != n_channels or len(y) != len(x):
        raise ShapeMismatch(f"{name} dataset: images {x.shape}, labels {y.shape}")
    if y.min() < 0 or y.max() > 2:
        raise ValidationError(f"{name} labels must be in {{0, 1, 2}}")
    return x, y


def predict_logits(model: Model, x, batch_size=64):
    out = [model.forward(x[i: i + batch_size], train=False) for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def accuracy(model: Model, x, y, batch_size=64) -> float:
    pred = predict_logits(model, x, batch_size).argmax(axis=1)
    return float((pred == np.asarray(y)).mean())


def pretrain(model: Model, train, val, config: TrainConfig = TrainConfig()) -> Checkpoint:
    """SGD with momentum on softmax cross-entropy; keep the best validation epoch.

    ``train`` and ``val`` are ``(images [N, C, H, W], labels [N])`` pairs.
    Ties in validation accuracy go to the earliest epoch. On return the model
    holds the weights of the selected epoch.
    """
    c = model.spec.first_layer.in_channels
    xtr, ytr = _check_dataset("train", train, c)
    xva, yva = _check_dataset("val", val, c)
    rng = np.random.default_rng(config.seed)
    params = [(layer_params, k) for layer_params, k in _param_slots(model)]
    velocity = [np.zeros_like(p[k]) for p, k in params]
    lr = model.dtype.type(config.learning_rate)
    mom = model.dtype.type(config.momentum)
    wd = model.dtype.type(config.weight_decay)

    best = None
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(xtr))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start: start + config.batch_size]
            model.zero_grad()
            logits = model.forward(xtr[idx], train=True)
            loss, grad = softmax_cross_entropy(logits, ytr[idx])
            if not math.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss {loss} at epoch {epoch}, batch {b} (learning_rate={config.learning_rate})")
            model.backward(grad.astype(model.dtype))
            for (store, k), v, g in zip(params, velocity, _grad_slots(model)):
                v *= mom
                v += g + wd * store[k]
                store[k] -= lr * v
            losses.append(float(loss) * len(idx))
        train_loss = sum(losses) / len(xtr)
        val_acc = accuracy(model, xva, yva)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_accuracy": val_acc})
        log.info("epoch %d: train loss %.4f, val accuracy %.4f", epoch, train_loss, val_acc)
        if best is None or val_acc > best[1]:
            best = (epoch, val_acc, {k: v.copy() for k, v in model.state().items()})

    epoch, val_acc, state = best
    model.load_state(state)
    return Checkpoint(model.spec, state, epoch, val_acc, config.seed, history)


def _param_slots(model):
    for _, layer in _leaf_layers(model):
        for k in layer.params:
            yield layer.params, k


def _grad_slots(model):
    for _, layer in _leaf_layers(model):
        for k in layer.params:
            yield layer.grads[k]


def extract_features(checkpoint: Checkpoint, tensor, batch_size=64, dtype=np.float32):
    """Feature-layer activations for one ``[C, H, W]`` tensor or a ``[N, C, H, W]`` batch."""
    model = checkpoint.model(dtype)
    x = np.asarray(tensor)
    single = x.ndim == 3
    if single:
        x = x[None]
    c = checkpoint.spec.first_layer.in_channels
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeMismatch(f"{checkpoint.spec.band_mode} checkpoint expects {c}-channel input, got {x.shape}")
    feats = np.concatenate([model.features(x[i: i + batch_size]) for i in range(0, len(x), batch_size)])
    return feats[0] if single else feats
