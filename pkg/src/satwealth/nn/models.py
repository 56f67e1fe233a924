"""Toy-scale VGG-F-style and pre-activation ResNet-style classifiers.

Both share the same first-layer contract: an ``F x F`` convolution whose
input channels carry their own dilation rate (1, 2 or 4 for 15, 30 and
60 m bands), followed by an architecture-specific body, global average
pooling, a ReLU feature layer and a 3-way linear head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import BadShape, ShapeMismatch, ValidationError
from .functional import VALID_DILATIONS, adapt_first_layer
from .layers import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d, PreActBlock, ReLU, Sequential

ARCHITECTURES = ("VGGF_TOY", "RESNET18_TOY", "RESNET34_TOY")
BAND_MODES = {"RGB": 3, "ALL9": 9}
FIRST_LAYER = {"VGGF_TOY": (11, 4), "RESNET18_TOY": (7, 1), "RESNET34_TOY": (7, 1)}
FIRST_WIDTH = 16
FEATURE_DIM = 64
RESNET_STAGES = {"RESNET18_TOY": 2, "RESNET34_TOY": 3}
BLOCKS_PER_STAGE = 2
# classifier starts near-uniform; full He scale diverges under momentum 0.9
HEAD_INIT_SCALE = 0.1


@dataclass(frozen=True)
class ConvSpec:
    filter_size: int
    stride: int
    in_channels: int
    out_channels: int
    dilation_per_channel: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dilation_per_channel", tuple(int(d) for d in self.dilation_per_channel))
        if len(self.dilation_per_channel) != self.in_channels:
            raise ValidationError(
                f"{len(self.dilation_per_channel)} dilation rates for {self.in_channels} channels")
        if any(d not in VALID_DILATIONS for d in self.dilation_per_channel):
            raise ValidationError(f"dilation rates must be in {VALID_DILATIONS}")
        if self.filter_size < 1 or self.stride < 1 or self.out_channels < 1:
            raise ValidationError("filter size, stride and width must be positive")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    band_mode: str
    first_layer: ConvSpec
    feature_dim: int = FEATURE_DIM
    n_classes: int = 3

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}")
        if self.band_mode not in BAND_MODES:
            raise ValidationError(f"band_mode must be one of {sorted(BAND_MODES)}")
        if self.first_layer.in_channels != BAND_MODES[self.band_mode]:
            raise ValidationError(f"{self.band_mode} needs {BAND_MODES[self.band_mode]} input channels")
        if (self.first_layer.filter_size, self.first_layer.stride) != FIRST_LAYER[self.architecture]:
            f, s = FIRST_LAYER[self.architecture]
            raise ValidationError(f"{self.architecture} first layer must be {f}x{f} stride {s}")
        if self.n_classes != 3:
            raise ValidationError("the nightlight task has exactly 3 classes")
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be positive")

    @classmethod
    def default(cls, architecture="VGGF_TOY", band_mode="ALL9", dilations=None, feature_dim=FEATURE_DIM):
        f, s = FIRST_LAYER.get(architecture, (0, 0))
        c = BAND_MODES.get(band_mode, 0)
        dilations = tuple(dilations) if dilations is not None else (1,) * c
        return cls(architecture, band_mode, ConvSpec(f, s, c, FIRST_WIDTH, dilations), feature_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["first_layer"]["dilation_per_channel"] = list(self.first_layer.dilation_per_channel)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["architecture"], d["band_mode"], ConvSpec(**d["first_layer"]), d["feature_dim"],
                   d.get("n_classes", 3))


class Model(Sequential):
    """``body`` maps images to feature-layer activations; ``head`` maps those to logits."""

    def __init__(self, spec: ModelSpec, body: Sequential, head: Linear, dtype=np.float64):
        super().__init__()
        self.spec = spec
        self.body = body
        self.head = head
        self.dtype = np.dtype(dtype)
        self.cast(self.dtype)

    def children(self):
        return [("body", self.body), ("head", self.head)]

    @property
    def first_conv(self) -> Conv2d:
        return self.body.layers[0]

    def _check(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.spec.first_layer.in_channels:
            raise ShapeMismatch(
                f"{self.spec.band_mode} model expects [N, {self.spec.first_layer.in_channels}, H, W], "
                f"got {x.shape}")
        return x

    def features(self, x, train=False):
        return self.body.forward(self._check(x), train)

    def forward(self, x, train=False):
        return self.head.forward(self.features(x, train), train)

    def backward(self, grad):
        return self.body.backward(self.head.backward(grad))

    def state(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in declaration order."""
        out = dict(self.named_params())
        out.update(self.named_buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        targets = {}
        for prefix, layer in _leaf_layers(self):
            for k in layer.params:
                targets[prefix + k] = (layer.params, k)
            for k in layer.buffers:
                targets[prefix + k] = (layer.buffers, k)
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise ShapeMismatch(f"state mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, (store, k) in targets.items():
            value = np.asarray(state[name])
            if value.shape != store[k].shape:
                raise ShapeMismatch(f"{name}: shape {value.shape} != {store[k].shape}")
            store[k] = value.astype(self.dtype)
        self.zero_grad()


def _leaf_layers(layer, prefix=""):
    if isinstance(layer, Sequential):
        for name, child in layer.children():
            yield from _leaf_layers(child, f"{prefix}{name}.")
    else:
        yield prefix, layer


def build_model(spec: ModelSpec, seed=0, pretrained_rgb=None, dtype=np.float64) -> Model:
    """Assemble a freshly initialized network for ``spec``.

    ``pretrained_rgb`` optionally supplies ``[F, F, 3, K]`` first-layer weights
    (an array, or a dict with ``weight`` and optional ``bias``). For ``ALL9``
    models they are widened with :func:`adapt_first_layer`. Everything else is
    He-initialized from ``seed``.
    """
    rng = np.random.default_rng(seed)
    fl = spec.first_layer
    first = Conv2d(fl.in_channels, fl.out_channels, fl.filter_size, fl.stride, fl.dilation_per_channel,
                   rng=rng, input_grad=False)
    w = FIRST_WIDTH
    if spec.architecture == "VGGF_TOY":
        layers = [first, ReLU(), MaxPool2d(2),
                  Conv2d(w, 2 * w, 3, rng=rng), ReLU(),
                  Conv2d(2 * w, 4 * w, 3, rng=rng), ReLU()]
        width = 4 * w
    else:
        layers = [first, MaxPool2d(3, 2, pad=1)]
        width = w
        for stage in range(RESNET_STAGES[spec.architecture]):
            out = w * 2 ** stage
            for b in range(BLOCKS_PER_STAGE):
                stride = 2 if (stage > 0 and b == 0) else 1
                layers.append(PreActBlock(width, out, stride, rng=rng))
                width = out
        layers += [BatchNorm2d(width), ReLU()]
    layers += [GlobalAvgPool(), Linear(width, spec.feature_dim, rng=rng), ReLU()]
    head = Linear(spec.feature_dim, spec.n_classes, rng=rng)
    head.params["weight"] *= HEAD_INIT_SCALE
    model = Model(spec, Sequential(*layers), head, dtype)

    if pretrained_rgb is not None:
        if isinstance(pretrained_rgb, dict):
            weight, bias = pretrained_rgb["weight"], pretrained_rgb.get("bias")
        else:
            weight, bias = pretrained_rgb, None
        weight = np.asarray(weight)
        expected = (fl.filter_size, fl.filter_size, 3, fl.out_channels)
        if weight.shape != expected:
            raise BadShape(f"pretrained first layer {weight.shape} != {expected}")
        if spec.band_mode == "ALL9":
            weight = adapt_first_layer(weight, 9)
        model.first_conv.params["weight"] = weight.astype(model.dtype)
        if bias is not None:
            model.first_conv.params["bias"] = np.asarray(bias, dtype=model.dtype)
        model.zero_grad()
    return model
