"""Shallow hyperspectral classifier with a swappable first layer.

The network is: first layer (plain conv / depthwise-separable / wavelength-
aware, plain or extended) -> ReLU -> depthwise-separable convs with ReLU ->
global average pooling -> dense head. Wavelength-aware first layers accept any
channel count at forward time; the fixed kinds require a configured C_in.

No batch normalization and no convolution biases: parameter counts stay
exactly the product of the kernel shapes, and gradient checking stays clean.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ConfigError, FormatError, InputError
from .wroi import HyveConvLayer

__all__ = [
    "FIRST_LAYER_KINDS",
    "ModelConfig",
    "Model",
    "build_model",
    "count_parameters",
    "save_model",
    "load_model",
]

FIRST_LAYER_KINDS = ("conv2d", "ds", "hyve", "hyve++")


@dataclass
class ModelConfig:
    first_layer: str
    num_classes: int
    widths: tuple = (25, 30, 50)
    kernel_size: int = 3
    num_wrois: int = 5
    c_in: int | None = None
    wavelength_range: tuple | None = None
    seed: int = 0
    initial_variance: float | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.wavelength_range is not None:
            self.wavelength_range = (float(self.wavelength_range[0]),
                                     float(self.wavelength_range[1]))

    @property
    def wavelength_aware(self):
        return self.first_layer in ("hyve", "hyve++")

    def validate(self):
        if self.first_layer not in FIRST_LAYER_KINDS:
            raise ConfigError("unknown first layer kind %r (expected one of %r)"
                              % (self.first_layer, FIRST_LAYER_KINDS))
        if not self.widths:
            raise ConfigError("widths must be non-empty")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel size must be odd")
        if self.wavelength_aware:
            if self.c_in is not None:
                raise ConfigError("wavelength-aware first layers take channel counts "
                                  "from the data; do not configure c_in")
            if self.wavelength_range is None:
                raise ConfigError("wavelength-aware first layers need a wavelength_range")
            if self.num_wrois < 1:
                raise ConfigError("num_wrois must be >= 1")
        else:
            if self.c_in is None:
                raise ConfigError("%r first layer needs a fixed c_in" % self.first_layer)


class Conv2DLayer:
    def __init__(self, c_in, c_out, k, padding, rng):
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = Variable(rng.normal(0.0, std, (c_in, c_out, k, k)), requires_grad=True)
        self.padding = padding

    def params(self):
        return [("weight", self.weight)]

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.padding)


class DepthwiseSeparableLayer:
    def __init__(self, c_in, c_out, k, padding, rng):
        self.w_spatial = Variable(rng.normal(0.0, math.sqrt(2.0 / (k * k)), (c_in, 1, k, k)),
                                  requires_grad=True)
        self.w_depth = Variable(rng.normal(0.0, math.sqrt(2.0 / c_in), (c_in, c_out, 1, 1)),
                                requires_grad=True)
        self.padding = padding

    def params(self):
        return [("w_spatial", self.w_spatial), ("w_depth", self.w_depth)]

    def forward(self, x):
        return ad.depthwise_separable_conv(x, self.w_spatial, self.w_depth, self.padding)


class DenseLayer:
    def __init__(self, n_in, n_out, rng):
        self.weight = Variable(rng.normal(0.0, math.sqrt(1.0 / n_in), (n_in, n_out)),
                               requires_grad=True)
        self.bias = Variable(np.zeros(n_out), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        return ad.dense(x, self.weight, self.bias)


class Model:
    """Layer stack plus a registry of every trainable Variable."""

    def __init__(self, config, first, hidden, head):
        self.config = config
        self.first = first
        self.hidden = hidden
        self.head = head

    def parameters(self):
        out = [("first." + n, p) for n, p in self.first.params()]
        for i, layer in enumerate(self.hidden):
            out += [("hidden%d.%s" % (i, n), p) for n, p in layer.params()]
        out += [("head." + n, p) for n, p in self.head.params()]
        return out

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    @property
    def wavelength_aware(self):
        return self.config.wavelength_aware

    def forward(self, x, wavelengths=None):
        x = x if isinstance(x, Variable) else Variable(x)
        if self.wavelength_aware:
            if wavelengths is None:
                raise InputError("wavelength-aware model needs the channel wavelengths")
            h = self.first.forward(x, wavelengths)
        else:
            if wavelengths is not None:
                raise InputError("fixed-channel model does not take wavelengths")
            if x.shape[1] != self.config.c_in:
                raise InputError("model configured for %d channels, input has %d"
                                 % (self.config.c_in, x.shape[1]))
            h = self.first.forward(x)
        h = ad.relu(h)
        for layer in self.hidden:
            h = ad.relu(layer.forward(h))
        return self.head.forward(ad.global_avg_pool(h))


def build_model(config: ModelConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    pad = k // 2
    widths = config.widths
    if config.first_layer == "conv2d":
        first = Conv2DLayer(config.c_in, widths[0], k, pad, rng)
    elif config.first_layer == "ds":
        first = DepthwiseSeparableLayer(config.c_in, widths[0], k, pad, rng)
    else:
        first = HyveConvLayer(
            config.num_wrois, widths[0], k, pad, config.wavelength_range, rng,
            extended=(config.first_layer == "hyve++"),
            initial_variance=config.initial_variance)
    hidden = []
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        hidden.append(DepthwiseSeparableLayer(c_in, c_out, k, pad, rng))
    head = DenseLayer(widths[-1], config.num_classes, rng)
    return Model(config, first, hidden, head)


def count_parameters(obj) -> int:
    """Total trainable scalar count of a Model, a layer, or a Variable."""
    if isinstance(obj, Variable):
        return int(obj.size)
    if hasattr(obj, "parameters"):
        return sum(int(p.size) for _, p in obj.parameters())
    if hasattr(obj, "params"):
        return sum(int(p.size) for _, p in obj.params())
    raise TypeError("cannot count parameters of %r" % type(obj))


# ---------------------------------------------------------------------------
# checkpoint format: three text header lines, then raw little-endian float64
# parameter buffers in registry order.

_MAGIC = b"HYVENET 1\n"


def save_model(model: Model, path, extras=None) -> None:
    header = {"config": asdict(model.config)}
    if extras:
        header["extras"] = dict(extras)
    params = model.parameters()
    manifest = [[name, list(p.shape)] for name, p in params]
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    buf.write(json.dumps(manifest).encode() + b"\n")
    for _, p in params:
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_model(path):
    """Rebuild a Model from a checkpoint; returns (model, extras dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise FormatError("%s: bad magic in first %d bytes" % (path, len(_MAGIC)))
    rest = blob[len(_MAGIC):]
    try:
        header_line, rest = rest.split(b"\n", 1)
        manifest_line, payload = rest.split(b"\n", 1)
        header = json.loads(header_line)
        manifest = json.loads(manifest_line)
    except (ValueError, json.JSONDecodeError) as exc:
        raise FormatError("%s: malformed checkpoint header: %s" % (path, exc)) from exc
    cfg_dict = dict(header["config"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    if cfg_dict.get("wavelength_range") is not None:
        cfg_dict["wavelength_range"] = tuple(cfg_dict["wavelength_range"])
    config = ModelConfig(**cfg_dict)
    model = build_model(config)
    params = model.parameters()
    if [name for name, _ in params] != [name for name, _ in manifest]:
        raise FormatError("%s: parameter manifest does not match the rebuilt model" % path)
    offset = 0
    for (name, p), (_, shape) in zip(params, manifest):
        if list(p.shape) != list(shape):
            raise FormatError("%s: parameter %r has shape %r, expected %r"
                              % (path, name, list(p.shape), shape))
        nbytes = p.size * 8
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError("%s: payload truncated at byte %d of parameter %r "
                              "(needed %d bytes, got %d)"
                              % (path, offset, name, nbytes, len(chunk)))
        p.value = np.frombuffer(chunk, dtype="<f8").reshape(p.shape).copy()
        p.grad = np.zeros_like(p.value)
        offset += nbytes
    if offset != len(payload):
        raise FormatError("%s: %d trailing bytes after last parameter"
                          % (path, len(payload) - offset))
    return model, header.get("extras", {})
