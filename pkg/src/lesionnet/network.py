"""Lesion-Net assembly: residual units, down/up blocks and the full graph.

Layout (default widths)::

    image (3) -> coord channels (5) -> stem conv 3x3 s1 (32)
      down1..down4: conv 3x3 s2 -> 2 residual units       64, 128, 256, 512
      up1..up4:     deconv 2x2 s2 -> concat skip -> align conv 3x3 -> 2 residual units
                                                           256, 128, 64, 32
      head: conv 1x1 -> softmax over classes

Skip partners by resolution: down3 -> up1, down2 -> up2, down1 -> up3,
stem -> up4. Every convolution except the head is followed by batch norm and
ReLU; inside a residual unit the last ReLU comes after the skip addition.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from .coordconv import coordconv_apply
from .layers import (
    Conv2d,
    ConvBNReLU,
    ConvSpec,
    Deconv2d,
    Parameter,
    StateError,
    relu,
    relu_backward,
    softmax_backward,
    softmax_channels,
)
from .tensor import ShapeError, check_tensor, concat_channels, elementwise_add


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    use_coordconv: bool = True
    res_unit_depth: int = 3
    stem_width: int = 32
    encoder_widths: tuple = (64, 128, 256, 512)
    decoder_widths: tuple = (256, 128, 64, 32)
    classes: int = 2
    input_size: tuple = (256, 256)
    coord_scale: bool = True
    width_multiplier: float = 1.0

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.decoder_widths = tuple(int(w) for w in self.decoder_widths)
        if isinstance(self.input_size, int):
            self.input_size = (self.input_size, self.input_size)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    def validate(self):
        if self.res_unit_depth not in (2, 3):
            raise ConfigError(f"res_unit_depth must be 2 or 3, got {self.res_unit_depth}")
        if self.classes not in (2, 3):
            raise ConfigError(f"classes must be 2 or 3, got {self.classes}")
        if len(self.encoder_widths) != 4 or len(self.decoder_widths) != 4:
            raise ConfigError("encoder_widths and decoder_widths need exactly 4 entries")
        enc, dec = self.scaled_encoder_widths, self.scaled_decoder_widths
        if any(b <= a for a, b in zip(enc, enc[1:])):
            raise ConfigError(f"encoder widths must be strictly increasing, got {enc}")
        if any(b >= a for a, b in zip(dec, dec[1:])):
            raise ConfigError(f"decoder widths must be strictly decreasing, got {dec}")
        if len(self.input_size) != 2 or any(s < 16 or s % 16 for s in self.input_size):
            raise ConfigError(f"input_size must be positive multiples of 16, got {self.input_size}")
        if not 0 < self.width_multiplier <= 1:
            raise ConfigError(f"width_multiplier must lie in (0, 1], got {self.width_multiplier}")

    def _scale(self, w):
        return max(1, int(round(w * self.width_multiplier)))

    @property
    def in_channels(self) -> int:
        return 5 if self.use_coordconv else 3

    @property
    def scaled_stem_width(self) -> int:
        return self._scale(self.stem_width)

    @property
    def scaled_encoder_widths(self) -> tuple:
        return tuple(self._scale(w) for w in self.encoder_widths)

    @property
    def scaled_decoder_widths(self) -> tuple:
        return tuple(self._scale(w) for w in self.decoder_widths)

    def to_record(self) -> dict:
        """Flat ``str -> str`` mapping used by the checkpoint header."""
        rec = {}
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                rec[k] = "1" if v else "0"
            elif isinstance(v, (tuple, list)):
                rec[k] = ",".join(str(i) for i in v)
            else:
                rec[k] = repr(v)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "NetworkConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in rec:
                continue
            raw = rec[f.name]
            if f.name in ("use_coordconv", "coord_scale"):
                kw[f.name] = raw == "1"
            elif f.name in ("encoder_widths", "decoder_widths", "input_size"):
                kw[f.name] = tuple(int(i) for i in raw.split(","))
            elif f.name == "width_multiplier":
                kw[f.name] = float(raw)
            else:
                kw[f.name] = int(raw)
        return cls(**kw)


class ResidualUnit:
    """``relu(x + F(x))`` with F = depth x (conv 3x3 -> BN -> relu), last relu deferred."""

    def __init__(self, channels: int, depth: int, name: str, rng):
        self.channels = channels
        self.depth = depth
        spec = ConvSpec(channels, channels, 3, 1)
        self.layers = [
            ConvBNReLU(spec, f"{name}.layer{i + 1}", rng, activate=i < depth - 1)
            for i in range(depth)
        ]
        self._pre = None

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x, training=True):
        if x.shape[1] != self.channels:
            raise ShapeError(f"residual unit expects {self.channels} channels, got {x.shape[1]}")
        y = x
        for layer in self.layers:
            y = layer.forward(y, training)
        pre = elementwise_add(x, y)
        self._pre = pre if training else None
        return relu(pre)

    def backward(self, dout):
        if self._pre is None:
            raise StateError("residual unit backward called before a training forward")
        dpre = relu_backward(self._pre, dout)
        dy = dpre
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dpre + dy


class DownBlock:
    def __init__(self, in_ch: int, width: int, depth: int, name: str, rng):
        self.entry = ConvBNReLU(ConvSpec(in_ch, width, 3, 2), f"{name}.entry", rng)
        self.units = [ResidualUnit(width, depth, f"{name}.res{i + 1}", rng) for i in range(2)]

    def modules(self):
        return [self.entry, *self.units]

    def forward(self, x, training=True):
        x = self.entry.forward(x, training)
        for u in self.units:
            x = u.forward(x, training)
        return x

    def backward(self, dout):
        for u in reversed(self.units):
            dout = u.backward(dout)
        return self.entry.backward(dout)


class UpBlock:
    def __init__(self, in_ch: int, skip_ch: int, width: int, depth: int, name: str, rng):
        self.deconv = Deconv2d(in_ch, width, f"{name}.deconv", rng)
        self.align = ConvBNReLU(ConvSpec(width + skip_ch, width, 3, 1), f"{name}.align", rng)
        self.units = [ResidualUnit(width, depth, f"{name}.res{i + 1}", rng) for i in range(2)]
        self.width = width

    def modules(self):
        return [self.deconv, self.align, *self.units]

    def forward(self, x, skip, training=True):
        up = self.deconv.forward(x, training)
        x = self.align.forward(concat_channels(up, skip), training)
        for u in self.units:
            x = u.forward(x, training)
        return x

    def backward(self, dout):
        """Return ``(grad_input, grad_skip)``."""
        for u in reversed(self.units):
            dout = u.backward(dout)
        dcat = self.align.backward(dout)
        return self.deconv.backward(dcat[:, : self.width]), dcat[:, self.width :]


class LesionNet:
    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        depth = config.res_unit_depth
        stem_w = config.scaled_stem_width
        enc = config.scaled_encoder_widths
        dec = config.scaled_decoder_widths

        self.stem = ConvBNReLU(ConvSpec(config.in_channels, stem_w, 3, 1), "stem", rng)
        prev = stem_w
        self.down = []
        for i, w in enumerate(enc):
            self.down.append(DownBlock(prev, w, depth, f"down{i + 1}", rng))
            prev = w
        skips = [enc[2], enc[1], enc[0], stem_w]
        self.up = []
        for i, (w, s) in enumerate(zip(dec, skips)):
            self.up.append(UpBlock(prev, s, w, depth, f"up{i + 1}", rng))
            prev = w
        self.head = Conv2d(ConvSpec(prev, config.classes, 1, 1), "head", rng)

        self.registry: "OrderedDict[str, Parameter]" = OrderedDict()
        for p in self._all_parameters():
            if p.name in self.registry:
                raise ConfigError(f"duplicate parameter name {p.name}")
            self.registry[p.name] = p
        self._probs = None

    def _modules(self):
        mods = [self.stem]
        for b in self.down:
            mods.extend(b.modules())
        for b in self.up:
            mods.extend(b.modules())
        mods.append(self.head)
        return mods

    def _all_parameters(self):
        return [p for m in self._modules() for p in m.parameters()]

    def parameters(self):
        return list(self.registry.values())

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        """BatchNorm running statistics keyed by name."""
        out = OrderedDict()
        for m in self._modules():
            if hasattr(m, "buffers"):
                out.update(m.buffers())
        return out

    def zero_grad(self):
        for p in self.registry.values():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.registry.values())

    def forward_logits(self, x, training=True):
        n, c, h, w = check_tensor(x, "image")
        if c != 3:
            raise ShapeError(f"network expects 3 image channels, got {c}")
        if (h, w) != self.config.input_size:
            raise ShapeError(f"network built for {self.config.input_size}, got {(h, w)}")
        x = coordconv_apply(x, self.config.use_coordconv, self.config.coord_scale)
        x = x.astype(self.stem.conv.weight.value.dtype, copy=False)
        skip0 = self.stem.forward(x, training)
        feats = [skip0]
        y = skip0
        for b in self.down:
            y = b.forward(y, training)
            feats.append(y)
        # feats: stem, d1, d2, d3, d4
        for b, skip in zip(self.up, [feats[3], feats[2], feats[1], feats[0]]):
            y = b.forward(y, skip, training)
        return self.head.forward(y, training)

    def forward(self, x, training=True):
        probs = softmax_channels(self.forward_logits(x, training))
        self._probs = probs if training else None
        return probs

    def __call__(self, x):
        return self.forward(x, training=False)

    def backward(self, grad_probs=None, grad_logits=None):
        """Accumulate parameter gradients.

        Pass the loss gradient wrt the softmax output (``grad_probs``), wrt the
        logits (``grad_logits``), or both; they are summed at the logits.
        """
        if self._probs is None:
            raise StateError("network backward called before a training-mode forward")
        if grad_probs is None and grad_logits is None:
            raise ValueError("need grad_probs or grad_logits")
        g = np.zeros_like(self._probs)
        if grad_probs is not None:
            g += softmax_backward(self._probs, grad_probs)
        if grad_logits is not None:
            g += grad_logits
        g = self.head.backward(g)
        skip_grads = [None] * 4  # stem, d1, d2, d3
        for b, idx in zip(reversed(self.up), [0, 1, 2, 3]):
            g, gs = b.backward(g)
            skip_grads[idx] = gs
        # walk back down; down[i] output is feats[i + 1]
        for i in reversed(range(4)):
            g = self.down[i].backward(g)
            if i > 0:
                g = g + skip_grads[i]
        g = g + skip_grads[0]
        self.stem.backward(g)


def build_network(config: NetworkConfig, rng=None) -> LesionNet:
    if rng is None or isinstance(rng, int):
        rng = np.random.default_rng(rng)
    config.validate()
    return LesionNet(config, rng)


def network_forward(net: LesionNet, x, training=False):
    return net.forward(x, training)


def network_backward(net: LesionNet, upstream_grad):
    net.backward(grad_probs=upstream_grad)


def _conv_bn(cin, cout, k=3):
    return k * k * cin * cout + cout + 2 * cout


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form learnable element count for ``config``.

    With s = stem width, e_i / d_i the (scaled) encoder / decoder widths,
    R the residual depth, C the input channels (5 or 3) and K the classes::

        stem      9*C*s + 3s
        down_i    9*e_{i-1}*e_i + 3e_i + 2R(9e_i^2 + 3e_i)        (e_0 = s)
        up_i      4*d_{i-1}*d_i + d_i                              deconv (d_0 = e_4)
                  + 9*(d_i + k_i)*d_i + 3d_i + 2R(9d_i^2 + 3d_i)  k = (e_3, e_2, e_1, s)
        head      d_4*K + K
    """
    depth = config.res_unit_depth
    s = config.scaled_stem_width
    enc = config.scaled_encoder_widths
    dec = config.scaled_decoder_widths
    total = _conv_bn(config.in_channels, s)
    prev = s
    for w in enc:
        total += _conv_bn(prev, w) + 2 * depth * _conv_bn(w, w)
        prev = w
    for w, k in zip(dec, [enc[2], enc[1], enc[0], s]):
        total += 4 * prev * w + w
        total += _conv_bn(w + k, w) + 2 * depth * _conv_bn(w, w)
        prev = w
    total += prev * config.classes + config.classes
    return total
