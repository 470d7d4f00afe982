"""CMU-Net: U-Net encoder/decoder with a ConvMixer bottleneck and
multi-scale attention gates on the skip connections.

Parameters live in flat dicts keyed by dotted names. The name set is a pure
function of :class:`ModelConfig`; see :func:`parameter_specs`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from cmunet.engine import ops
from cmunet.engine.tensor import Tensor
from cmunet.errors import ConfigError, DimensionError

LEVELS = 5


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (64, 128, 256, 512, 1024)
    convmixer_depth: int = 7
    convmixer_kernel: int = 7
    use_convmixer: bool = True
    use_msag: bool = True
    input_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    @classmethod
    def small(cls, input_size: int = 32, **overrides) -> "ModelConfig":
        """The downsized configuration used for gradient checks and desk-scale runs."""
        base = dict(channels=(4, 8, 16, 32, 64), convmixer_depth=2, convmixer_kernel=3, input_size=input_size)
        base.update(overrides)
        return cls(**base)

    def violations(self) -> list[str]:
        problems = []
        if self.in_channels < 1:
            problems.append(f"in_channels must be >= 1, got {self.in_channels}")
        if len(self.channels) != LEVELS:
            problems.append(f"channels needs {LEVELS} entries, got {len(self.channels)}")
        if any(c < 1 for c in self.channels):
            problems.append(f"channels must be positive, got {self.channels}")
        if self.convmixer_depth < 0:
            problems.append(f"convmixer_depth must be >= 0, got {self.convmixer_depth}")
        if self.convmixer_kernel < 1 or self.convmixer_kernel % 2 == 0:
            problems.append(f"convmixer_kernel must be a positive odd integer, got {self.convmixer_kernel}")
        if self.input_size < 16 or self.input_size % 16:
            problems.append(f"input_size must be a positive multiple of 16, got {self.input_size}")
        return problems

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


# --------------------------------------------------------------------------
# parameter layout

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    kind: str  # weight | bias | gamma | beta | running_mean | running_var
    fan_in: int = 0

    @property
    def trainable(self) -> bool:
        return not self.kind.startswith("running")


def _conv_specs(prefix: str, cin: int, cout: int, k: int, groups: int = 1) -> list[ParamSpec]:
    fan_in = (cin // groups) * k * k
    return [
        ParamSpec(f"{prefix}.weight", (cout, cin // groups, k, k), "weight", fan_in),
        ParamSpec(f"{prefix}.bias", (cout,), "bias"),
    ]


def _bn_specs(prefix: str, c: int) -> list[ParamSpec]:
    return [
        ParamSpec(f"{prefix}.gamma", (c,), "gamma"),
        ParamSpec(f"{prefix}.beta", (c,), "beta"),
        ParamSpec(f"{prefix}.running_mean", (c,), "running_mean"),
        ParamSpec(f"{prefix}.running_var", (c,), "running_var"),
    ]


def _block_specs(prefix: str, cin: int, cout: int) -> list[ParamSpec]:
    return (_conv_specs(f"{prefix}.conv1", cin, cout, 3) + _bn_specs(f"{prefix}.bn1", cout)
            + _conv_specs(f"{prefix}.conv2", cout, cout, 3) + _bn_specs(f"{prefix}.bn2", cout))


def parameter_specs(config: ModelConfig) -> list[ParamSpec]:
    """Every named tensor of the model, in canonical order."""
    config.validate()
    ch = config.channels
    specs: list[ParamSpec] = []
    cin = config.in_channels
    for lvl in range(1, LEVELS + 1):
        specs += _block_specs(f"enc{lvl}", cin, ch[lvl - 1])
        cin = ch[lvl - 1]
    if config.use_convmixer:
        c, k = ch[-1], config.convmixer_kernel
        for i in range(config.convmixer_depth):
            specs += _conv_specs(f"cm.{i}.dw", c, c, k, groups=c) + _bn_specs(f"cm.{i}.dw.bn", c)
            specs += _conv_specs(f"cm.{i}.pw", c, c, 1) + _bn_specs(f"cm.{i}.pw.bn", c)
    if config.use_msag:
        for lvl in range(1, LEVELS):
            c = ch[lvl - 1]
            for branch, k in (("pw", 1), ("conv", 3), ("dil", 3)):
                specs += _conv_specs(f"msag{lvl}.{branch}", c, c, k) + _bn_specs(f"msag{lvl}.{branch}.bn", c)
            specs += _conv_specs(f"msag{lvl}.vote", 3 * c, c, 1)
    for lvl in range(LEVELS - 1, 0, -1):
        specs += _conv_specs(f"dec{lvl}.up", ch[lvl], ch[lvl - 1], 3) + _bn_specs(f"dec{lvl}.up.bn", ch[lvl - 1])
        specs += _block_specs(f"dec{lvl}", 2 * ch[lvl - 1], ch[lvl - 1])
    specs += _conv_specs("head", ch[0], 1, 1)
    return specs


def parameter_count(config: ModelConfig) -> int:
    """Trainable element count (conv weights/biases, BN gamma/beta), by formula."""
    config.validate()

    def conv(cin, cout, k, groups=1):
        return (cin // groups) * cout * k * k + cout

    def bn(c):
        return 2 * c

    def block(cin, cout):
        return conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout)

    ch = config.channels
    total = 0
    cin = config.in_channels
    for c in ch:
        total += block(cin, c)
        cin = c
    if config.use_convmixer:
        c, k = ch[-1], config.convmixer_kernel
        total += config.convmixer_depth * (conv(c, c, k, groups=c) + bn(c) + conv(c, c, 1) + bn(c))
    if config.use_msag:
        for c in ch[:-1]:
            total += conv(c, c, 1) + conv(c, c, 3) + conv(c, c, 3) + 3 * bn(c) + conv(3 * c, c, 1)
    for lvl in range(LEVELS - 1, 0, -1):
        total += conv(ch[lvl], ch[lvl - 1], 3) + bn(ch[lvl - 1]) + block(2 * ch[lvl - 1], ch[lvl - 1])
    total += conv(ch[0], 1, 1)
    return total


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, Tensor] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name] if name in self.params else self.buffers[name]

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Parameters and buffers in canonical (spec) order."""
        for spec in parameter_specs(self.config):
            yield spec.name, self[spec.name]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate parameters: Kaiming-uniform conv weights (fan-in, ReLU
    gain), zero biases, unit gamma, zero beta, running stats (0, 1)."""
    config.validate()
    rng = np.random.default_rng(seed)
    model = Model(config)
    for spec in parameter_specs(config):
        if spec.kind == "weight":
            bound = math.sqrt(2.0) * math.sqrt(3.0 / spec.fan_in)
            data = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.kind in ("gamma", "running_var"):
            data = np.ones(spec.shape)
        else:
            data = np.zeros(spec.shape)
        t = Tensor(data.astype(dtype), requires_grad=spec.trainable, name=spec.name)
        (model.params if spec.trainable else model.buffers)[spec.name] = t
    return model


# --------------------------------------------------------------------------
# forward pieces

def _conv(model: Model, prefix: str, x: Tensor, padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    return ops.conv2d(x, model[f"{prefix}.weight"], model[f"{prefix}.bias"],
                      padding=padding, dilation=dilation, groups=groups, tag=prefix)


def _bn(model: Model, prefix: str, x: Tensor, training: bool) -> Tensor:
    return ops.batchnorm2d(x, model[f"{prefix}.gamma"], model[f"{prefix}.beta"],
                           model[f"{prefix}.running_mean"], model[f"{prefix}.running_var"],
                           training=training, tag=prefix)


def conv_block(model: Model, prefix: str, x: Tensor, training: bool) -> Tensor:
    """Two rounds of 3x3 conv -> BN -> ReLU."""
    for i in (1, 2):
        x = _conv(model, f"{prefix}.conv{i}", x, padding=1)
        x = _bn(model, f"{prefix}.bn{i}", x, training)
        x = ops.relu(x, tag=prefix)
    return x


def convmixer_spatial(model: Model, prefix: str, f_prev: Tensor, training: bool) -> Tensor:
    """Depthwise k x k conv -> GELU -> BN, plus the residual input."""
    c = f_prev.shape[1]
    k = model.config.convmixer_kernel
    h = _conv(model, f"{prefix}.dw", f_prev, padding=(k - 1) // 2, groups=c)
    h = _bn(model, f"{prefix}.dw.bn", ops.gelu(h, tag=prefix), training)
    return ops.add(h, f_prev, tag=prefix)


def convmixer_layer(model: Model, prefix: str, f_prev: Tensor, training: bool) -> Tensor:
    f_mid = convmixer_spatial(model, prefix, f_prev, training)
    h = _conv(model, f"{prefix}.pw", f_mid)
    return _bn(model, f"{prefix}.pw.bn", ops.gelu(h, tag=prefix), training)


def msag(model: Model, prefix: str, f: Tensor, training: bool) -> Tensor:
    """Multi-scale attention gate: f * sigmoid(vote(relu(concat(branches)))) + f."""
    branches = [
        _bn(model, f"{prefix}.pw.bn", _conv(model, f"{prefix}.pw", f), training),
        _bn(model, f"{prefix}.conv.bn", _conv(model, f"{prefix}.conv", f, padding=1), training),
        _bn(model, f"{prefix}.dil.bn", _conv(model, f"{prefix}.dil", f, padding=2, dilation=2), training),
    ]
    cat = ops.concat_channels(ops.concat_channels(branches[0], branches[1], tag=prefix), branches[2], tag=prefix)
    mask = ops.sigmoid(_conv(model, f"{prefix}.vote", ops.relu(cat, tag=prefix)), tag=prefix)
    return ops.add(ops.mul(f, mask, tag=prefix), f, tag=prefix)


def forward(model: Model, x: Tensor, training: bool = False) -> Tensor:
    """Logits of shape N x 1 x S x S (no sigmoid applied)."""
    cfg = model.config
    if x.ndim != 4:
        raise DimensionError(f"input must be N x C x H x W, got {x.shape}", axis="rank")
    if x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}", axis="C")
    for axis, size in (("H", x.shape[2]), ("W", x.shape[3])):
        if size != cfg.input_size:
            raise DimensionError(f"expected spatial size {cfg.input_size}, got {size}", axis=axis)
    if x.dtype != model.dtype:
        x = Tensor(x.data.astype(model.dtype))

    skips = []
    h = x
    for lvl in range(1, LEVELS + 1):
        if lvl > 1:
            h = ops.maxpool2x2(h, tag=f"enc{lvl}")
        h = conv_block(model, f"enc{lvl}", h, training)
        skips.append(h)
    if cfg.use_convmixer:
        for i in range(cfg.convmixer_depth):
            h = convmixer_layer(model, f"cm.{i}", h, training)
    for lvl in range(LEVELS - 1, 0, -1):
        up = ops.bilinear_upsample2x(h, tag=f"dec{lvl}.up")
        up = ops.relu(_bn(model, f"dec{lvl}.up.bn", _conv(model, f"dec{lvl}.up", up, padding=1), training),
                      tag=f"dec{lvl}.up")
        skip = skips[lvl - 1]
        if cfg.use_msag:
            skip = msag(model, f"msag{lvl}", skip, training)
        h = conv_block(model, f"dec{lvl}", ops.concat_channels(skip, up, tag=f"dec{lvl}"), training)
    return _conv(model, "head", h)
