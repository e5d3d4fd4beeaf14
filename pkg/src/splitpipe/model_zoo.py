"""Reference CNNs at split granularity and the random-CNN generator.

Reference models are built so their unit counts match the split counts used
for the published measurements: a ResNet basic/bottleneck block and a
MobileNetV2 inverted-residual block are single units, while VGG16 and LeNet-5
are split layer by layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cnn_ir import (
    AtomicUnit,
    CnnModel,
    LayerKind,
    LayerSpec,
    TensorShape,
    avgpool,
    conv,
    flatten,
    infer_shapes,
    linear,
    maxpool,
    relu,
)
from .errors import DegenerateShape, GenerationFailed, InputError, ShapeMismatch, UnknownModel

# random-CNN value pools
KERNEL_SIZES = (1, 3, 7)
OUT_CHANNELS = (32, 64, 128, 256, 512, 1024, 2048)
OUT_DIMS = (128, 256, 512, 1024, 2048, 4096)
IN_DIMS = (32, 64, 128, 256, 512, 1024, 2048, 4096)
INPUT_SIZES = (32, 56, 64, 112, 128, 224)
MAX_SPATIAL = 224

REFERENCE_MODELS = ("lenet5", "vgg16", "resnet18", "resnet50", "resnet101", "resnet152",
                    "mobilenetv2")


def _unit(name: str, *layers: LayerSpec, residual: bool = False) -> AtomicUnit:
    return AtomicUnit(tuple(layers), has_residual=residual, name=name)


def lenet5() -> CnnModel:
    units = [
        _unit("conv1", conv(1, 6, 5, padding=0), relu()),
        _unit("pool1", maxpool(2, 2)),
        _unit("conv2", conv(6, 16, 5, padding=0), relu()),
        _unit("pool2", maxpool(2, 2)),
        _unit("fc1", flatten(), linear(400, 120), relu()),
        _unit("fc2", linear(120, 84), relu(), linear(84, 10)),
    ]
    return CnnModel(tuple(units), TensorShape.spatial(1, 32, 32), "lenet5")


def _vgg_classifier(flat_in: int) -> list[AtomicUnit]:
    # Dropout is the identity at inference. It follows a ReLU, so a second
    # ReLU reproduces it exactly while keeping the layer-per-unit split count.
    return [
        _unit("avgpool", avgpool(1, 1)),
        _unit("flatten", flatten()),
        _unit("fc1", linear(flat_in, 4096)),
        _unit("relu_fc1", relu()),
        _unit("dropout1", relu()),
        _unit("fc2", linear(4096, 4096)),
        _unit("relu_fc2", relu()),
        _unit("dropout2", relu()),
        _unit("fc3", linear(4096, 1000)),
    ]


def vgg16() -> CnnModel:
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M",
           512, 512, 512, "M"]
    units = []
    cin = 3
    for v in cfg:
        idx = len(units)
        if v == "M":
            units.append(_unit(f"features.{idx}", maxpool(2, 2)))
        else:
            units.append(_unit(f"features.{idx}", conv(cin, v, 3)))
            units.append(_unit(f"features.{idx + 1}", relu()))
            cin = v
    units += _vgg_classifier(512 * 7 * 7)
    return CnnModel(tuple(units), TensorShape.spatial(3, 224, 224), "vgg16")


def _basic_block(name: str, cin: int, cout: int, stride: int) -> AtomicUnit:
    return _unit(name, conv(cin, cout, 3, stride), relu(), conv(cout, cout, 3), relu(),
                 residual=True)


def _bottleneck(name: str, cin: int, width: int, stride: int) -> AtomicUnit:
    return _unit(name, conv(cin, width, 1), relu(), conv(width, width, 3, stride), relu(),
                 conv(width, 4 * width, 1), relu(), residual=True)


def _resnet(name: str, blocks: tuple[int, int, int, int], bottleneck: bool,
            separate_bn: bool) -> CnnModel:
    units = [_unit("conv1", conv(3, 64, 7, 2, 3))]
    if separate_bn:
        # inference-time batch norm: a per-element op with no MACs
        units.append(_unit("bn1", avgpool(1, 1)))
    units += [_unit("relu", relu()), _unit("maxpool", maxpool(3, 2, 1))]
    cin = 64
    for stage, (n, width) in enumerate(zip(blocks, (64, 128, 256, 512)), start=1):
        for b in range(n):
            stride = 2 if stage > 1 and b == 0 else 1
            bname = f"layer{stage}.{b}"
            if bottleneck:
                units.append(_bottleneck(bname, cin, width, stride))
                cin = 4 * width
            else:
                units.append(_basic_block(bname, cin, width, stride))
                cin = width
    units += [
        _unit("avgpool", avgpool(7, 1)),
        _unit("flatten", flatten()),
        _unit("fc", linear(cin, 1000)),
    ]
    return CnnModel(tuple(units), TensorShape.spatial(3, 224, 224), name)


def resnet18() -> CnnModel:
    return _resnet("resnet18", (2, 2, 2, 2), False, True)


def resnet50() -> CnnModel:
    return _resnet("resnet50", (3, 4, 6, 3), True, True)


def resnet101() -> CnnModel:
    return _resnet("resnet101", (3, 4, 23, 3), True, True)


def resnet152() -> CnnModel:
    # 56 units: batch norm stays folded into conv1 here
    return _resnet("resnet152", (3, 8, 36, 3), True, False)


def _inverted_residual(name: str, cin: int, cout: int, stride: int, expand: int) -> AtomicUnit:
    hidden = cin * expand
    layers: list[LayerSpec] = []
    if expand != 1:
        layers += [conv(cin, hidden, 1), relu()]
    layers += [conv(hidden, hidden, 3, stride, groups=hidden), relu(), conv(hidden, cout, 1)]
    return _unit(name, *layers, residual=stride == 1 and cin == cout)


def mobilenetv2() -> CnnModel:
    settings = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    units = [_unit("features.0", conv(3, 32, 3, 2), relu())]
    cin = 32
    for t, c, n, s in settings:
        for i in range(n):
            units.append(_inverted_residual(f"features.{len(units)}", cin, c,
                                            s if i == 0 else 1, t))
            cin = c
    units += [
        _unit(f"features.{len(units)}", conv(cin, 1280, 1), relu()),
        _unit("avgpool", avgpool(7, 1)),
        _unit("flatten", flatten()),
        # dropout on non-negative pooled activations: identity, modeled as ReLU
        _unit("dropout", relu()),
        _unit("classifier", linear(1280, 1000)),
    ]
    return CnnModel(tuple(units), TensorShape.spatial(3, 224, 224), "mobilenetv2")


_BUILDERS = {
    "lenet5": lenet5,
    "vgg16": vgg16,
    "resnet18": resnet18,
    "resnet50": resnet50,
    "resnet101": resnet101,
    "resnet152": resnet152,
    "mobilenetv2": mobilenetv2,
}


def build_reference(name: str) -> CnnModel:
    """Shape-inferred reference model by name."""
    try:
        builder = _BUILDERS[name.lower()]
    except KeyError:
        raise UnknownModel(f"unknown model {name!r}; choose from {', '.join(REFERENCE_MODELS)}")
    return infer_shapes(builder())


def zoo() -> list[CnnModel]:
    return [build_reference(n) for n in REFERENCE_MODELS]


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    min_units: int = 8
    max_units: int = 60
    conv_stage_prob: float = 0.6
    pool_prob: float = 0.2
    relu_after_conv_prob: float = 0.8
    downsample_prob: float = 0.3
    linear_tail_len: tuple[int, int] = (1, 3)
    in_channels: tuple[int, ...] = (1, 3)
    input_sizes: tuple[int, ...] = INPUT_SIZES
    max_conv_macs: int = 2 ** 31
    max_activation: int = 2 ** 22
    max_retries: int = 32

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise InputError("seed must be a 64-bit unsigned integer")
        if self.min_units < 2 or self.max_units < self.min_units:
            raise InputError("need 2 <= min_units <= max_units")
        lo, hi = self.linear_tail_len
        if lo < 1 or hi < lo:
            raise InputError("linear_tail_len must be a (lo, hi) range with lo >= 1")
        if any(s < 1 or s > MAX_SPATIAL for s in self.input_sizes):
            raise InputError(f"input sizes must lie in [1, {MAX_SPATIAL}]")


class _Attempt:
    """Mutable state of one generation attempt."""

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        size = int(rng.choice(cfg.input_sizes))
        self.input_shape = TensorShape.spatial(int(rng.choice(cfg.in_channels)), size, size)
        self.c, self.h, self.w = self.input_shape.channels, size, size
        self.units: list[AtomicUnit] = []

    def add(self, layer: LayerSpec) -> None:
        self.units.append(AtomicUnit((layer,), name=f"{layer.kind.value.lower()}{len(self.units)}"))

    def _choice(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def try_conv(self) -> bool:
        cfg, rng = self.cfg, self.rng
        k = self._choice(KERNEL_SIZES)
        stride = 2 if self.h > 1 and rng.random() < cfg.downsample_prob else 1
        oh = (self.h - 1) // stride + 1
        ow = (self.w - 1) // stride + 1
        lo = max(OUT_CHANNELS[0], self.c // 2)
        hi = max(OUT_CHANNELS[0], self.c * 4)
        options = [
            c for c in OUT_CHANNELS
            if lo <= c <= hi
            and c * oh * ow <= cfg.max_activation
            and k * k * self.c * c * oh * ow <= cfg.max_conv_macs
        ]
        if not options:
            return False
        cout = self._choice(options)
        self.add(conv(self.c, cout, k, stride, k // 2))
        self.c, self.h, self.w = cout, oh, ow
        return True

    def add_pool(self, shrink: bool = True) -> None:
        kind = self._choice((LayerKind.MAXPOOL, LayerKind.AVGPOOL))
        if self.h == 7 and self.w == 7 and self.rng.random() < 0.5:
            k, s, p = 7, 1, 0
        elif shrink and self.h > 1:
            k = self._choice((3, 7)) if self.h >= 4 else 3
            s, p = 2, k // 2
        else:
            k, s, p = 3, 1, 1
        layer = LayerSpec(kind, k, s, p)
        self.add(layer)
        self.h = (self.h + 2 * p - k) // s + 1
        self.w = (self.w + 2 * p - k) // s + 1

    def body(self, n_body: int) -> None:
        cfg, rng = self.cfg, self.rng
        self.try_conv() or self.add_pool()
        while len(self.units) < n_body:
            last = self.units[-1].layers[0].kind
            if last is LayerKind.CONV and rng.random() < cfg.relu_after_conv_prob:
                self.add(relu())
            elif self.h > 1 and rng.random() < cfg.pool_prob:
                self.add_pool()
            elif rng.random() < cfg.conv_stage_prob and self.try_conv():
                pass
            elif last is not LayerKind.RELU:
                self.add(relu())
            else:
                self.add_pool(shrink=self.h > 1)

    def close(self) -> None:
        # shrink until the flattened width is a legal Linear input
        while self.c * self.h * self.w not in IN_DIMS:
            if self.h == 1:
                raise GenerationFailed(self.cfg.seed)
            self.add_pool()

    def tail(self, n_linear: int) -> None:
        self.add(flatten())
        width = self.c * self.h * self.w
        for i in range(n_linear):
            if i:
                self.add(relu())
            out = self._choice(OUT_DIMS)
            self.add(linear(width, out))
            width = out


def generate_random(config: GeneratorConfig) -> CnnModel:
    """Random shape-consistent chain CNN, a pure function of ``config``."""
    rng = np.random.default_rng(config.seed)
    lo, hi = config.linear_tail_len
    for _ in range(config.max_retries):
        target = int(rng.integers(config.min_units, config.max_units + 1))
        n_linear = int(rng.integers(lo, hi + 1))
        tail_units = 2 * n_linear
        attempt = _Attempt(config, rng)
        n_body = target - tail_units
        if n_body < 1:
            continue
        try:
            attempt.body(n_body)
            attempt.close()
        except GenerationFailed:
            continue
        attempt.tail(n_linear)
        if not config.min_units <= len(attempt.units) <= config.max_units:
            continue
        model = CnnModel(tuple(attempt.units), attempt.input_shape, f"random-{config.seed}")
        try:
            return infer_shapes(model)
        except (ShapeMismatch, DegenerateShape):
            continue
    raise GenerationFailed(config.seed)
