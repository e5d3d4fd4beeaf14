"""CNN models as chains of atomic (never split) units.

A model is an ordered list of :class:`AtomicUnit`; each unit holds one or more
:class:`LayerSpec`. Shapes are inferred through the chain, per-unit cost
statistics are derived from the shapes, and the chain is encoded as a node
feature matrix plus a directed edge list for the GNN predictors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

import numpy as np

from .errors import DegenerateShape, InputError, ShapeMismatch, ShapesMissing, SingleUnitModel

SCALE_BYTES = 4  # per-tensor dequantization scale that travels with every INT8 cut


class LayerKind(str, Enum):
    CONV = "Conv"
    RELU = "ReLU"
    LINEAR = "Linear"
    AVGPOOL = "AvgPool"
    MAXPOOL = "MaxPool"
    FLATTEN = "Flatten"


# one-hot order of the node features
KINDS: tuple[LayerKind, ...] = tuple(LayerKind)
SPATIAL_KINDS = frozenset({LayerKind.CONV, LayerKind.AVGPOOL, LayerKind.MAXPOOL})
POOL_KINDS = frozenset({LayerKind.AVGPOOL, LayerKind.MAXPOOL})


class Direction(str, Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 1
    out_channels: int = 1
    in_dim: int = 1
    out_dim: int = 1
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind in SPATIAL_KINDS:
            if self.kernel < 1:
                raise InputError(f"{self.kind.value} needs kernel >= 1, got {self.kernel}")
        elif self.kernel != 0:
            raise InputError(f"{self.kind.value} is non-spatial; kernel must be 0")
        if self.stride < 1 or self.padding < 0:
            raise InputError(f"bad stride/padding {self.stride}/{self.padding}")
        for name in ("in_channels", "out_channels", "in_dim", "out_dim", "groups"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.kind is LayerKind.CONV and (
            self.in_channels % self.groups or self.out_channels % self.groups
        ):
            raise InputError("groups must divide in_channels and out_channels")

    def to_dict(self) -> dict[str, Any]:
        d = {
            "kind": self.kind.value,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
        }
        if self.groups != 1:
            d["groups"] = self.groups
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LayerSpec:
        return cls(**d)


def conv(cin: int, cout: int, kernel: int, stride: int = 1, padding: int | None = None,
         groups: int = 1) -> LayerSpec:
    if padding is None:
        padding = kernel // 2
    return LayerSpec(LayerKind.CONV, kernel, stride, padding, cin, cout, groups=groups)


def relu() -> LayerSpec:
    return LayerSpec(LayerKind.RELU)


def maxpool(kernel: int, stride: int, padding: int = 0) -> LayerSpec:
    return LayerSpec(LayerKind.MAXPOOL, kernel, stride, padding)


def avgpool(kernel: int, stride: int, padding: int = 0) -> LayerSpec:
    return LayerSpec(LayerKind.AVGPOOL, kernel, stride, padding)


def flatten() -> LayerSpec:
    return LayerSpec(LayerKind.FLATTEN)


def linear(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(LayerKind.LINEAR, in_dim=in_dim, out_dim=out_dim)


@dataclass(frozen=True)
class TensorShape:
    """Either a spatial ``(channels, height, width)`` tensor or a flat vector."""

    channels: int = 1
    height: int = 1
    width: int = 1
    flat: int | None = None

    @classmethod
    def spatial(cls, channels: int, height: int, width: int) -> TensorShape:
        return cls(channels, height, width)

    @classmethod
    def vector(cls, n: int) -> TensorShape:
        return cls(1, 1, 1, n)

    @property
    def is_flat(self) -> bool:
        return self.flat is not None

    @property
    def numel(self) -> int:
        return self.flat if self.flat is not None else self.channels * self.height * self.width

    def to_dict(self) -> dict[str, int]:
        if self.is_flat:
            return {"flat": self.flat}
        return {"channels": self.channels, "height": self.height, "width": self.width}

    @classmethod
    def from_dict(cls, d: dict[str, int]) -> TensorShape:
        if "flat" in d:
            return cls.vector(int(d["flat"]))
        return cls.spatial(int(d["channels"]), int(d["height"]), int(d["width"]))

    def __str__(self) -> str:
        if self.is_flat:
            return f"({self.flat},)"
        return f"({self.channels}, {self.height}, {self.width})"


@dataclass(frozen=True)
class AtomicUnit:
    layers: tuple[LayerSpec, ...]
    has_residual: bool = False
    name: str = ""
    in_shape: TensorShape | None = None
    out_shape: TensorShape | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InputError(f"unit {self.name!r} has no layers")

    @property
    def inferred(self) -> bool:
        return self.in_shape is not None and self.out_shape is not None

    def shortcut(self) -> LayerSpec | None:
        """The projection on the residual path, or None for an identity shortcut."""
        if not self.has_residual or not self.inferred:
            return None
        if self.in_shape == self.out_shape:
            return None
        stride = max(1, self.in_shape.height // self.out_shape.height)
        return conv(self.in_shape.channels, self.out_shape.channels, 1, stride, 0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "has_residual": self.has_residual,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AtomicUnit:
        return cls(
            layers=tuple(LayerSpec.from_dict(x) for x in d["layers"]),
            has_residual=bool(d.get("has_residual", False)),
            name=str(d.get("name", "")),
        )


@dataclass(frozen=True)
class CnnModel:
    units: tuple[AtomicUnit, ...]
    input_shape: TensorShape
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))

    def __len__(self) -> int:
        return len(self.units)

    @property
    def inferred(self) -> bool:
        return all(u.inferred for u in self.units)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "input_shape": self.input_shape.to_dict(),
            "units": [u.to_dict() for u in self.units],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CnnModel:
        try:
            return cls(
                units=tuple(AtomicUnit.from_dict(u) for u in d["units"]),
                input_shape=TensorShape.from_dict(d["input_shape"]),
                name=str(d.get("name", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed model JSON: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> CnnModel:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InputError(f"model JSON does not parse: {exc}") from exc


def _pool_or_conv_out(size: int, layer: LayerSpec) -> int:
    return (size + 2 * layer.padding - layer.kernel) // layer.stride + 1


def layer_out_shape(layer: LayerSpec, shape: TensorShape, unit_index: int) -> TensorShape:
    """Propagate ``shape`` through a single layer."""
    kind = layer.kind
    if kind is LayerKind.RELU:
        return shape
    if kind is LayerKind.FLATTEN:
        return TensorShape.vector(shape.numel)
    if kind is LayerKind.LINEAR:
        if not shape.is_flat:
            raise ShapeMismatch(unit_index, "flat input for Linear", str(shape))
        if layer.in_dim != shape.flat:
            raise ShapeMismatch(unit_index, layer.in_dim, shape.flat)
        return TensorShape.vector(layer.out_dim)
    # Conv / pooling
    if shape.is_flat:
        raise ShapeMismatch(unit_index, f"spatial input for {kind.value}", str(shape))
    h = _pool_or_conv_out(shape.height, layer)
    w = _pool_or_conv_out(shape.width, layer)
    if h < 1 or w < 1:
        raise DegenerateShape(unit_index, f"{kind.value} on {shape} gives {h}x{w}")
    if kind is LayerKind.CONV:
        if layer.in_channels != shape.channels:
            raise ShapeMismatch(unit_index, layer.in_channels, shape.channels)
        return TensorShape.spatial(layer.out_channels, h, w)
    return TensorShape.spatial(shape.channels, h, w)


def trace_unit(unit: AtomicUnit, in_shape: TensorShape, unit_index: int = 0) -> list[TensorShape]:
    """Input shape followed by the output shape of every layer in ``unit``."""
    shapes = [in_shape]
    for layer in unit.layers:
        shapes.append(layer_out_shape(layer, shapes[-1], unit_index))
    return shapes


def _check_shortcut(in_shape: TensorShape, out_shape: TensorShape, unit_index: int) -> None:
    if in_shape == out_shape:
        return
    if in_shape.is_flat or out_shape.is_flat:
        raise ShapeMismatch(unit_index, "spatial residual block", f"{in_shape} -> {out_shape}")
    stride = max(1, in_shape.height // out_shape.height)
    projected = ((in_shape.height - 1) // stride + 1, (in_shape.width - 1) // stride + 1)
    if projected != (out_shape.height, out_shape.width):
        raise ShapeMismatch(unit_index, (out_shape.height, out_shape.width), projected)


def infer_shapes(model: CnnModel) -> CnnModel:
    """Return a copy of ``model`` with every unit's in/out shape filled in."""
    shape = model.input_shape
    if shape.numel < 1:
        raise DegenerateShape(-1, "empty input")
    units = []
    for i, unit in enumerate(model.units):
        out = trace_unit(unit, shape, i)[-1]
        if unit.has_residual:
            _check_shortcut(shape, out, i)
        units.append(replace(unit, in_shape=shape, out_shape=out))
        shape = out
    return replace(model, units=tuple(units))


@dataclass(frozen=True)
class LayerCost:
    kind: LayerKind
    macs: int
    in_bytes: int
    out_bytes: int
    weight_bytes: int

    @property
    def bytes_moved(self) -> int:
        return self.in_bytes + self.out_bytes + self.weight_bytes


@dataclass(frozen=True)
class CostStats:
    macs: int
    weight_bytes: int
    out_bytes: int


def _layer_cost(layer: LayerSpec, src: TensorShape, dst: TensorShape) -> LayerCost:
    macs = 0
    weights = 0
    if layer.kind is LayerKind.CONV:
        per_out = layer.kernel * layer.kernel * (layer.in_channels // layer.groups)
        macs = per_out * dst.numel
        weights = per_out * layer.out_channels + layer.out_channels
    elif layer.kind is LayerKind.LINEAR:
        macs = layer.in_dim * layer.out_dim
        weights = layer.in_dim * layer.out_dim + layer.out_dim
    # INT8 activations and weights: one byte per element
    return LayerCost(layer.kind, macs, src.numel, dst.numel, weights)


def layer_costs(unit: AtomicUnit) -> list[LayerCost]:
    """Per-layer costs of a shape-inferred unit, the residual projection included."""
    if not unit.inferred:
        raise ShapesMissing(f"unit {unit.name!r} has no inferred shapes")
    shapes = trace_unit(unit, unit.in_shape)
    costs = [_layer_cost(layer, shapes[i], shapes[i + 1]) for i, layer in enumerate(unit.layers)]
    proj = unit.shortcut()
    if proj is not None:
        costs.append(_layer_cost(proj, unit.in_shape, unit.out_shape))
    return costs


def unit_cost_stats(unit: AtomicUnit) -> CostStats:
    costs = layer_costs(unit)
    return CostStats(
        macs=sum(c.macs for c in costs),
        weight_bytes=sum(c.weight_bytes for c in costs),
        out_bytes=unit.out_shape.numel + SCALE_BYTES,
    )


# normalization constants of the node features
KERNEL_NORM = 7
SPATIAL_NORM = 224
CHANNEL_NORM = 2048
DIM_NORM = 4096
N_FEATURES = len(KINDS) + 7


def _feature_layer(unit: AtomicUnit) -> tuple[LayerSpec, TensorShape]:
    """Layer that represents a unit: first Conv, else first Linear, else the first layer."""
    shapes = trace_unit(unit, unit.in_shape)
    for wanted in (LayerKind.CONV, LayerKind.LINEAR):
        for i, layer in enumerate(unit.layers):
            if layer.kind is wanted:
                return layer, shapes[i]
    return unit.layers[0], shapes[0]


def unit_features(unit: AtomicUnit, position: int, n_units: int) -> np.ndarray:
    layer, layer_in = _feature_layer(unit)
    row = np.zeros(N_FEATURES)
    row[KINDS.index(layer.kind)] = 1.0
    base = len(KINDS)
    row[base + 0] = layer.kernel / KERNEL_NORM
    if not layer_in.is_flat:
        row[base + 1] = layer_in.height / SPATIAL_NORM
        row[base + 2] = layer_in.width / SPATIAL_NORM
    out = unit.out_shape
    if out.is_flat:
        row[base + 4] = out.flat / DIM_NORM
    else:
        row[base + 3] = out.channels / CHANNEL_NORM
    if layer_in.is_flat:
        row[base + 5] = layer_in.flat / DIM_NORM
    row[base + 6] = position / (n_units - 1)
    return row


def encode_features(model: CnnModel) -> np.ndarray:
    """L x 13 node-feature matrix: one-hot kind then seven normalized scalars."""
    if not model.inferred:
        raise ShapesMissing(f"model {model.name!r} has no inferred shapes")
    n = len(model.units)
    if n < 2:
        raise SingleUnitModel("position encoding needs at least two units")
    return np.stack([unit_features(u, i, n) for i, u in enumerate(model.units)])


@dataclass(frozen=True)
class ModelGraph:
    features: np.ndarray
    edges: tuple[tuple[int, int], ...]
    direction: Direction = Direction.FORWARD

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    def reversed(self) -> ModelGraph:
        flipped = (Direction.REVERSE if self.direction is Direction.FORWARD
                   else Direction.FORWARD)
        return replace(self, edges=transpose_edges(self.edges), direction=flipped)


def chain_edges(n: int, direction: Direction = Direction.FORWARD) -> tuple[tuple[int, int], ...]:
    fwd = tuple((i, i + 1) for i in range(n - 1))
    return fwd if Direction(direction) is Direction.FORWARD else transpose_edges(fwd)


def transpose_edges(edges: Iterable[tuple[int, int]]) -> tuple[tuple[int, int], ...]:
    return tuple((b, a) for a, b in edges)


def build_graph(model: CnnModel, direction: Direction = Direction.FORWARD) -> ModelGraph:
    direction = Direction(direction)
    feats = encode_features(model)
    return ModelGraph(feats, chain_edges(len(model.units), direction), direction)
