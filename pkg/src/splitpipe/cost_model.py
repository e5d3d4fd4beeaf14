"""Synthetic device and link timing.

Per-layer latency is ``alpha * macs + beta * bytes_moved + gamma`` with one
coefficient triple per layer kind, plus a flat penalty for every residual
unit. Measured per-unit latency tables can stand in for a parametric profile.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Union

import numpy as np

from .cnn_ir import KINDS, AtomicUnit, CnnModel, LayerKind, layer_costs
from .errors import IndexOutOfRange, InputError, MissingUnit, ParseError, ShapesMissing

PROFILE_DIR_ENV = "SPLITPIPE_PROFILE_DIR"
DEFAULT_BANDWIDTH = 8e9  # PCIe Gen3 x4
DEFAULT_OVERHEAD = 5e-6


@dataclass(frozen=True)
class KindCoeffs:
    alpha: float = 0.0  # s / MAC
    beta: float = 0.0   # s / byte
    gamma: float = 0.0  # s / layer

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise InputError("latency coefficients must be non-negative")
        if max(self.alpha, self.beta, self.gamma) <= 0:
            raise InputError("at least one latency coefficient must be positive")


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    kinds: dict[LayerKind, KindCoeffs]
    residual_penalty: float = 0.0

    def __post_init__(self):
        missing = [k.value for k in KINDS if k not in self.kinds]
        if missing:
            raise InputError(f"profile {self.name!r} lacks coefficients for {missing}")
        if self.residual_penalty < 0:
            raise InputError("residual_penalty must be non-negative")

    def scaled(self, factor: float) -> DeviceProfile:
        kinds = {k: KindCoeffs(c.alpha * factor, c.beta * factor, c.gamma * factor)
                 for k, c in self.kinds.items()}
        return DeviceProfile(self.name, kinds, self.residual_penalty * factor)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kinds": {k.value: {"alpha": c.alpha, "beta": c.beta, "gamma": c.gamma}
                      for k, c in self.kinds.items()},
            "residual_penalty": self.residual_penalty,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DeviceProfile:
        try:
            kinds = {LayerKind(k): KindCoeffs(float(v.get("alpha", 0.0)),
                                              float(v.get("beta", 0.0)),
                                              float(v.get("gamma", 0.0)))
                     for k, v in d["kinds"].items()}
            return cls(str(d["name"]), kinds, float(d.get("residual_penalty", 0.0)))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise InputError(f"malformed device profile: {exc}") from exc


@dataclass(frozen=True)
class LinkProfile:
    bandwidth: float = DEFAULT_BANDWIDTH  # bytes / s
    fixed_overhead: float = DEFAULT_OVERHEAD  # s per transfer

    def __post_init__(self):
        if not self.bandwidth > 0 or self.fixed_overhead < 0:
            raise InputError("link needs bandwidth > 0 and fixed_overhead >= 0")

    def scaled(self, factor: float) -> LinkProfile:
        return LinkProfile(self.bandwidth / factor, self.fixed_overhead * factor)

    def to_dict(self) -> dict:
        return {"bandwidth_bytes_per_s": self.bandwidth, "fixed_overhead_s": self.fixed_overhead}

    @classmethod
    def from_dict(cls, d: dict) -> LinkProfile:
        try:
            return cls(float(d["bandwidth_bytes_per_s"]), float(d["fixed_overhead_s"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed link profile: {exc}") from exc


@dataclass(frozen=True)
class MeasuredProfile:
    """Per-unit latencies measured for one specific model."""

    model: str
    latencies: tuple[float, ...]
    name: str = "measured"

    def __len__(self) -> int:
        return len(self.latencies)


LatencySource = Union[DeviceProfile, MeasuredProfile]


def unit_latency(profile: DeviceProfile, unit: AtomicUnit) -> float:
    if not unit.inferred:
        raise ShapesMissing(f"unit {unit.name!r} has no inferred shapes")
    total = 0.0
    for cost in layer_costs(unit):
        c = profile.kinds[cost.kind]
        total += c.alpha * cost.macs + c.beta * cost.bytes_moved + c.gamma
    if unit.has_residual:
        total += profile.residual_penalty
    return total


def unit_latencies(source: LatencySource, model: CnnModel) -> np.ndarray:
    """Latency of every unit of ``model`` on one device, in seconds."""
    if isinstance(source, MeasuredProfile):
        if len(source.latencies) != len(model.units):
            raise InputError(f"measured profile covers {len(source.latencies)} units, "
                             f"model {model.name!r} has {len(model.units)}")
        return np.asarray(source.latencies, dtype=float)
    return np.array([unit_latency(source, u) for u in model.units])


def transfer_time(link: LinkProfile, nbytes: int) -> float:
    if nbytes < 0:
        raise InputError("byte count must be non-negative")
    return link.fixed_overhead + nbytes / link.bandwidth


def cut_bytes(model: CnnModel, k: int) -> int:
    """Bytes leaving the first device when the first ``k`` units run there."""
    n = len(model.units)
    if not 0 <= k <= n:
        raise IndexOutOfRange(f"split {k} outside [0, {n}]")
    if not model.inferred:
        raise ShapesMissing(f"model {model.name!r} has no inferred shapes")
    if k == 0:
        # raw 8-bit image, no quantization scale
        return model.input_shape.numel
    return model.units[k - 1].out_shape.numel + 4


def cut_transfer_times(model: CnnModel, link: LinkProfile) -> np.ndarray:
    return np.array([transfer_time(link, cut_bytes(model, k))
                     for k in range(len(model.units) + 1)])


def load_measured_profile(path: str | os.PathLike, model: str = "",
                          n_units: int | None = None) -> MeasuredProfile:
    """Read a ``unit_index,latency_seconds`` CSV.

    Coverage is checked against ``n_units`` when given, otherwise against the
    largest index present.
    """
    table: dict[int, float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(1, "empty file")
        if [h.strip() for h in header] != ["unit_index", "latency_seconds"]:
            raise ParseError(1, "expected header unit_index,latency_seconds")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise ParseError(lineno, f"expected 2 columns, got {len(row)}")
            try:
                idx, lat = int(row[0]), float(row[1])
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from exc
            if idx < 0 or not np.isfinite(lat) or lat < 0:
                raise ParseError(lineno, "negative index or invalid latency")
            if idx in table:
                raise ParseError(lineno, f"duplicate unit {idx}")
            table[idx] = lat
    expected = n_units if n_units is not None else (max(table) + 1 if table else 0)
    for i in range(expected):
        if i not in table:
            raise MissingUnit(i)
    extra = [i for i in table if i >= expected]
    if extra:
        raise InputError(f"measured profile has rows beyond unit {expected - 1}: {extra}")
    return MeasuredProfile(model, tuple(table[i] for i in range(expected)),
                           name=Path(path).stem)


def _read_json(path: str | os.PathLike) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc


def load_device_profile(path: str | os.PathLike) -> DeviceProfile:
    return DeviceProfile.from_dict(_read_json(path))


def load_link_profile(path: str | os.PathLike) -> LinkProfile:
    return LinkProfile.from_dict(_read_json(path))


def resolve_profile_path(name: str) -> Path:
    """Locate a profile file: literal path, then $SPLITPIPE_PROFILE_DIR, then shipped."""
    candidate = Path(name)
    if candidate.exists():
        return candidate
    fname = name if name.endswith(".json") else f"{name}.json"
    env_dir = os.environ.get(PROFILE_DIR_ENV)
    if env_dir and (Path(env_dir) / fname).exists():
        return Path(env_dir) / fname
    shipped = resources.files("splitpipe") / "profiles" / fname
    if shipped.is_file():
        return Path(str(shipped))
    raise InputError(f"profile {name!r} not found")


def default_profiles() -> tuple[DeviceProfile, DeviceProfile, LinkProfile]:
    """The shipped ``dpu-like``, ``gpu-like`` and PCIe link profiles."""
    return (
        load_device_profile(resolve_profile_path("dpu-like")),
        load_device_profile(resolve_profile_path("gpu-like")),
        load_link_profile(resolve_profile_path("link")),
    )
