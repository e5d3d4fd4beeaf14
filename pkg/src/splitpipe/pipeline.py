"""Two-stage pipelined latency of every split, optimum search and event simulation."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import simpy

from .cnn_ir import CnnModel
from .cost_model import LatencySource, LinkProfile, cut_transfer_times, unit_latencies
from .errors import IndexOutOfRange, InvalidParam, LengthMismatch


class TransferPath(str, Enum):
    DIRECT = "direct"      # peer-to-peer write into GPU memory
    INDIRECT = "indirect"  # staged through host memory, one hop per stage


@dataclass(frozen=True)
class SplitPlan:
    split_index: int
    stage1: float
    stage2: float
    steady_latency: float
    fill: float
    speedup_over_dpu: float
    speedup_over_gpu: float
    path: TransferPath

    def to_dict(self) -> dict:
        d = asdict(self)
        d["path"] = self.path.value
        return d


@dataclass(frozen=True)
class StageCurve:
    """Stage times for every split index 0..L of one model."""

    stage1: np.ndarray
    stage2: np.ndarray
    path: TransferPath

    @property
    def steady(self) -> np.ndarray:
        return np.maximum(self.stage1, self.stage2)

    def __len__(self) -> int:
        return len(self.stage1)

    def plan(self, k: int) -> SplitPlan:
        if not 0 <= k < len(self):
            raise IndexOutOfRange(f"split {k} outside [0, {len(self) - 1}]")
        steady = self.steady
        s1, s2 = float(self.stage1[k]), float(self.stage2[k])
        return SplitPlan(
            split_index=k,
            stage1=s1,
            stage2=s2,
            steady_latency=float(steady[k]),
            fill=min(s1, s2),
            speedup_over_dpu=float(steady[-1] / steady[k]),
            speedup_over_gpu=float(steady[0] / steady[k]),
            path=self.path,
        )

    def best_index(self) -> int:
        # np.argmin keeps the first minimum: ties go to the smallest split
        return int(np.argmin(self.steady))


def prefix_sums(per_unit: Sequence[float]) -> np.ndarray:
    """``out[k]`` = cost of units ``0..k-1``; length L+1."""
    return np.concatenate([[0.0], np.cumsum(np.asarray(per_unit, dtype=float))])


def suffix_sums(per_unit: Sequence[float]) -> np.ndarray:
    """``out[k]`` = cost of units ``k..L-1``; length L+1."""
    rev = np.cumsum(np.asarray(per_unit, dtype=float)[::-1])[::-1]
    return np.concatenate([rev, [0.0]])


def curve_from_cumulative(dpu_prefix: np.ndarray, gpu_suffix: np.ndarray,
                          transfers: np.ndarray, path: TransferPath) -> StageCurve:
    """Apply the pipeline max-rule to cumulative stage costs indexed by split."""
    dpu_prefix = np.asarray(dpu_prefix, dtype=float)
    gpu_suffix = np.asarray(gpu_suffix, dtype=float)
    transfers = np.asarray(transfers, dtype=float)
    if not len(dpu_prefix) == len(gpu_suffix) == len(transfers):
        raise LengthMismatch(
            f"lengths {len(dpu_prefix)}, {len(gpu_suffix)}, {len(transfers)} differ")
    path = TransferPath(path)
    stage1 = dpu_prefix + transfers
    stage2 = gpu_suffix + transfers if path is TransferPath.INDIRECT else gpu_suffix.copy()
    return StageCurve(stage1, stage2, path)


def stage_curve_from_units(dpu_units: Sequence[float], gpu_units: Sequence[float],
                           transfers: Sequence[float], path: TransferPath) -> StageCurve:
    if len(dpu_units) != len(gpu_units) or len(transfers) != len(dpu_units) + 1:
        raise LengthMismatch("need L unit costs per device and L+1 transfer times")
    return curve_from_cumulative(prefix_sums(dpu_units), suffix_sums(gpu_units),
                                 np.asarray(transfers, dtype=float), path)


def stage_curve(model: CnnModel, dpu: LatencySource, gpu: LatencySource, link: LinkProfile,
                path: TransferPath = TransferPath.DIRECT) -> StageCurve:
    return stage_curve_from_units(unit_latencies(dpu, model), unit_latencies(gpu, model),
                                  cut_transfer_times(model, link), path)


def enumerate_splits(model: CnnModel) -> list[int]:
    return list(range(len(model.units) + 1))


def split_latency(model: CnnModel, dpu: LatencySource, gpu: LatencySource, link: LinkProfile,
                  k: int, path: TransferPath = TransferPath.DIRECT) -> SplitPlan:
    if not 0 <= k <= len(model.units):
        raise IndexOutOfRange(f"split {k} outside [0, {len(model.units)}]")
    return stage_curve(model, dpu, gpu, link, path).plan(k)


def optimal_split(model: CnnModel, dpu: LatencySource, gpu: LatencySource, link: LinkProfile,
                  path: TransferPath = TransferPath.DIRECT) -> SplitPlan:
    curve = stage_curve(model, dpu, gpu, link, path)
    return curve.plan(curve.best_index())


@dataclass(frozen=True)
class EventSummary:
    per_image_steady: float
    total: float
    max_queue_depth: int
    n_images: int

    def to_dict(self) -> dict:
        return asdict(self)


def simulate_stages(stage1: float, stage2: float, n_images: int,
                    queue_capacity: int) -> EventSummary:
    """Event simulation of two stages joined by a bounded FIFO.

    The first stage blocks while the queue is full; the second stage takes
    the oldest tensor as soon as it is idle.
    """
    if n_images < 1 or queue_capacity < 1:
        raise InvalidParam("n_images and queue_capacity must be >= 1")
    if stage1 < 0 or stage2 < 0:
        raise InvalidParam("stage times must be non-negative")
    env = simpy.Environment()
    queue = simpy.Store(env, capacity=queue_capacity)
    done: list[float] = []
    depth = [0]

    def producer():
        for i in range(n_images):
            yield env.timeout(stage1)
            yield queue.put(i)
            depth[0] = max(depth[0], len(queue.items))

    def consumer():
        for _ in range(n_images):
            yield queue.get()
            yield env.timeout(stage2)
            done.append(env.now)

    env.process(producer())
    env.process(consumer())
    env.run()
    total = done[-1]
    if n_images >= 10:
        half = n_images // 2
        steady = (done[-1] - done[half - 1]) / (n_images - half)
    else:
        steady = total / n_images
    return EventSummary(steady, total, depth[0], n_images)


def simulate_pipeline(model: CnnModel, dpu: LatencySource, gpu: LatencySource,
                      link: LinkProfile, k: int, path: TransferPath = TransferPath.DIRECT,
                      n_images: int = 1000, queue_capacity: int = 4) -> EventSummary:
    plan = split_latency(model, dpu, gpu, link, k, path)
    return simulate_stages(plan.stage1, plan.stage2, n_images, queue_capacity)


@dataclass(frozen=True)
class ReportRow:
    model: str
    path: TransferPath
    split_index: int
    n_units: int
    speedup_over_dpu: float
    speedup_over_gpu: float
    steady_latency: float


@dataclass
class SpeedupReport:
    rows: list[ReportRow]
    curves: dict[tuple[str, TransferPath], StageCurve]

    def speedups_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "path", "speedup_over_dpu", "speedup_over_gpu", "layer_index"])
        for r in self.rows:
            w.writerow([r.model, r.path.value, repr(r.speedup_over_dpu),
                        repr(r.speedup_over_gpu), r.split_index])
        return buf.getvalue()

    def curve_csv(self, model: str, path: TransferPath) -> str:
        curve = self.curves[(model, TransferPath(path))]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split_index", "stage1_s", "stage2_s", "steady_s"])
        for k, (s1, s2, st) in enumerate(zip(curve.stage1, curve.stage2, curve.steady)):
            w.writerow([k, repr(float(s1)), repr(float(s2)), repr(float(st))])
        return buf.getvalue()

    def row(self, model: str, path: TransferPath) -> ReportRow:
        path = TransferPath(path)
        for r in self.rows:
            if r.model == model and r.path is path:
                return r
        raise KeyError((model, path))


def speedup_report(models: Sequence[CnnModel], dpu: LatencySource, gpu: LatencySource,
                   link: LinkProfile,
                   paths: Sequence[TransferPath] = (TransferPath.DIRECT, TransferPath.INDIRECT),
                   ) -> SpeedupReport:
    rows = []
    curves = {}
    for model in models:
        for path in paths:
            curve = stage_curve(model, dpu, gpu, link, path)
            plan = curve.plan(curve.best_index())
            curves[(model.name, TransferPath(path))] = curve
            rows.append(ReportRow(model.name, TransferPath(path), plan.split_index,
                                  len(model.units), plan.speedup_over_dpu,
                                  plan.speedup_over_gpu, plan.steady_latency))
    return SpeedupReport(rows, curves)
