"""Labeled corpus of random CNNs for the split predictors."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .cnn_ir import CnnModel, encode_features, infer_shapes
from .cost_model import (
    DeviceProfile,
    LinkProfile,
    cut_transfer_times,
    unit_latencies,
)
from .errors import DomainError, EmptyDataset, InputError, ParseError
from .gnn import GraphSample
from .io_utils import atomic_write_text
from .model_zoo import GeneratorConfig, generate_random
from .pipeline import TransferPath, optimal_split, prefix_sums, suffix_sums


@dataclass
class DatasetRecord:
    model: CnnModel
    sample: GraphSample
    provenance: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model.to_dict(), "sample": self.sample.to_dict(),
                "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DatasetRecord:
        return cls(infer_shapes(CnnModel.from_dict(d["model"])),
                   GraphSample.from_dict(d["sample"]), dict(d["provenance"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def label_model(model: CnnModel, dpu: DeviceProfile, gpu: DeviceProfile, link: LinkProfile,
                path: TransferPath = TransferPath.DIRECT) -> GraphSample:
    """Exact oracle labels for one shape-inferred model."""
    dpu_lat = unit_latencies(dpu, model)
    gpu_lat = unit_latencies(gpu, model)
    plan = optimal_split(model, dpu, gpu, link, path)
    return GraphSample(
        features=encode_features(model),
        dpu_cum_latency=prefix_sums(dpu_lat)[1:],
        gpu_cum_latency=suffix_sums(gpu_lat)[:-1],
        transfer=cut_transfer_times(model, link),
        optimal_index=plan.split_index,
        path=path,
    )


def make_record(seed: int, dpu: DeviceProfile, gpu: DeviceProfile, link: LinkProfile,
                path: TransferPath = TransferPath.DIRECT,
                generator: GeneratorConfig | None = None) -> DatasetRecord:
    cfg = GeneratorConfig(seed=seed) if generator is None else \
        GeneratorConfig(**{**generator.__dict__, "seed": seed})
    model = generate_random(cfg)
    provenance = {
        "generator_seed": seed,
        "dpu_profile": dpu.name,
        "gpu_profile": gpu.name,
        "link": link.to_dict(),
        "path": TransferPath(path).value,
        "labels": "synthetic cost oracle",
    }
    return DatasetRecord(model, label_model(model, dpu, gpu, link, path), provenance)


def generate_dataset(n: int, seed: int, dpu: DeviceProfile, gpu: DeviceProfile,
                     link: LinkProfile, path: TransferPath = TransferPath.DIRECT,
                     generator: GeneratorConfig | None = None) -> list[DatasetRecord]:
    """Records for generator seeds ``seed .. seed + n - 1``."""
    if n < 1:
        raise InputError("n must be >= 1")
    return [make_record(seed + i, dpu, gpu, link, path, generator) for i in range(n)]


def split_train_test(records: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    if not records:
        raise EmptyDataset("nothing to split")
    if not 0 < fraction < 1:
        raise InputError("fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = int(round(fraction * len(records)))
    return ([records[i] for i in order[:n_train]], [records[i] for i in order[n_train:]])


def check_labels(sample: GraphSample) -> None:
    """The stored optimum must be the max-rule argmin of the stored labels."""
    steady = sample.steady_curve()
    k = sample.optimal_index
    if not 0 <= k < len(steady) or steady[k] > steady.min():
        raise DomainError(f"optimal_index {k} is not the argmin of its label curve")
    if np.any(np.diff(sample.dpu_cum_latency) <= 0) or np.any(np.diff(sample.gpu_cum_latency) >= 0):
        raise DomainError("cumulative latency labels are not strictly monotone")


def dumps_dataset(records: Sequence[DatasetRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), separators=(",", ":")) + "\n" for r in records)


def save_dataset(records: Sequence[DatasetRecord], path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_dataset(records))


def load_dataset(path: str | os.PathLike, verify: bool = True) -> list[DatasetRecord]:
    records = []
    try:
        fh = open(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = DatasetRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, InputError) as exc:
                raise ParseError(lineno, str(exc)) from exc
            if verify:
                check_labels(rec.sample)
            records.append(rec)
    return records
