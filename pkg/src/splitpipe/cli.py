"""Command line for split planning, pipeline simulation and split predictors.

Exit codes: 0 success, 2 unreadable or malformed input, 3 domain invariant
violation, 4 internal error. Every command writes a run manifest next to its
outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .cnn_ir import CnnModel, infer_shapes
from .cost_model import (
    LatencySource,
    load_device_profile,
    load_link_profile,
    load_measured_profile,
    resolve_profile_path,
)
from .dataset import generate_dataset, load_dataset, save_dataset, split_train_test
from .errors import DomainError, InputError
from .gnn import Formulation, TrainConfig, evaluate, predict_all, predictor_from_dict, train
from .io_utils import atomic_write_text, file_digest
from .model_zoo import REFERENCE_MODELS, GeneratorConfig, build_reference, generate_random, zoo
from .pipeline import TransferPath, optimal_split, simulate_pipeline, speedup_report

EXIT_OK, EXIT_INPUT, EXIT_DOMAIN, EXIT_INTERNAL = 0, 2, 3, 4


def _load_model(ref: str) -> CnnModel:
    path = Path(ref)
    if path.is_file():
        try:
            return infer_shapes(CnnModel.from_json(path.read_text()))
        except OSError as exc:
            raise InputError(f"cannot read {ref}: {exc}") from exc
    if ref.lower() in REFERENCE_MODELS:
        return build_reference(ref)
    raise InputError(f"model {ref!r} is neither a file nor a reference model name")


def _device(ref: str, measured: str | None, model: CnnModel) -> LatencySource:
    if measured:
        return load_measured_profile(measured, model.name, len(model.units))
    return load_device_profile(resolve_profile_path(ref))


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class _Run:
    """Collects inputs/outputs of one command for its manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.params = {k: v for k, v in vars(args).items() if k != "func"}
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.start = time.perf_counter()

    def add_input(self, *paths) -> None:
        for p in paths:
            if p and Path(p).is_file():
                self.inputs.append(str(p))

    def write(self, path, text: str) -> None:
        atomic_write_text(path, text)
        self.outputs.append(str(path))

    def write_manifest(self, directory) -> None:
        if not self.outputs:
            return
        manifest = {
            "command": self.command,
            "parameters": self.params,
            "inputs": {p: file_digest(p) for p in self.inputs},
            "outputs": {p: file_digest(p) for p in self.outputs},
            "tool_version": __version__,
            "wall_time_s": time.perf_counter() - self.start,
        }
        atomic_write_text(Path(directory) / f"manifest_{self.command}.json", _dump(manifest))


def cmd_plan(args, run: _Run) -> None:
    model = _load_model(args.model)
    dpu = _device(args.dpu, args.dpu_measured, model)
    gpu = _device(args.gpu, args.gpu_measured, model)
    link = load_link_profile(resolve_profile_path(args.link))
    run.add_input(args.model, args.dpu, args.gpu, args.link, args.dpu_measured, args.gpu_measured)
    plan = optimal_split(model, dpu, gpu, link, TransferPath(args.path))
    doc = {"model": model.name, "n_units": len(model.units), **plan.to_dict()}
    print(f"{model.name}: k*={plan.split_index} of {len(model.units)} ({plan.path.value})")
    print(f"  stage1 {plan.stage1 * 1e6:.3f} us  stage2 {plan.stage2 * 1e6:.3f} us  "
          f"steady {plan.steady_latency * 1e6:.3f} us")
    print(f"  speedup over dpu {plan.speedup_over_dpu:.3f}x  over gpu {plan.speedup_over_gpu:.3f}x")
    if args.out:
        run.write(args.out, _dump(doc))
        run.write_manifest(Path(args.out).parent)
    else:
        print(_dump(doc), end="")


def cmd_simulate(args, run: _Run) -> None:
    model = _load_model(args.model)
    dpu = _device(args.dpu, args.dpu_measured, model)
    gpu = _device(args.gpu, args.gpu_measured, model)
    link = load_link_profile(resolve_profile_path(args.link))
    run.add_input(args.model, args.dpu, args.gpu, args.link, args.dpu_measured, args.gpu_measured)
    summary = simulate_pipeline(model, dpu, gpu, link, args.split, TransferPath(args.path),
                                args.images, args.queue)
    text = _dump(summary.to_dict())
    if args.out:
        run.write(args.out, text)
        run.write_manifest(Path(args.out).parent)
    print(text, end="")


def cmd_report(args, run: _Run) -> None:
    if args.zoo:
        models = zoo()
    else:
        files = sorted(Path(args.models).glob("*.json"))
        if not files:
            raise InputError(f"no model JSON files in {args.models}")
        models = [_load_model(str(f)) for f in files]
        run.add_input(*files)
    dpu = load_device_profile(resolve_profile_path(args.dpu))
    gpu = load_device_profile(resolve_profile_path(args.gpu))
    link = load_link_profile(resolve_profile_path(args.link))
    run.add_input(args.dpu, args.gpu, args.link)
    report = speedup_report(models, dpu, gpu, link)
    out = Path(args.out)
    run.write(out / "speedups.csv", report.speedups_csv())
    for (name, path) in report.curves:
        run.write(out / f"curve_{name}_{path.value}.csv", report.curve_csv(name, path))
    run.write_manifest(out)
    print(report.speedups_csv(), end="")


def cmd_export_models(args, run: _Run) -> None:
    out = Path(args.out)
    if args.zoo:
        models = zoo()
    else:
        models = [generate_random(GeneratorConfig(seed=args.seed + i)) for i in range(args.n)]
    for m in models:
        stem = m.name if args.zoo else str(m.name.removeprefix("random-"))
        run.write(out / f"{stem}.json", m.to_json() + "\n")
    run.write_manifest(out)
    print(f"wrote {len(models)} models to {out}")


def cmd_gen_dataset(args, run: _Run) -> None:
    dpu = load_device_profile(resolve_profile_path(args.dpu))
    gpu = load_device_profile(resolve_profile_path(args.gpu))
    link = load_link_profile(resolve_profile_path(args.link))
    run.add_input(args.dpu, args.gpu, args.link)
    records = generate_dataset(args.n, args.seed, dpu, gpu, link, TransferPath(args.path))
    save_dataset(records, args.out)
    run.outputs.append(str(args.out))
    run.write_manifest(Path(args.out).parent)
    print(f"wrote {len(records)} records to {args.out}")


def cmd_train(args, run: _Run) -> None:
    records = load_dataset(args.dataset)
    run.add_input(args.dataset)
    config = TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                         train_fraction=args.train_fraction, hidden=args.hidden)
    train_set, _ = split_train_test(records, config.train_fraction, config.seed)

    def progress(epoch, loss):
        if not args.quiet and (epoch % 10 == 0 or epoch == config.epochs - 1):
            print(f"epoch {epoch:4d}  loss {loss:.6f}", file=sys.stderr)

    result = train([r.sample for r in train_set], config, Formulation(args.formulation),
                   progress)
    run.write(args.out, result.params_json())
    loss_path = args.loss_csv or str(Path(args.out).with_suffix("")) + "_loss.csv"
    run.write(loss_path, result.loss_csv())
    run.write_manifest(Path(args.out).parent)
    print(f"trained {args.formulation} model on {len(train_set)} graphs; "
          f"loss {result.losses[0]:.5f} -> {result.losses[-1]:.5f}")


def cmd_evaluate(args, run: _Run) -> None:
    records = load_dataset(args.dataset)
    try:
        doc = json.loads(Path(args.params).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot load params {args.params}: {exc}") from exc
    run.add_input(args.dataset, args.params)
    predictor = predictor_from_dict(doc)
    if args.formulation and Formulation(args.formulation) is not predictor.formulation:
        raise InputError(f"params hold a {predictor.formulation.value} model, "
                         f"not {args.formulation}")
    cfg = doc.get("config", {})
    if args.split == "all":
        subset = records
    else:
        train_set, test_set = split_train_test(records, cfg.get("train_fraction", 0.8),
                                               cfg.get("seed", 0))
        subset = test_set if args.split == "test" else train_set
    samples = [r.sample for r in subset]
    metrics = evaluate(predict_all(predictor, samples), samples)
    doc_out = {"formulation": predictor.formulation.value, "split": args.split,
               **metrics.to_dict()}
    text = _dump(doc_out)
    if args.out:
        run.write(args.out, text)
        run.write_manifest(Path(args.out).parent)
    print(text, end="")


def _add_devices(p: argparse.ArgumentParser, positional: bool) -> None:
    if positional:
        p.add_argument("model", help="model JSON file or reference model name")
        p.add_argument("dpu", help="first-stage device profile (path or shipped name)")
        p.add_argument("gpu", help="second-stage device profile (path or shipped name)")
        p.add_argument("link", help="link profile (path or shipped name)")
        p.add_argument("--dpu-measured", help="unit_index,latency_seconds CSV for the DPU")
        p.add_argument("--gpu-measured", help="unit_index,latency_seconds CSV for the GPU")
    else:
        p.add_argument("--dpu", default="dpu-like")
        p.add_argument("--gpu", default="gpu-like")
        p.add_argument("--link", default="link")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitpipe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="optimal split of one model")
    _add_devices(p, positional=True)
    p.add_argument("--path", choices=[t.value for t in TransferPath], default="direct")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="event simulation of one split")
    _add_devices(p, positional=True)
    p.add_argument("--split", type=int, required=True)
    p.add_argument("--images", type=int, default=1000)
    p.add_argument("--queue", type=int, default=4)
    p.add_argument("--path", choices=[t.value for t in TransferPath], default="direct")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="speedup table and latency curves")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--zoo", action="store_true")
    src.add_argument("--models", help="directory of model JSON files")
    _add_devices(p, positional=False)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-models", help="write model JSON files")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--zoo", action="store_true")
    src.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_models)

    p = sub.add_parser("gen-dataset", help="labeled random-CNN corpus")
    p.add_argument("--n", type=int, default=1700)
    p.add_argument("--seed", type=int, default=0)
    _add_devices(p, positional=False)
    p.add_argument("--path", choices=[t.value for t in TransferPath], default="direct")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train a split predictor")
    p.add_argument("--dataset", required=True)
    p.add_argument("--formulation", choices=[f.value for f in Formulation], required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--out", required=True, help="params JSON path")
    p.add_argument("--loss-csv")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="split-quality metrics of a trained predictor")
    p.add_argument("--dataset", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--formulation", choices=[f.value for f in Formulation])
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    run = _Run(args.command, args)
    try:
        args.func(args, run)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DomainError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
