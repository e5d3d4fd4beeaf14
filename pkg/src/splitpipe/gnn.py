"""GNN split predictors.

Two formulations share one encoder (three GCN + Linear pairs over the chain
graph, then an LSTM sweep):

* latency: one network per device regresses the cumulative latency at every
  node (forward edges and sweep for the first device, reversed for the
  second); the split is then chosen with the pipeline max-rule.
* index: a single network scores every split position and is trained with
  cross-entropy against the optimal split. A learned virtual start node is
  prepended so that split 0 (everything on the second device) is a class too.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Sequence

import numpy as np
from numba import njit

from . import tensor_ad as ad
from .cnn_ir import N_FEATURES, Direction, chain_edges
from .errors import EmptyDataset, EmptyTestSet, InputError, LengthMismatch, ShapeMismatch
from .pipeline import TransferPath, curve_from_cumulative
from .tensor_ad import Tape, Var

N_GCN_PAIRS = 3


class Formulation(str, Enum):
    LATENCY = "latency"
    INDEX = "index"


@dataclass
class GraphSample:
    features: np.ndarray                # L x 13
    dpu_cum_latency: np.ndarray         # units 0..i on the first device
    gpu_cum_latency: np.ndarray         # units i..L-1 on the second device
    transfer: np.ndarray                # L+1 cut transfer times
    optimal_index: int
    path: TransferPath = TransferPath.DIRECT

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.dpu_cum_latency = np.asarray(self.dpu_cum_latency, dtype=float)
        self.gpu_cum_latency = np.asarray(self.gpu_cum_latency, dtype=float)
        self.transfer = np.asarray(self.transfer, dtype=float)
        self.path = TransferPath(self.path)
        n = self.n_units
        if self.features.shape != (n, N_FEATURES):
            raise ShapeMismatch("GraphSample.features", (n, N_FEATURES), self.features.shape)
        if len(self.dpu_cum_latency) != n or len(self.gpu_cum_latency) != n \
                or len(self.transfer) != n + 1:
            raise LengthMismatch("label vectors disagree with the node count")

    @property
    def n_units(self) -> int:
        return self.features.shape[0]

    @property
    def forward_edges(self) -> tuple[tuple[int, int], ...]:
        return chain_edges(self.n_units, Direction.FORWARD)

    @property
    def reverse_edges(self) -> tuple[tuple[int, int], ...]:
        return chain_edges(self.n_units, Direction.REVERSE)

    def steady_curve(self) -> np.ndarray:
        """Ground-truth steady-state latency of every split."""
        return cumulative_curve(self.dpu_cum_latency, self.gpu_cum_latency, self.transfer,
                                self.path).steady

    def to_dict(self) -> dict[str, Any]:
        return {
            "features": self.features.tolist(),
            "dpu_cum_latency": self.dpu_cum_latency.tolist(),
            "gpu_cum_latency": self.gpu_cum_latency.tolist(),
            "transfer": self.transfer.tolist(),
            "optimal_index": self.optimal_index,
            "path": self.path.value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GraphSample:
        return cls(np.array(d["features"], dtype=float).reshape(-1, N_FEATURES),
                   d["dpu_cum_latency"], d["gpu_cum_latency"], d["transfer"],
                   int(d["optimal_index"]), d.get("path", "direct"))


def cumulative_curve(dpu_cum, gpu_cum, transfer, path):
    """Max-rule stage curve from per-node cumulative latencies."""
    dpu_cum = np.asarray(dpu_cum, dtype=float)
    gpu_cum = np.asarray(gpu_cum, dtype=float)
    if len(dpu_cum) != len(gpu_cum) or len(transfer) != len(dpu_cum) + 1:
        raise LengthMismatch("need L cumulative latencies per device and L+1 transfers")
    prefix = np.concatenate([[0.0], dpu_cum])
    suffix = np.concatenate([gpu_cum, [0.0]])
    return curve_from_cumulative(prefix, suffix, np.asarray(transfer, dtype=float), path)


def predict_split_from_latency(dpu_pred, gpu_pred, transfer,
                               path: TransferPath = TransferPath.DIRECT) -> int:
    return cumulative_curve(dpu_pred, gpu_pred, transfer, path).best_index()


def normalized_adjacency(n: int, edges) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with ``A[dst, src] = 1`` per directed edge."""
    a = np.eye(n)
    for src, dst in edges:
        a[dst, src] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


class GnnParams:
    """Named weight matrices backed by one flat buffer (for the optimizer)."""

    def __init__(self, shapes: dict[str, tuple[int, int]], seed: int,
                 meta: dict[str, Any] | None = None):
        self.shapes = dict(shapes)
        self.seed = seed
        self.meta = dict(meta or {})
        size = sum(r * c for r, c in self.shapes.values())
        self.flat = np.zeros(size)
        self.vars: dict[str, Var] = {}
        offset = 0
        for name, (r, c) in self.shapes.items():
            v = Var(np.zeros((r, c)), name=name)
            v.value = self.flat[offset:offset + r * c].reshape(r, c)
            self.vars[name] = v
            offset += r * c
        self._init(seed)

    def _init(self, seed: int) -> None:
        # uniform in +-1/sqrt(fan_in); biases use the fan-in of their layer
        rng = np.random.default_rng(seed)
        fan = self.meta.get("fan_in", {})
        for name, (r, c) in self.shapes.items():
            bound = 1.0 / np.sqrt(fan.get(name, r))
            self.vars[name].value[...] = rng.uniform(-bound, bound, size=(r, c))

    def __getitem__(self, name: str) -> Var:
        return self.vars[name]

    def parameters(self) -> list[Var]:
        return list(self.vars.values())

    def zero_grad(self) -> None:
        for v in self.vars.values():
            v.zero_grad()

    def flat_grad(self, out: np.ndarray | None = None) -> np.ndarray:
        if out is None:
            out = np.empty(self.flat.size)
        offset = 0
        for v in self.vars.values():
            n = v.value.size
            if v._grad is None:
                out[offset:offset + n] = 0.0
            else:
                out[offset:offset + n] = v._grad.ravel()
            offset += n
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "meta": self.meta,
            "shapes": {k: list(s) for k, s in self.shapes.items()},
            "matrices": {k: v.value.tolist() for k, v in self.vars.items()},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GnnParams:
        shapes = {k: tuple(s) for k, s in d["shapes"].items()}
        p = cls(shapes, int(d["seed"]), d.get("meta"))
        for k, m in d["matrices"].items():
            p.vars[k].value[...] = np.asarray(m, dtype=float).reshape(shapes[k])
        return p


def _encoder_shapes(d_in: int, d_h: int) -> tuple[dict[str, tuple[int, int]], dict[str, int]]:
    shapes: dict[str, tuple[int, int]] = {}
    fan: dict[str, int] = {}
    width = d_in
    for i in range(N_GCN_PAIRS):
        shapes[f"gcn{i}.w"] = (width, d_h)
        shapes[f"lin{i}.w"] = (d_h, d_h)
        shapes[f"lin{i}.b"] = (1, d_h)
        fan[f"lin{i}.b"] = d_h
        width = d_h
    return shapes, fan


def _lstm_shapes(prefix: str, d_h: int) -> tuple[dict[str, tuple[int, int]], dict[str, int]]:
    shapes = {f"{prefix}.w_in": (d_h, 4 * d_h), f"{prefix}.w_rec": (d_h, 4 * d_h),
              f"{prefix}.b": (1, 4 * d_h)}
    return shapes, {f"{prefix}.b": d_h}


def latency_params(seed: int, hidden: int = 64, d_in: int = N_FEATURES) -> GnnParams:
    shapes, fan = _encoder_shapes(d_in, hidden)
    s, f = _lstm_shapes("lstm", hidden)
    shapes |= s
    fan |= f
    shapes |= {"head.w": (hidden, 1), "head.b": (1, 1)}
    fan["head.b"] = hidden
    return GnnParams(shapes, seed, {"hidden": hidden, "d_in": d_in, "fan_in": fan})


def index_params(seed: int, hidden: int = 64, d_in: int = N_FEATURES) -> GnnParams:
    shapes, fan = _encoder_shapes(d_in, hidden)
    shapes["virtual"] = (1, hidden)
    fan["virtual"] = hidden
    for prefix in ("lstm_fwd", "lstm_rev"):
        s, f = _lstm_shapes(prefix, hidden)
        shapes |= s
        fan |= f
    # the score head reads the concatenated [forward | reverse] states; it has no
    # bias because softmax ignores a shift shared by every score
    shapes |= {"head.w_fwd": (hidden, 1), "head.w_rev": (hidden, 1)}
    fan |= {"head.w_fwd": 2 * hidden, "head.w_rev": 2 * hidden}
    return GnnParams(shapes, seed, {"hidden": hidden, "d_in": d_in, "fan_in": fan})


def gcn_layer(adj_norm: Var, h: Var, w: Var) -> Var:
    return ad.relu(ad.matmul(ad.matmul(adj_norm, h), w))


def encode(params: GnnParams, adj_norm: Var, features: Var) -> Var:
    h = features
    for i in range(N_GCN_PAIRS):
        h = gcn_layer(adj_norm, h, params[f"gcn{i}.w"])
        h = ad.relu(ad.add_bias(ad.matmul(h, params[f"lin{i}.w"]), params[f"lin{i}.b"]))
    return h


def lstm_sweep(params: GnnParams, h: Var, direction: Direction = Direction.FORWARD,
               prefix: str = "lstm") -> Var:
    return ad.lstm(h, params[f"{prefix}.w_in"], params[f"{prefix}.w_rec"],
                   params[f"{prefix}.b"], reverse=Direction(direction) is Direction.REVERSE)


class _Cache:
    """Per-sample constants reused across epochs."""

    def __init__(self, sample: GraphSample):
        n = sample.n_units
        self.features = Var(sample.features)
        self.adj_fwd = Var(normalized_adjacency(n, sample.forward_edges))
        self.adj_rev = Var(normalized_adjacency(n, sample.reverse_edges))


def _cache(sample: GraphSample) -> _Cache:
    c = getattr(sample, "_gnn_cache", None)
    if c is None:
        c = _Cache(sample)
        sample._gnn_cache = c
    return c


def latency_branch(params: GnnParams, sample: GraphSample, direction: Direction) -> Var:
    """Per-node output of one device's network, in standardized log-seconds."""
    c = _cache(sample)
    adj = c.adj_fwd if Direction(direction) is Direction.FORWARD else c.adj_rev
    h = encode(params, adj, c.features)
    s = lstm_sweep(params, h, direction)
    return ad.add_bias(ad.matmul(s, params["head.w"]), params["head.b"])


@dataclass
class LogScale:
    """Affine map between seconds and the standardized log targets."""

    mean: float = 0.0
    std: float = 1.0

    def to_target(self, seconds: np.ndarray) -> np.ndarray:
        return (np.log(seconds) - self.mean) / self.std

    def to_seconds(self, y: np.ndarray) -> np.ndarray:
        return np.exp(self.mean + self.std * np.asarray(y))

    @classmethod
    def fit(cls, samples: Sequence[GraphSample]) -> LogScale:
        logs = np.concatenate([np.log(np.concatenate([s.dpu_cum_latency, s.gpu_cum_latency]))
                               for s in samples])
        std = float(logs.std())
        return cls(float(logs.mean()), std if std > 0 else 1.0)


def latency_loss(params_dpu: GnnParams, params_gpu: GnnParams, sample: GraphSample,
                 scale: LogScale) -> Var:
    """MSE over both devices' cumulative-latency vectors."""
    y_dpu = latency_branch(params_dpu, sample, Direction.FORWARD)
    y_gpu = latency_branch(params_gpu, sample, Direction.REVERSE)
    pred = ad.concat_rows(y_dpu, y_gpu)
    target = np.concatenate([scale.to_target(sample.dpu_cum_latency),
                             scale.to_target(sample.gpu_cum_latency)])
    return ad.mse_loss(pred, Var(target.reshape(-1, 1)))


def latency_forward(params_dpu: GnnParams, params_gpu: GnnParams, sample: GraphSample,
                    scale: LogScale | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Predicted cumulative latencies (seconds) on each device."""
    scale = scale or LogScale()
    y_dpu = latency_branch(params_dpu, sample, Direction.FORWARD).value[:, 0]
    y_gpu = latency_branch(params_gpu, sample, Direction.REVERSE).value[:, 0]
    return scale.to_seconds(y_dpu), scale.to_seconds(y_gpu)


def index_scores(params: GnnParams, sample: GraphSample) -> Var:
    """1 x (L+1) scores; column k scores split index k."""
    c = _cache(sample)
    h = encode(params, c.adj_fwd, c.features)
    h = ad.concat_rows(params["virtual"], h)
    fwd = lstm_sweep(params, h, Direction.FORWARD, "lstm_fwd")
    rev = lstm_sweep(params, h, Direction.REVERSE, "lstm_rev")
    score = ad.add(ad.matmul(fwd, params["head.w_fwd"]), ad.matmul(rev, params["head.w_rev"]))
    return ad.transpose(score)


def index_loss(params: GnnParams, sample: GraphSample) -> Var:
    return ad.softmax_cross_entropy(index_scores(params, sample), sample.optimal_index)


def index_forward(params: GnnParams, sample: GraphSample) -> np.ndarray:
    """Probability of every split index 0..L."""
    return ad.softmax_rows(index_scores(params, sample)).value[0]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    adam_eps: float = 1e-8
    seed: int = 0
    train_fraction: float = 0.8
    hidden: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise InputError("train_fraction must lie in (0, 1)")
        if self.learning_rate < 0:
            raise InputError("learning_rate must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class Adam:
    def __init__(self, flat: np.ndarray, lr: float, betas: tuple[float, float], eps: float):
        self.flat = flat
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros_like(flat)
        self.v = np.zeros_like(flat)
        self.t = 0

    def step(self, grad: np.ndarray) -> None:
        self.t += 1
        _adam_update(self.flat, grad, self.m, self.v, self.lr, self.b1, self.b2, self.eps,
                     1 - self.b1 ** self.t, 1 - self.b2 ** self.t)


@njit(cache=True)
def _adam_update(x, g, m, v, lr, b1, b2, eps, corr1, corr2):
    step = lr / corr1
    inv_root2 = 1.0 / np.sqrt(corr2)
    for i in range(x.size):
        m[i] = b1 * m[i] + (1 - b1) * g[i]
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
        x[i] -= step * m[i] / (np.sqrt(v[i]) * inv_root2 + eps)


class LatencyPredictor:
    formulation = Formulation.LATENCY

    def __init__(self, dpu: GnnParams, gpu: GnnParams, scale: LogScale):
        self.dpu = dpu
        self.gpu = gpu
        self.scale = scale

    def parameters(self) -> list[GnnParams]:
        return [self.dpu, self.gpu]

    def loss(self, sample: GraphSample) -> Var:
        return latency_loss(self.dpu, self.gpu, sample, self.scale)

    def predict_latency(self, sample: GraphSample) -> tuple[np.ndarray, np.ndarray]:
        return latency_forward(self.dpu, self.gpu, sample, self.scale)

    def predict_split(self, sample: GraphSample) -> int:
        dpu, gpu = self.predict_latency(sample)
        return predict_split_from_latency(dpu, gpu, sample.transfer, sample.path)

    def to_dict(self) -> dict[str, Any]:
        return {"formulation": self.formulation.value, "scale": asdict(self.scale),
                "dpu": self.dpu.to_dict(), "gpu": self.gpu.to_dict()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LatencyPredictor:
        return cls(GnnParams.from_dict(d["dpu"]), GnnParams.from_dict(d["gpu"]),
                   LogScale(**d["scale"]))


class IndexPredictor:
    formulation = Formulation.INDEX

    def __init__(self, params: GnnParams):
        self.params = params

    def parameters(self) -> list[GnnParams]:
        return [self.params]

    def loss(self, sample: GraphSample) -> Var:
        return index_loss(self.params, sample)

    def probabilities(self, sample: GraphSample) -> np.ndarray:
        return index_forward(self.params, sample)

    def predict_split(self, sample: GraphSample) -> int:
        return int(np.argmax(index_scores(self.params, sample).value[0]))

    def to_dict(self) -> dict[str, Any]:
        return {"formulation": self.formulation.value, "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> IndexPredictor:
        return cls(GnnParams.from_dict(d["params"]))


Predictor = LatencyPredictor | IndexPredictor


def new_predictor(formulation: Formulation, seed: int, hidden: int = 64,
                  train_samples: Sequence[GraphSample] = ()) -> Predictor:
    formulation = Formulation(formulation)
    if formulation is Formulation.INDEX:
        return IndexPredictor(index_params(seed, hidden))
    scale = LogScale.fit(train_samples) if train_samples else LogScale()
    return LatencyPredictor(latency_params(seed, hidden), latency_params(seed + 1, hidden), scale)


def predictor_from_dict(d: dict[str, Any]) -> Predictor:
    if Formulation(d["formulation"]) is Formulation.INDEX:
        return IndexPredictor.from_dict(d)
    return LatencyPredictor.from_dict(d)


@dataclass
class TrainResult:
    predictor: Predictor
    losses: list[float]
    config: TrainConfig

    def params_json(self) -> str:
        doc = {"config": self.config.to_dict(), "seed": self.config.seed,
               **self.predictor.to_dict()}
        return json.dumps(doc, separators=(",", ":"))

    def loss_csv(self) -> str:
        lines = ["epoch,loss"] + [f"{i},{loss!r}" for i, loss in enumerate(self.losses)]
        return "\n".join(lines) + "\n"


def train(samples: Sequence[GraphSample], config: TrainConfig,
          formulation: Formulation = Formulation.INDEX, progress=None) -> TrainResult:
    """Adam, one graph per step, one seeded shuffle per epoch."""
    if not samples:
        raise EmptyDataset("cannot train on an empty dataset")
    predictor = new_predictor(formulation, config.seed, config.hidden, samples)
    groups = predictor.parameters()
    flat = np.concatenate([g.flat for g in groups])
    # re-point every group's buffer into the joint vector the optimizer updates
    offset = 0
    for g in groups:
        n = g.flat.size
        g.flat = flat[offset:offset + n]
        start = offset
        for name, (r, c) in g.shapes.items():
            g.vars[name].value = flat[start:start + r * c].reshape(r, c)
            start += r * c
        offset += n
    opt = Adam(flat, config.learning_rate, config.betas, config.adam_eps)
    grad = np.zeros_like(flat)
    grad_views = []
    offset = 0
    for g in groups:
        grad_views.append(grad[offset:offset + g.flat.size])
        offset += g.flat.size
    rng = np.random.default_rng(config.seed)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for i in order:
            for g in groups:
                g.zero_grad()
            with Tape() as tape:
                loss = predictor.loss(samples[i])
            tape.backward(loss)
            total += loss.item()
            for g, view in zip(groups, grad_views):
                g.flat_grad(view)
            opt.step(grad)
        losses.append(total / len(samples))
        if progress is not None:
            progress(epoch, losses[-1])
    return TrainResult(predictor, losses, config)


@dataclass(frozen=True)
class Metrics:
    layerwise_accuracy: float
    partition_index_mape: float
    latency_mape: float
    agreement_pct: float
    n_models: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def evaluate(predicted: Sequence[int], samples: Sequence[GraphSample]) -> Metrics:
    """Split-quality metrics of predicted indices against ground-truth labels."""
    if not samples:
        raise EmptyTestSet("no samples to evaluate")
    if len(predicted) != len(samples):
        raise LengthMismatch(f"{len(predicted)} predictions for {len(samples)} samples")
    acc, idx_err, lat_err, agree = [], [], [], []
    for k_pred, s in zip(predicted, samples):
        n = s.n_units
        k_true = s.optimal_index
        steady = s.steady_curve()
        gap = abs(int(k_pred) - k_true)
        acc.append((n - gap) / n)
        idx_err.append(gap / n * 100.0)
        lat_err.append(abs(steady[k_pred] - steady[k_true]) / steady[k_true] * 100.0)
        best_single = min(steady[0], steady[-1])
        agree.append((steady[k_pred] < best_single) == (steady[k_true] < best_single))
    return Metrics(float(np.mean(acc)), float(np.mean(idx_err)), float(np.mean(lat_err)),
                   float(np.mean(agree) * 100.0), len(samples))


def predict_all(predictor: Predictor, samples: Sequence[GraphSample]) -> list[int]:
    return [predictor.predict_split(s) for s in samples]
