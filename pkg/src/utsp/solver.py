"""Tour readout, per-instance loss minimisation, training and evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import instances as I
from .diffcore import Adam, Tensor, parameter
from .gnn import GnnConfig, GnnModel, forward_batch, stack_instances
from .instances import Seed, TspInstance, make_rng
from .loss import LossWeights, edge_probabilities, loss_and_violations, tsp_loss
from .subtour import parametric_connectivity

log = logging.getLogger(__name__)

# seed-stream tags keep training, decoding and noise draws disjoint
STREAM_TRAIN_DATA = 1
STREAM_TRAIN_NOISE = 2
STREAM_INIT = 3


def greedy_decode(x, start: int = 0) -> np.ndarray:
    """Follow the heaviest edge to an unvisited node; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 0 <= start < n:
        raise ValueError(f"start node {start} out of range for n={n}")
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    order = [start]
    cur = start
    for _ in range(n - 1):
        row = np.where(visited, -np.inf, x[cur])
        cur = int(np.argmax(row))
        visited[cur] = True
        order.append(cur)
    return np.array(order, dtype=np.int64)


def decode_start(n: int, seed: Seed, index: int) -> int:
    return int(make_rng(seed, index).integers(n))


# ---------------------------------------------------------------------------
# direct minimisation


@dataclass
class MinimizeTrace:
    x: np.ndarray
    initial_loss: float
    final_loss: float


def direct_minimize(inst: TspInstance, steps: int = 15000, lr: float = 0.01,
                    noise_scale: float = 0.0, seed: Seed = 0,
                    weights: Optional[LossWeights] = None, trace: bool = False):
    """Adam on free edge logits (zero-initialised), violations re-detected every step.

    Returns the final noiseless relaxed solution (and a :class:`MinimizeTrace`
    with noiseless start/end losses when ``trace`` is set).
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    w = weights or LossWeights()
    n = inst.n
    logits = parameter(np.zeros((1, n, n, 2)))
    costs = inst.weights[None]
    opt = Adam([logits], lr=lr)
    rng = make_rng(seed) if noise_scale > 0 else None
    initial = _noiseless_loss(logits.data[0], inst, w) if trace else float("nan")
    for _ in range(steps):
        opt.zero_grad()
        x = edge_probabilities(logits, noise_scale, rng)
        loss, _ = loss_and_violations(x, costs, w)
        loss.backward()
        opt.step()
    x = edge_probabilities(Tensor(logits.data), 0.0).data[0]
    if trace:
        return x, MinimizeTrace(x, initial, _noiseless_loss(logits.data[0], inst, w))
    return x


def _noiseless_loss(logits: np.ndarray, inst: TspInstance, w: LossWeights) -> float:
    x = edge_probabilities(Tensor(logits), 0.0).data
    return tsp_loss(x, inst, parametric_connectivity(x), w)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    method: str
    lengths: list
    gaps: list
    mean_gap: float
    seconds: Optional[float]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "count": len(self.lengths),
            "mean_gap": round(self.mean_gap, 3),
            "seconds": None if self.seconds is None else round(self.seconds, 3),
            "instances": [{"length": l, "gap": g} for l, g in zip(self.lengths, self.gaps)],
        }


def build_report(method: str, instances: Sequence[TspInstance], tours: Sequence[np.ndarray],
                 seconds: Optional[float]) -> EvalReport:
    lengths, gaps = [], []
    for inst, tour in zip(instances, tours):
        if inst.opt_len is None:
            raise I.InstanceError("instance has no known optimum; annotate the dataset first")
        length = I.tour_length(tour, inst)
        lengths.append(length)
        gaps.append(I.optimality_gap(length, inst.opt_len))
    mean = float(np.mean(gaps)) if gaps else float("nan")
    return EvalReport(method, lengths, gaps, mean, seconds)


def predict(model: GnnModel, instances: Sequence[TspInstance], batch_size: int = 256) -> list[np.ndarray]:
    """Noiseless relaxed solutions, batched in dataset order."""
    out = []
    for lo in range(0, len(instances), batch_size):
        chunk = instances[lo:lo + batch_size]
        costs, coords = stack_instances(chunk, model.config.coord_input)
        out.extend(forward_batch(model, costs, coords).data)
    return out


def evaluate(model: GnnModel, dataset: Sequence[TspInstance], decode_start_seed: Seed = 0,
             batch_size: int = 256) -> EvalReport:
    t0 = time.perf_counter()
    xs = predict(model, dataset, batch_size)
    tours = [greedy_decode(x, decode_start(inst.n, decode_start_seed, k))
             for k, (inst, x) in enumerate(zip(dataset, xs))]
    seconds = time.perf_counter() - t0
    return build_report("gnn", dataset, tours, seconds)


def run_baseline(method: str, dataset: Sequence[TspInstance], seed: Seed = 0) -> EvalReport:
    t0 = time.perf_counter()
    if method == "greedy":
        tours = [I.greedy_nearest(inst, 0) for inst in dataset]
    elif method == "random":
        tours = [I.random_tour(inst.n, (*_seq(seed), k)) for k, inst in enumerate(dataset)]
    else:
        raise ValueError(f"unknown baseline {method!r}")
    return build_report(method, dataset, tours, time.perf_counter() - t0)


def run_minimize(dataset: Sequence[TspInstance], steps: int, lr: float, noise_scale: float,
                 seed: Seed = 0, decode_start_seed: Seed = 0,
                 weights: Optional[LossWeights] = None) -> EvalReport:
    t0 = time.perf_counter()
    tours = []
    for k, inst in enumerate(dataset):
        x = direct_minimize(inst, steps, lr, noise_scale, (*_seq(seed), k), weights)
        tours.append(greedy_decode(x, decode_start(inst.n, decode_start_seed, k)))
    return build_report("minimize", dataset, tours, time.perf_counter() - t0)


def _seq(seed: Seed) -> tuple:
    return (int(seed),) if isinstance(seed, (int, np.integer)) else tuple(int(s) for s in seed)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    n: int = 20
    kind: str = "euclidean"
    epochs: int = 100
    epoch_size: int = 128000
    batch_size: int = 128
    lr: float = 1e-4
    d: int = 64
    layers: int = 16
    alpha: float = 5.0
    beta: float = 1.0
    gamma: float = 1.0
    noise_scale: Optional[float] = None
    seed: int = 0
    val_path: Optional[str] = None
    val_decode_seed: int = 0
    metrics_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    timing: bool = True

    def __post_init__(self):
        if self.kind not in ("euclidean", "asymmetric"):
            raise ValueError(f"kind must be euclidean or asymmetric, got {self.kind!r}")
        for name in ("n", "epochs", "epoch_size", "batch_size", "d", "layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n < 3:
            raise ValueError("n must be at least 3")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.noise_scale is None:
            self.noise_scale = 0.1 if self.kind == "asymmetric" else 0.0

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.noise_scale)

    @property
    def model_config(self) -> GnnConfig:
        return GnnConfig.for_kind(self.kind, d=self.d, layers=self.layers, noise_scale=self.noise_scale)


@dataclass
class EpochMetrics:
    epoch: int
    mean_train_loss: float
    val_mean_gap: float
    seconds: Optional[float]


@dataclass
class TrainResult:
    model: GnnModel
    metrics: list = field(default_factory=list)
    best_epoch: int = 0


METRICS_HEADER = ["epoch", "mean_train_loss", "val_mean_gap", "seconds"]


def _fmt(v: Optional[float], digits: int) -> str:
    return "" if v is None else f"{v:.{digits}f}"


def write_metrics(path, rows: Sequence[EpochMetrics]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r.epoch, f"{r.mean_train_loss:.6f}", f"{r.val_mean_gap:.3f}", _fmt(r.seconds, 3)])


def train(config: TrainConfig, validation: Optional[Sequence[TspInstance]] = None) -> TrainResult:
    """Fresh instances every epoch; validation by greedy decoding after each epoch.

    Each epoch draws ``epoch_size`` instances from stream ``(seed, 1, epoch)``;
    a trailing batch smaller than ``batch_size`` is kept.
    """
    if validation is None:
        if config.val_path is None:
            raise ValueError("a validation set (or val_path) is required")
        validation = I.read_dataset(config.val_path)
    validation = list(validation)
    if any(inst.opt_len is None for inst in validation):
        raise I.InstanceError("validation instances must carry opt_len")
    if any(inst.n != config.n for inst in validation):
        raise I.InstanceError("validation instances must match the training size")
    val_hashes = {inst.digest() for inst in validation}

    model = GnnModel(config.model_config, seed=(config.seed, STREAM_INIT))
    opt = Adam(model.parameters(), lr=config.lr)
    w = config.loss_weights
    result = TrainResult(model)
    best_gap = np.inf
    ckpt = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        data = I.generate(config.kind, config.n, config.epoch_size, (config.seed, STREAM_TRAIN_DATA, epoch))
        if any(inst.digest() in val_hashes for inst in data):
            raise RuntimeError("training data overlaps the validation set")
        noise_rng = make_rng(config.seed, STREAM_TRAIN_NOISE, epoch)
        total, count = 0.0, 0
        for lo in range(0, len(data), config.batch_size):
            batch = data[lo:lo + config.batch_size]
            costs, coords = stack_instances(batch, model.config.coord_input)
            opt.zero_grad()
            x = forward_batch(model, costs, coords, w.noise_scale, noise_rng)
            loss, _ = loss_and_violations(x, costs, w)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        report = evaluate(model, validation, config.val_decode_seed)
        seconds = time.perf_counter() - t0 if config.timing else None
        row = EpochMetrics(epoch, total / count, report.mean_gap, seconds)
        result.metrics.append(row)
        log.info("epoch %d  loss %.4f  val gap %.3f%%", epoch, row.mean_train_loss, row.val_mean_gap)
        if ckpt is not None and report.mean_gap < best_gap:
            model.save(ckpt / "best.json")
        if report.mean_gap < best_gap:
            best_gap = report.mean_gap
            result.best_epoch = epoch
        if config.metrics_path:
            write_metrics(config.metrics_path, result.metrics)
    if ckpt is not None:
        model.save(ckpt / "final.json")
    return result


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
