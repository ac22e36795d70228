"""Training loop, metrics, learning-rate schedule and multi-seed runner."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .bilateral import unsup_loss
from .graph import Graph, GraphBatch
from .heads import TaskKind, TaskSpec, task_loss
from .model import Model, ModelConfig, build_model

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    decay: float = 0.5
    patience: int = 10
    min_lr: float = 1e-5
    max_epochs: int = 500
    batch_size: int = 32
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4])

    def validate(self) -> None:
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay factor {self.decay} outside (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("lr, batch size and max epochs must be positive")


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)


class ReduceOnPlateau:
    """Multiply the optimiser LR by ``factor`` after ``patience`` epochs
    without a strict improvement of the monitored loss."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 10):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.wait = 0

    def step(self, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.opt.lr *= self.factor
            self.wait = 0
            return True
        return False


# ---------------------------------------------------------------------------
# metrics


def balanced_accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean per-class recall over classes present in ``target``, in percent."""
    recalls = [np.mean(pred[target == c] == c) for c in np.unique(target)]
    return 100.0 * float(np.mean(recalls))


def accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    return 100.0 * float(np.mean(pred == target))


def f1_score(pred: np.ndarray, target: np.ndarray) -> float:
    tp = float(np.sum((pred == 1) & (target == 1)))
    fp = float(np.sum((pred == 1) & (target == 0)))
    fn = float(np.sum((pred == 0) & (target == 1)))
    if tp == 0.0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def task_metric(logits: np.ndarray, target: np.ndarray, spec: TaskSpec) -> float:
    kind = spec.kind
    if kind is TaskKind.GRAPH_REG:
        return float(np.mean(np.abs(logits.reshape(-1) - target)))
    if kind is TaskKind.EDGE_BINARY:
        return f1_score((logits.reshape(-1) > 0).astype(np.int64), target)
    pred = np.argmax(logits, axis=1)
    if kind is TaskKind.NODE_CLASS:
        return balanced_accuracy(pred, target)
    return accuracy(pred, target)


def higher_is_better(spec: TaskSpec) -> bool:
    return spec.kind is not TaskKind.GRAPH_REG


# ---------------------------------------------------------------------------
# loops


def batches(graphs: Sequence[Graph], size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(graphs)) if rng is None else rng.permutation(len(graphs))
    for start in range(0, len(graphs), size):
        yield GraphBatch([graphs[i] for i in order[start:start + size]])


def _prebatch(graphs: Sequence[Graph], size: int) -> list[GraphBatch]:
    return list(batches(graphs, size))


def evaluate_loss(model: Model, data, batch_size: int = 32) -> tuple[float, float]:
    """(supervised loss, task metric) over a graph list or prepared batches."""
    spec = model.cfg.task_spec
    blist = data if data and isinstance(data[0], GraphBatch) else _prebatch(data, batch_size)
    if not blist:
        raise ValueError("evaluate: empty graph set")
    model.eval()
    preds, targets, losses, weights = [], [], [], []
    with ad.no_grad():
        for batch in blist:
            out = model(batch)
            t = model.targets(batch)
            losses.append(float(task_loss(out.pred, t, spec).data))
            weights.append(len(t))
            preds.append(out.pred.data)
            targets.append(t)
    model.train()
    logits = np.concatenate(preds, axis=0)
    target = np.concatenate(targets)
    loss = float(np.average(losses, weights=weights))
    return loss, task_metric(logits, target, spec)


def evaluate(model: Model, graphs, batch_size: int = 32) -> float:
    """Task metric: MAE, balanced/plain accuracy (percent) or positive-class F1."""
    return evaluate_loss(model, graphs, batch_size)[1]


@dataclass
class RunRecord:
    seed: int
    config: dict
    num_params: int
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    test_metric: float | None = None
    train_metric: float | None = None
    diverged: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def train(model: Model, train_set: Sequence[Graph], val_set: Sequence[Graph], tc: TrainConfig,
          seed: int = 0, test_set: Sequence[Graph] | None = None) -> RunRecord:
    """Adam on L_s + lam * L_u with plateau LR decay; keeps the best-validation weights."""
    tc.validate()
    if not train_set or not val_set:
        raise ValueError("train: empty split")
    cfg = model.cfg
    spec = cfg.task_spec
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=tc.lr)
    sched = ReduceOnPlateau(opt, tc.decay, tc.patience)
    val_batches = _prebatch(val_set, tc.batch_size)
    record = RunRecord(seed=seed, config={"model": cfg.to_dict(), "train": asdict(tc)},
                       num_params=model.num_parameters())

    val_loss, val_metric = evaluate_loss(model, val_batches)
    record.epochs.append({"epoch": 0, "lr": opt.lr, "train_loss": None,
                          "val_loss": val_loss, "val_metric": val_metric})
    best_loss, best_state = val_loss, model.state_dict()

    model.train()
    for epoch in range(1, tc.max_epochs + 1):
        total, count = 0.0, 0
        for batch in batches(train_set, tc.batch_size, rng):
            opt.zero_grad()
            out = model(batch)
            loss = task_loss(out.pred, model.targets(batch), spec)
            if out.unsup and cfg.lam != 0.0:
                loss = loss + ad.scale(unsup_loss(out.unsup), cfg.lam)
            if not np.isfinite(loss.data):
                record.diverged = True
                record.epochs_run = epoch
                log.warning("seed %d diverged at epoch %d", seed, epoch)
                model.load_state_dict(best_state)
                return record
            ad.backward(loss)
            opt.step()
            total += float(loss.data) * batch.num_graphs
            count += batch.num_graphs
        val_loss, val_metric = evaluate_loss(model, val_batches)
        record.epochs.append({"epoch": epoch, "lr": opt.lr, "train_loss": total / count,
                              "val_loss": val_loss, "val_metric": val_metric})
        log.info("seed %d epoch %d train %.4f val %.4f metric %.4f lr %.2e",
                 seed, epoch, total / count, val_loss, val_metric, opt.lr)
        if val_loss < best_loss:
            best_loss, best_state = val_loss, model.state_dict()
            record.best_epoch = epoch
        record.epochs_run = epoch
        sched.step(val_loss)
        if opt.lr < tc.min_lr:
            break

    model.load_state_dict(best_state)
    if test_set:
        record.test_metric = evaluate(model, test_set, tc.batch_size)
        record.train_metric = evaluate(model, train_set, tc.batch_size)
    return record


# ---------------------------------------------------------------------------
# multi-seed runner


def _run_one(args) -> tuple[RunRecord, dict]:
    cfg, tc, seed, splits = args
    model = build_model(ModelConfig(**cfg), seed)
    rec = train(model, splits[0], splits[1], tc, seed=seed, test_set=splits[2])
    return rec, model.state_dict()


def summarize(records: Sequence[RunRecord]) -> dict:
    """Population mean/std of test metrics over non-diverged runs."""
    ok = [r for r in records if not r.diverged and r.test_metric is not None]
    metrics = np.array([r.test_metric for r in ok])
    epochs = np.array([r.epochs_run for r in ok])
    return {
        "seeds": [r.seed for r in records],
        "diverged_seeds": [r.seed for r in records if r.diverged],
        "test_mean": float(metrics.mean()) if len(ok) else None,
        "test_std": float(metrics.std()) if len(ok) else None,
        "epochs_mean": float(epochs.mean()) if len(ok) else None,
        "num_params": records[0].num_params if records else None,
    }


def run_benchmark(cfg: ModelConfig, tc: TrainConfig, splits, seeds: Sequence[int] | None = None,
                  out_path=None, workers: int = 1, return_states: bool = False):
    """Train one model per seed and aggregate; optionally write JSON lines.

    The output file holds one RunRecord per line followed by a summary line.
    """
    seeds = list(tc.seeds if seeds is None else seeds)
    if len(seeds) < 2:
        raise ValueError("run_benchmark needs at least two seeds")
    jobs = [(cfg.to_dict(), tc, s, splits) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    records = [r for r, _ in results]
    summary = summarize(records)
    if out_path is not None:
        with open(out_path, "w") as fh:
            for r in records:
                fh.write(r.to_json() + "\n")
            fh.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")
    if return_states:
        return summary, records, [s for _, s in results]
    return summary, records
