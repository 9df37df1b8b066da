"""Plain SGD with a plateau-halving learning rate and dev-set early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .network import Network, build_architecture

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    initial_lr: float = 0.01
    lr_patience: int = 5
    lr_factor: float = 0.5
    lr_floor: float = 1e-6
    max_epochs: int = 100
    seed: int = 0
    restore_best: bool = True
    # parameter-name prefixes excluded from updates, e.g. ("branch1.",)
    freeze: tuple = ()

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalisation)")
        if min(self.initial_lr, self.lr_floor, self.lr_patience, self.max_epochs) <= 0:
            raise ValueError("learning rates, patience and max_epochs must be positive")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")


class PlateauSchedule:
    """Multiply the rate by ``factor`` after ``patience`` evaluations without a new best.

    The counter resets on improvement and after every reduction.
    """

    def __init__(self, lr, patience=5, factor=0.5, floor=1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.floor = floor
        self.best = math.inf
        self.stale = 0

    def step(self, loss: float) -> bool:
        """Record one evaluation; returns True if the rate was reduced."""
        if loss < self.best:
            self.best = loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.lr *= self.factor
            self.stale = 0
            return True
        return False

    @property
    def exhausted(self) -> bool:
        return self.lr < self.floor


def lr_trajectory(dev_losses: Sequence[float], config: TrainConfig | None = None):
    """Replay the schedule on a dev-loss trace.

    Returns ``(lrs, stop_reason)`` where ``lrs[i]`` is the rate used in epoch
    ``i + 1``; the trace is cut where training would have stopped.
    """
    config = config or TrainConfig()
    sched = PlateauSchedule(config.initial_lr, config.lr_patience, config.lr_factor, config.lr_floor)
    lrs = []
    for epoch, loss in enumerate(dev_losses, start=1):
        lrs.append(sched.lr)
        sched.step(loss)
        if sched.exhausted:
            return lrs, "lr_floor"
        if epoch >= config.max_epochs:
            return lrs, "max_epochs"
    return lrs, None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    lr: float
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0

    @property
    def dev_losses(self):
        return [r.dev_loss for r in self.records]

    @property
    def lrs(self):
        return [r.lr for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "dev_loss", "lr"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.dev_loss), repr(r.lr)])


@dataclass
class TrainingData:
    """Inputs for one model: one (N, K, B) array per network branch."""

    inputs: list
    labels: np.ndarray
    speakers: np.ndarray

    def __post_init__(self):
        self.inputs = [np.asarray(x) for x in self.inputs]
        self.labels = np.asarray(self.labels)
        self.speakers = np.asarray(self.speakers)
        n = self.labels.shape[0]
        if any(x.shape[0] != n for x in self.inputs) or self.speakers.shape[0] != n:
            raise ValueError("inputs, labels and speakers must have the same length")

    def __len__(self):
        return self.labels.shape[0]


def sgd_step(params: dict, grads: dict, lr: float, frozen: Sequence[str] = ()) -> None:
    """In-place ``p -= lr * g`` for every non-frozen parameter."""
    for name, p in params.items():
        if any(name.startswith(prefix) for prefix in frozen):
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient in {name} ({bad} of {g.size} entries)")
        if lr:
            p -= p.dtype.type(lr) * g


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    bounds = list(range(0, n, batch_size)) + [n]
    # a trailing batch of one cannot be batch-normalised; fold it into its predecessor
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def train(model: Network, train_data: TrainingData, dev_data: TrainingData,
          config: TrainConfig | None = None) -> tuple[Network, TrainLog]:
    """Train ``model`` in place and return it with its log.

    Each epoch visits the shuffled training set once in mini-batches, then
    scores the dev set.  With ``restore_best`` the parameters with the lowest
    dev loss are restored at the end.
    """
    config = config or TrainConfig()
    if len(dev_data) == 0:
        raise ValueError("empty development set")
    if len(train_data) < 2:
        raise ValueError("need at least two training segments")
    overlap = set(train_data.speakers.tolist()) & set(dev_data.speakers.tolist())
    if overlap:
        raise ValueError(f"speakers in both training and dev sets: {sorted(overlap)}")

    rng = np.random.default_rng(config.seed)
    sched = PlateauSchedule(config.initial_lr, config.lr_patience, config.lr_factor, config.lr_floor)
    tlog = TrainLog()
    best_loss, best_state = math.inf, None
    params = model.params()

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        lr = sched.lr
        total = 0.0
        for idx in _batches(len(train_data), config.batch_size, rng):
            loss, grads, _ = model.loss_and_grads([x[idx] for x in train_data.inputs], train_data.labels[idx], rng)
            sgd_step(params, grads, lr, config.freeze)
            total += loss * idx.size
        train_loss = total / len(train_data)
        dev_loss = model.loss(dev_data.inputs, dev_data.labels)
        tlog.records.append(EpochRecord(epoch, train_loss, dev_loss, lr, time.perf_counter() - t0))
        log.debug("epoch %d lr=%g train=%.4f dev=%.4f", epoch, lr, train_loss, dev_loss)
        if dev_loss < best_loss:
            best_loss, best_state, tlog.best_epoch = dev_loss, model.state_dict(), epoch
        sched.step(dev_loss)
        if sched.exhausted:
            tlog.stop_reason = "lr_floor"
            break
    else:
        tlog.stop_reason = "max_epochs"

    if config.restore_best and best_state is not None:
        model.load_state_dict(best_state)
    return model, tlog


def transfer_init_tefs(env_baseline: Network, fs_baseline: Network, seed: int) -> Network:
    """TEFS model whose branches copy two trained A1 baselines; dense head freshly drawn from ``seed``."""
    for name, m in (("envelope", env_baseline), ("fine-structure", fs_baseline)):
        if m.tag != "A1":
            raise ValueError(f"{name} baseline must be an A1 model, got {m.tag}")
    if env_baseline.input_shape != fs_baseline.input_shape:
        raise ValueError("baselines were built for different input sizes")
    tefs = build_architecture("TEFS", *env_baseline.input_shape, seed=seed, dtype=env_baseline.dtype)
    target = tefs.params()
    target.update(tefs.buffers())
    for branch, source in (("branch0.", env_baseline), ("branch1.", fs_baseline)):
        src = source.params()
        src.update(source.buffers())
        for name, arr in src.items():
            if name.startswith("branch0."):
                target[branch + name[len("branch0."):]][...] = arr
    return tefs
