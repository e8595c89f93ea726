"""SGD training loop: polynomial LR decay, momentum, weight decay, batch size 1.

Every source of randomness (dropout, shuffling, augmentation) is indexed by
the global iteration, so a run resumed from a snapshot replays the same
loss log as an uninterrupted one.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as D
from .checkpoint import read_records, write_records
from .losses import LossConfig, compute_beta, network_loss_and_grads
from .network import TDCEDN, load_checkpoint, save_checkpoint
from .tensor import Precision

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "lr", "side_loss", "pred_loss", "total")


@dataclass
class TrainConfig:
    base_lr: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 2e-4
    max_iter: int = 20000
    lr_power: float = 0.8
    batch: int = 1
    alpha: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    seed: int = 0
    input_size: int = D.TRAIN_SIZE
    consensus: str = "over3"
    rotations: tuple = (0, 90, 180, 270)
    horizontal_flip: bool = True
    snapshot_every: int = 0
    decay_biases: bool = False

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        self.rotations = tuple(int(r) for r in self.rotations)
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_power <= 0:
            raise ValueError("lr_power must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.batch != 1:
            raise ValueError("only mini-batches of one image are supported")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        D.ConsensusPolicy.parse(self.consensus)
        LossConfig(self.alpha)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        """Parse ``key = value`` lines (``#`` comments); unknown keys are errors."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(fields[key].default, raw)
        values.update(overrides)
        return cls(**values)


def _parse_value(default, raw: str):
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) for v in raw.replace(" ", "").split(",") if v)
    return type(default)(raw)


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """``base_lr * (1 - iteration / max_iter) ** lr_power``."""
    if iteration < 0 or iteration > cfg.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    return cfg.base_lr * (1.0 - iteration / cfg.max_iter) ** cfg.lr_power


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    iteration: int = 0


def decays(name: str, cfg: TrainConfig) -> bool:
    return cfg.decay_biases or name.endswith(".weight") or name.endswith(".gamma")


def sgd_step(params, state: OptimizerState, cfg: TrainConfig, grads=None, lr: float | None = None) -> None:
    """In-place momentum SGD: ``v = m*v - lr*(g + wd*theta)``, ``theta += v``.

    ``grads`` maps names to arrays; by default each tensor's ``.grad`` is used.
    """
    if lr is None:
        lr = poly_lr(state.iteration, cfg)
    for name, t in params.items():
        g = t.grad if grads is None else grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(t.data)
        step = g + cfg.weight_decay * t.data if decays(name, cfg) and cfg.weight_decay else g
        v *= t.data.dtype.type(cfg.momentum)
        v -= t.data.dtype.type(lr) * step
        t.data += v
    state.iteration += 1


def save_optimizer_state(state: OptimizerState, path) -> None:
    records = [(f"velocity.{k}", v) for k, v in state.velocity.items()]
    records.append(("iteration", np.array([state.iteration], dtype=np.float64)))
    dtype = next(iter(state.velocity.values())).dtype if state.velocity else np.float64
    # iteration is stored in the file precision; exact below 2**24 even at f32
    write_records(path, Precision.coerce(dtype), records)


def load_optimizer_state(path) -> OptimizerState:
    _, records = read_records(path)
    it = int(records.pop("iteration")[0])
    velocity = {k[len("velocity."):]: v for k, v in records.items()}
    return OptimizerState(velocity, it)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, iteration: int, snapshot: Path | None):
        super().__init__(message)
        self.iteration = iteration
        self.snapshot = snapshot


@dataclass
class TrainResult:
    log: list
    checkpoint: Path | None
    state: OptimizerState


def _prepare(sample: D.Sample, cfg: TrainConfig) -> D.Sample:
    gt = D.consensus(sample.gt_annotations, D.ConsensusPolicy.parse(cfg.consensus))
    s = D.Sample(sample.image, [gt], sample.id)
    if cfg.input_size:
        s = D.resize_sample(s, cfg.input_size, cfg.input_size)
    return s


def _non_finite_grad(graph: TDCEDN) -> str | None:
    for name, t in graph.params.items():
        if t.grad is None or not np.all(np.isfinite(t.grad)):
            return name
    return None


def snapshot(graph: TDCEDN, state: OptimizerState, path) -> Path:
    path = Path(path)
    save_checkpoint(graph, path)
    save_optimizer_state(state, path.with_suffix(path.suffix + ".opt"))
    return path


def train(
    graph: TDCEDN,
    dataset: Sequence[D.Sample],
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    on_step: Callable | None = None,
    until: int | None = None,
) -> TrainResult:
    """Run single-image SGD steps up to ``cfg.max_iter`` (or ``until``, if earlier).

    Stopping at ``until`` leaves the schedule untouched, so a later resume
    continues exactly where an uninterrupted run would be.

    Writes ``loss_log.csv``, periodic ``iter_XXXXXX.ckpt`` snapshots and
    ``final.ckpt`` under ``out_dir`` when given. A non-finite loss or
    gradient stops training with :class:`TrainingDiverged` after saving the
    last good state as ``last_good.ckpt``. Dropout masks, sample order and
    augmentation all derive from ``cfg.seed`` and the iteration number.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = OptimizerState()
    if resume_from is not None:
        load_checkpoint(resume_from, graph)
        state = load_optimizer_state(Path(str(resume_from) + ".opt"))
    loss_cfg = LossConfig(cfg.alpha)
    aug = D.AugmentSpec(cfg.rotations, cfg.horizontal_flip, cfg.seed)
    prepared = {}
    rows = []
    graph.train()
    graph.set_dropout_seed(cfg.seed)

    log_file = None
    writer = None
    if out is not None:
        log_file = open(out / "loss_log.csv", "a" if resume_from is not None else "w", newline="")
        writer = csv.writer(log_file)
        if resume_from is None:
            writer.writerow(LOG_HEADER)
    try:
        stop = cfg.max_iter if until is None else min(int(until), cfg.max_iter)
        for k in range(state.iteration, stop):
            idx = D.sample_index(len(dataset), cfg.seed, k)
            if idx not in prepared:
                prepared[idx] = _prepare(dataset[idx], cfg)
            s = D.augment(prepared[idx], aug, k)
            target = compute_beta(s.gt_annotations[0][None, None])
            graph.set_iteration(k)
            result = graph.forward(s.image[None])
            total, l_side, l_pred, g_pred, g_sides = network_loss_and_grads(result, target, loss_cfg)
            bad = None if math.isfinite(total) else "loss"
            if bad is None:
                graph.backward(g_pred, g_sides)
                if on_step is not None:
                    on_step(k, graph)
                bad = _non_finite_grad(graph)
            if bad is not None:
                path = snapshot(graph, state, out / "last_good.ckpt") if out is not None else None
                raise TrainingDiverged(f"non-finite {bad} at iteration {k + 1}", k + 1, path)
            lr = poly_lr(k, cfg)
            sgd_step(graph.params, state, cfg, lr=lr)
            row = (k + 1, lr, l_side, l_pred, total)
            rows.append(row)
            if writer is not None:
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
            if (k + 1) % 50 == 0:
                log.info("iter %d lr %.3e loss %.4f (side %.4f pred %.4f)", k + 1, lr, total, l_side, l_pred)
            if out is not None and cfg.snapshot_every and (k + 1) % cfg.snapshot_every == 0:
                snapshot(graph, state, out / f"iter_{k + 1:06d}.ckpt")
    finally:
        if log_file is not None:
            log_file.close()
    final = snapshot(graph, state, out / "final.ckpt") if out is not None else None
    return TrainResult(rows, final, state)


def read_loss_log(path) -> list[tuple]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != LOG_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [(int(r[0]), *(float(v) for v in r[1:])) for r in reader]
