"""Focal loss, Adam, plateau scheduling, the fit loop and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import numerics as nx
from .architecture import McsdNet, ModelConfig
from .evaluation import ConfusionCounts, confusion
from .numerics import Rng, Tape, Tensor
from .numerics.serialize import FormatError, read_array, write_array

# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass
class FocalLossConfig:
    gamma_focal: float = 2.0
    clamp: float = 1e-7

    def __post_init__(self):
        if self.gamma_focal < 0:
            raise ValueError("gamma_focal must be nonnegative")
        if not 0 < self.clamp < 0.5:
            raise ValueError("clamp must lie in (0, 0.5)")


def focal_loss(probabilities: Tensor, targets, cfg: FocalLossConfig | None = None) -> Tensor:
    """Mean over all pixels of ``-(1 - p_t)^gamma * ln(p_t)``.

    ``p_t`` is the clamped probability assigned to the true class.
    """
    cfg = cfg or FocalLossConfig()
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if y.shape != probabilities.shape:
        raise nx.ShapeError(f"targets {y.shape} do not match probabilities {probabilities.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("targets must be binary")
    y = y.astype(probabilities.dtype)
    p = nx.clip(probabilities, cfg.clamp, 1.0 - cfg.clamp)
    # p_t = y p + (1 - y)(1 - p) = (1 - y) + (2y - 1) p
    p_t = nx.mul(p, 2.0 * y - 1.0) + (1.0 - y)
    log_pt = nx.log(p_t)
    if cfg.gamma_focal == 0:
        return nx.scale(nx.mean(log_pt), -1.0)
    weight = nx.power(nx.sub(1.0, p_t), cfg.gamma_focal)
    return nx.scale(nx.mean(weight * log_pt), -1.0)


def binary_cross_entropy(probabilities: Tensor, targets, clamp: float = 1e-7) -> Tensor:
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=probabilities.dtype)
    p = nx.clip(probabilities, clamp, 1.0 - clamp)
    ll = nx.mul(nx.log(p), y) + nx.mul(nx.log(nx.sub(1.0, p)), 1.0 - y)
    return nx.scale(nx.mean(ll), -1.0)


# ---------------------------------------------------------------------------
# optimiser and scheduler
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; moments are kept in the parameter dtype."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step_count}

    def load_state_dict(self, d: dict, m=None, v=None) -> None:
        self.lr, self.beta1, self.beta2, self.eps = d["lr"], d["beta1"], d["beta2"], d["eps"]
        self.step_count = int(d["step"])
        if m is not None:
            self.m = [np.array(a, dtype=p.dtype) for a, p in zip(m, self.params)]
            self.v = [np.array(a, dtype=p.dtype) for a, p in zip(v, self.params)]


def adam_step(params: Sequence[Tensor], grads, state: Adam) -> None:
    grads = list(grads)
    if any(g is None for g in grads):
        missing = sum(g is None for g in grads)
        raise ValueError(f"{missing} parameter(s) have no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2) + state.eps
        p.data -= (state.lr * (m / c1) / denom).astype(p.dtype, copy=False)


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` stale epochs."""

    lr: float = 1e-3
    factor: float = 0.5
    patience: int = 3
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best: float = math.inf
    num_bad: int = 0

    def step(self, monitored: float) -> float:
        return plateau_step(self, monitored)


def plateau_step(state: PlateauScheduler, monitored: float) -> float:
    if not math.isfinite(monitored):
        raise ValueError(f"monitored value {monitored} is not finite")
    if monitored < state.best - state.threshold:
        state.best = monitored
        state.num_bad = 0
    else:
        state.num_bad += 1
        if state.num_bad >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.num_bad = 0
    return state.lr


# ---------------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------------


class Dataset(Protocol):
    def __len__(self) -> int: ...

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]: ...


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}{': ' + detail if detail else ''}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma_focal: float = 2.0
    clamp: float = 1e-7
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-6
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float
    val_counts: ConfusionCounts = field(default_factory=ConfusionCounts)


LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "seconds")


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr), f"{r.seconds:.3f}"])
        return buf.getvalue()


@dataclass
class TrainerState:
    """Everything needed to resume: optimiser, scheduler, shuffle stream, epoch."""

    model: McsdNet
    optimizer: Adam
    scheduler: PlateauScheduler
    rng: Rng
    epoch: int = 0
    best_val: float = math.inf


def new_trainer(model: McsdNet, cfg: TrainConfig) -> TrainerState:
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = PlateauScheduler(lr=cfg.lr, factor=cfg.plateau_factor, patience=cfg.plateau_patience, min_lr=cfg.min_lr)
    return TrainerState(model, opt, sched, Rng(cfg.seed).spawn(1))


def evaluate_loss(model: McsdNet, data: Dataset, batch_size: int, loss_cfg: FocalLossConfig,
                  threshold: float | None = None) -> tuple[float, ConfusionCounts]:
    """Mean focal loss over ``data`` and, optionally, pooled confusion counts."""
    total = 0.0
    counts = ConfusionCounts()
    n = len(data)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        x, y = data.batch(idx)
        p = model(Tensor(x.astype(model.dtype)))
        total += focal_loss(p, y, loss_cfg).item() * len(idx)
        if threshold is not None:
            counts = counts + confusion((p.data >= threshold).astype(np.uint8), y.astype(np.uint8))
    return total / n, counts


def fit(model: McsdNet, train_data: Dataset, val_data: Dataset | None, cfg: TrainConfig,
        state: TrainerState | None = None, on_epoch: Callable[[EpochRecord, TrainerState], None] | None = None,
        log: TrainingLog | None = None, max_steps: int | None = None) -> TrainingLog:
    """Train ``model`` in place.

    Each epoch shuffles ``train_data`` with the trainer's seeded stream,
    takes one Adam step per batch, then scores ``val_data`` (or the training
    set when ``val_data`` is None), feeds the validation loss to the plateau
    scheduler and calls ``on_epoch`` (used for checkpointing).
    """
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    val_data = val_data if val_data is not None else train_data
    state = state or new_trainer(model, cfg)
    log = log or TrainingLog()
    loss_cfg = FocalLossConfig(cfg.gamma_focal, cfg.clamp)
    n = len(train_data)
    steps = 0
    while state.epoch < cfg.epochs:
        t0 = time.perf_counter()
        order = state.rng.permutation(n)
        running = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = train_data.batch(idx)
            state.optimizer.zero_grad()
            try:
                with Tape() as tape:
                    loss = focal_loss(model(Tensor(x.astype(model.dtype))), y, loss_cfg)
                tape.backward(loss)
            except nx.NonFiniteError as e:
                raise DivergenceError(state.epoch, bi, str(e)) from e
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(state.epoch, bi)
            state.optimizer.step()
            running += value * len(idx)
            log.step_losses.append(value)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                return log
        val_loss, counts = evaluate_loss(model, val_data, cfg.batch_size, loss_cfg, model.config.threshold)
        lr = state.scheduler.step(val_loss)
        state.optimizer.lr = lr
        state.epoch += 1
        rec = EpochRecord(state.epoch, running / n, val_loss, lr, time.perf_counter() - t0, counts)
        log.records.append(rec)
        if val_loss < state.best_val:
            state.best_val = val_loss
        if on_epoch is not None:
            on_epoch(rec, state)
    return log


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"MCSDCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: dict
    moments: tuple[list[np.ndarray], list[np.ndarray]]
    scheduler: dict
    rng: dict
    epoch: int
    best_val: float
    train_config: dict = field(default_factory=dict)

    def build_model(self) -> McsdNet:
        dtype = next(iter(self.params.values())).dtype if self.params else np.float32
        model = McsdNet(self.config, dtype=dtype)
        load_parameters(model, self.params)
        return model

    def trainer(self, model: McsdNet) -> TrainerState:
        opt = Adam(model.parameters())
        opt.load_state_dict(self.optimizer, *self.moments)
        sched = PlateauScheduler(**self.scheduler)
        return TrainerState(model, opt, sched, Rng.from_state(self.rng), self.epoch, self.best_val)


def load_parameters(model: McsdNet, params: dict[str, np.ndarray]) -> None:
    named = dict(model.named_parameters())
    if set(named) != set(params):
        missing = sorted(set(named) - set(params))
        extra = sorted(set(params) - set(named))
        raise ValueError(f"checkpoint/model mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in named.items():
        arr = params[name]
        if arr.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
        p.data = np.array(arr, dtype=p.dtype)


def _json_number(x: float):
    return None if x == math.inf else x


def _config_dict(train_config) -> dict:
    if train_config is None:
        return {}
    return asdict(train_config) if is_dataclass(train_config) else dict(train_config)


def checkpoint_from_state(state: TrainerState, train_config: TrainConfig | dict | None = None) -> Checkpoint:
    model = state.model
    return Checkpoint(
        config=model.config,
        params={n: p.data for n, p in model.named_parameters()},
        optimizer=state.optimizer.state_dict(),
        moments=(state.optimizer.m, state.optimizer.v),
        scheduler=asdict(state.scheduler),
        rng=state.rng.get_state(),
        epoch=state.epoch,
        best_val=state.best_val,
        train_config=_config_dict(train_config),
    )


def save_checkpoint(path, ckpt: Checkpoint | TrainerState, train_config: TrainConfig | dict | None = None) -> None:
    """Write a versioned checkpoint.

    Layout: ``MCSDCKPT``, uint32 version, uint64 header length, UTF-8 JSON
    header, then one tensor record per parameter followed by the Adam first
    and second moments in the same order.
    """
    if isinstance(ckpt, TrainerState):
        ckpt = checkpoint_from_state(ckpt, train_config)
    names = list(ckpt.params)
    sched = dict(ckpt.scheduler)
    sched["best"] = _json_number(sched["best"])
    header = {
        "config": ckpt.config.to_dict(),
        "param_names": names,
        "optimizer": ckpt.optimizer,
        "scheduler": sched,
        "rng": ckpt.rng,
        "epoch": ckpt.epoch,
        "best_val": _json_number(ckpt.best_val),
        "train_config": ckpt.train_config,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fp:
        fp.write(CKPT_MAGIC)
        fp.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fp.write(blob)
        for n in names:
            write_array(fp, ckpt.params[n])
        for arr in list(ckpt.moments[0]) + list(ckpt.moments[1]):
            write_array(fp, arr)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fp:
        magic = fp.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic {magic!r})")
        raw = fp.read(12)
        if len(raw) != 12:
            raise FormatError(f"{path}: truncated header")
        version, hlen = struct.unpack("<IQ", raw)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        blob = fp.read(hlen)
        if len(blob) != hlen:
            raise FormatError(f"{path}: truncated header")
        header = json.loads(blob.decode("utf-8"))
        names = header["param_names"]
        params = {n: read_array(fp) for n in names}
        m = [read_array(fp) for _ in names]
        v = [read_array(fp) for _ in names]
        if fp.read(1):
            raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    sched = dict(header["scheduler"])
    if sched["best"] is None:
        sched["best"] = math.inf
    best_val = header["best_val"]
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        optimizer=header["optimizer"],
        moments=(m, v),
        scheduler=sched,
        rng=header["rng"],
        epoch=header["epoch"],
        best_val=math.inf if best_val is None else best_val,
        train_config=header.get("train_config", {}),
    )
