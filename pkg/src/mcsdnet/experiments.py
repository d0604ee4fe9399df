"""Desk-scale experiments on synthetic scenes.

``overfit`` checks that the default network can memorise a handful of
sequences.  ``temporal_ablation`` trains the same small network with
different mixing units on scenes full of single-frame flicker distractors
and scores each on a held-out set; only a unit that looks across frames can
tell a flicker from a persistent blob.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

from .architecture import McsdNet, ModelConfig
from .data import ArrayDataset, SyntheticConfig, synth_dataset
from .evaluation import ConfusionCounts, csi
from .training import FocalLossConfig, TrainConfig, evaluate_loss, fit


@dataclass
class OverfitResult:
    train_csi: float
    first_loss: float
    last_loss: float
    epochs: int
    seconds: float
    csi_trace: list[float] = field(default_factory=list)


def overfit(epochs: int = 200, sequences: int = 8, seed: int = 0, on_epoch=None) -> OverfitResult:
    """Train the default model on ``sequences`` synthetic 64x64 windows of six frames."""
    # 8 scenes of 6 frames at 15 min spacing yield exactly one window each
    syn = SyntheticConfig(seed=seed, scenes=sequences, frames_per_scene=6, image_size=(64, 64))
    data = synth_dataset(syn, width=6, interval_minutes=15)
    model = McsdNet(ModelConfig(), seed=seed)
    trace = []

    def record(rec, state):
        trace.append(csi(rec.val_counts) or 0.0)
        if on_epoch is not None:
            on_epoch(rec, state)

    t0 = time.perf_counter()
    log = fit(model, data, None, TrainConfig(epochs=epochs, seed=seed), on_epoch=record)
    return OverfitResult(trace[-1], log.records[0].train_loss, log.records[-1].train_loss, epochs,
                         time.perf_counter() - t0, trace)


@dataclass(frozen=True)
class AblationSetup:
    train_scenes: int = 64
    test_scenes: int = 32
    image_size: int = 32
    epochs: int = 40
    flicker_rate: float = 1.0
    width: int = 6
    data_seed: int = 1
    test_seed: int = 2
    model_seed: int = 0

    def synthetic(self, seed: int, scenes: int) -> SyntheticConfig:
        return SyntheticConfig(seed=seed, scenes=scenes, frames_per_scene=self.width,
                               image_size=(self.image_size, self.image_size), flicker_rate=self.flicker_rate)

    def model_config(self, kind: str) -> ModelConfig:
        rates = (1, 2, 4) if self.image_size >= 64 else (1, 2)
        return ModelConfig(levels=3, channels=(8, 16, 32), stmu_kind=kind, heads=4, seq_len=self.width,
                           image_size=(self.image_size, self.image_size), atrous_rates=rates)


@dataclass
class AblationRow:
    kind: str
    test_csi: float
    train_csi: float
    counts: ConfusionCounts
    seconds: float


def ablation_data(setup: AblationSetup) -> tuple[ArrayDataset, ArrayDataset]:
    train = synth_dataset(setup.synthetic(setup.data_seed, setup.train_scenes), setup.width, 15)
    test = synth_dataset(setup.synthetic(setup.test_seed, setup.test_scenes), setup.width, 15)
    return train, test


def temporal_ablation(kinds=("identity", "dsta"), setup: AblationSetup | None = None,
                      log=None) -> dict[str, AblationRow]:
    """Train one model per STMU kind with identical data, seeds and budget."""
    setup = setup or AblationSetup()
    train, test = ablation_data(setup)
    rows = {}
    for kind in kinds:
        t0 = time.perf_counter()
        model = McsdNet(setup.model_config(kind), seed=setup.model_seed)
        history = fit(model, train, None, TrainConfig(epochs=setup.epochs, seed=setup.model_seed))
        _, counts = evaluate_loss(model, test, 8, FocalLossConfig(), model.config.threshold)
        rows[kind] = AblationRow(kind, csi(counts) or 0.0, csi(history.records[-1].val_counts) or 0.0,
                                 counts, time.perf_counter() - t0)
        if log is not None:
            r = rows[kind]
            log(f"{kind:>9}: test CSI {r.test_csi:.4f}  train CSI {r.train_csi:.4f}  ({r.seconds:.0f} s)")
    return rows
