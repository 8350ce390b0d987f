"""Regular training and fault injection training (FIT)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import batch_indices
from .fault import FaultEvent, FaultModel, Gaussian, inject, revert, sample_layer_site
from .nn import Adam, DenseNetwork, train_step

REGIMES = ("golden", "baseline", "fit")


@dataclass
class TrainConfig:
    epochs_total: int
    warmup_epochs: int = 1
    batch_size: int = 100
    train_fault_model: FaultModel = field(default_factory=lambda: Gaussian(0.01))
    seed: int = 0
    regime: str = "fit"
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if not 0 <= self.warmup_epochs <= self.epochs_total:
            raise ValueError(
                f"need 0 <= warmup_epochs ({self.warmup_epochs}) <= epochs_total ({self.epochs_total})"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int  # 1-based
    phase: str  # warmup | fit | regular
    mean_loss: float


@dataclass(frozen=True)
class FitBatchInfo:
    """Passed to the FIT observer after each batch has been reset."""

    batch: int
    layer: int
    event: FaultEvent
    before: DenseNetwork | None  # snapshot taken before the fault, if requested


def _check_data(X: np.ndarray, Y: np.ndarray) -> None:
    if len(X) == 0:
        raise ValueError("training set is empty")
    if len(X) != len(Y):
        raise ValueError(f"{len(X)} inputs but {len(Y)} targets")


def regular_epoch(net: DenseNetwork, X: np.ndarray, Y: np.ndarray, optimizer: Adam,
                  rng: np.random.Generator, batch_size: int = 100) -> float:
    """One shuffled pass of plain training; returns the sample-weighted mean batch loss."""
    _check_data(X, Y)
    total = 0.0
    for idx in batch_indices(len(X), batch_size, rng):
        total += train_step(net, X[idx], Y[idx], optimizer) * len(idx)
    return total / len(X)


def fault_training_epoch(net: DenseNetwork, X: np.ndarray, Y: np.ndarray, optimizer: Adam,
                         model: FaultModel, rng: np.random.Generator,
                         batch_size: int = 100, *,
                         fault_rng: np.random.Generator | None = None,
                         observer: Callable[[FitBatchInfo], None] | None = None,
                         snapshot: bool = False) -> float:
    """One FIT epoch.

    Per batch: pick a layer uniformly, disturb one of its parameters and freeze
    it, train the rest of the network on the batch, then revert the fault and
    unfreeze. ``rng`` drives shuffling; ``fault_rng`` (default ``rng``) drives
    the fault draws.
    """
    _check_data(X, Y)
    fault_rng = fault_rng if fault_rng is not None else rng
    total = 0.0
    for b, idx in enumerate(batch_indices(len(X), batch_size, rng)):
        k = int(fault_rng.integers(len(net.layers)))
        before = net.copy() if snapshot else None
        layer = net.layers[k]
        event = inject(net, model, sample_layer_site(net, k, fault_rng), fault_rng)
        layer.frozen = True
        try:
            total += train_step(net, X[idx], Y[idx], optimizer) * len(idx)
        finally:
            revert(net, [event])
            layer.frozen = False
        if observer is not None:
            observer(FitBatchInfo(b, k, event, before))
    return total / len(X)


@dataclass
class TrainResult:
    net: DenseNetwork
    history: list[EpochRecord]
    optimizer: Adam


def train(net: DenseNetwork, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig, *,
          optimizer: Adam | None = None,
          on_epoch_end: Callable[[int, DenseNetwork, list[EpochRecord]], None] | None = None,
          ) -> TrainResult:
    """Warm-up epochs then FIT epochs (regime ``fit``), or only regular epochs.

    Shuffling and FIT fault draws use separate streams derived from
    ``cfg.seed``, so every regime sees the same batch order.
    """
    optimizer = optimizer if optimizer is not None else Adam(cfg.learning_rate)
    shuffle_ss, fault_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    fault_rng = np.random.default_rng(fault_ss)
    history = []
    for epoch in range(1, cfg.epochs_total + 1):
        if cfg.regime != "fit":
            phase = "regular"
        elif epoch <= cfg.warmup_epochs:
            phase = "warmup"
        else:
            phase = "fit"
        if phase == "fit":
            loss = fault_training_epoch(net, X, Y, optimizer, cfg.train_fault_model,
                                        shuffle_rng, cfg.batch_size, fault_rng=fault_rng)
        else:
            loss = regular_epoch(net, X, Y, optimizer, shuffle_rng, cfg.batch_size)
        history.append(EpochRecord(epoch, phase, loss))
        if on_epoch_end is not None:
            on_epoch_end(epoch, net, history)
    return TrainResult(net, history, optimizer)


def write_history_csv(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "phase", "mean_loss"])
        for r in history:
            w.writerow([r.epoch, r.phase, repr(r.mean_loss)])
