"""Golden / baseline / FIT experiment grids and their CSV outputs."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .data import TEST_IMAGES, TRAIN_IMAGES, ImageDataset, batch_indices, find_images, load_idx
from .fault import FaultModel, FaultTrace, inject_random, parse_fault_model, revert, sample_fault_count
from .nn import DenseNetwork, forward, load_checkpoint, mse_loss, save_checkpoint
from .training import TrainConfig, TrainResult, train, write_history_csv

log = logging.getLogger(__name__)

# spawn keys under each run seed; 0 and 1 are taken by training (shuffle, FIT faults)
_INIT_STREAM = 2
_TEST_STREAM = 3


class ExperimentConfig(BaseModel):
    """Everything that determines the numbers a run produces."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    regimes: list[Literal["golden", "baseline", "fit"]] = Field(
        default_factory=lambda: ["golden", "baseline", "fit"], min_length=1)
    # encoder widths between input and center; the decoder mirrors them
    hidden: list[int] = Field(default_factory=lambda: [256])
    features: list[int] = Field(default_factory=lambda: [48], min_length=1)
    epochs_total: int = Field(30, ge=0)
    warmup_epochs: int = Field(1, ge=0)
    eval_epochs: list[int] = Field(default_factory=list)
    batch_size: int = Field(100, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    train_fault_model: str = "gaussian:0.01"
    test_fault_model: str = "bitflip:Q16.12"
    test_fault_rates: list[float] = Field(
        default_factory=lambda: [0.0, 1e-7, 3e-7, 5e-7, 1e-6], min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5], min_length=1)
    center_bits: int = Field(32, ge=1)
    train_images: str | None = None
    test_images: str | None = None
    limit_train: int | None = Field(10000, ge=1)
    limit_test: int | None = Field(2000, ge=1)

    @field_validator("hidden", "features")
    @classmethod
    def _positive_widths(cls, v: list[int]) -> list[int]:
        if any(w < 1 for w in v):
            raise ValueError("layer widths must be positive")
        return v

    @field_validator("test_fault_rates")
    @classmethod
    def _rates(cls, v: list[float]) -> list[float]:
        if any(not math.isfinite(r) or r < 0 for r in v):
            raise ValueError("fault rates must be finite and non-negative")
        return v

    @field_validator("train_fault_model", "test_fault_model")
    @classmethod
    def _fault_model(cls, v: str) -> str:
        return str(parse_fault_model(v))

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v: list[int]) -> list[int]:
        if any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    @model_validator(mode="after")
    def _epochs(self) -> ExperimentConfig:
        if self.warmup_epochs > self.epochs_total:
            raise ValueError("warmup_epochs must not exceed epochs_total")
        if any(not 1 <= e <= self.epochs_total for e in self.eval_epochs):
            raise ValueError("eval_epochs must lie in [1, epochs_total]")
        return self

    def architecture(self, features: int) -> list[int]:
        return [784, *self.hidden, features, *reversed(self.hidden), 784]

    def evaluation_points(self) -> list[int]:
        return sorted(set(self.eval_epochs) | {self.epochs_total})

    def train_config(self, regime: str, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs_total=self.epochs_total,
            warmup_epochs=self.warmup_epochs,
            batch_size=self.batch_size,
            train_fault_model=parse_fault_model(self.train_fault_model),
            seed=seed,
            regime=regime,
            learning_rate=self.learning_rate,
        )


@dataclass
class RunResult:
    regime: str
    seed: int
    features: int
    epochs: int
    fault_rate: float
    mean_test_loss: float
    compression_ratio: float
    loss_history: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class SummaryRow:
    regime: str
    features: int
    epochs: int
    fault_rate: float
    mean: float
    stderr: float
    n_seeds: int


class ExperimentError(RuntimeError):
    pass


def compression_ratio(features: int, center_bits: int = 32, input_bits_per_px: int = 8,
                      pixels: int = 28 * 28) -> float:
    """Bits kept at the center layer over bits of the input image."""
    if features < 0 or center_bits < 1 or input_bits_per_px < 1 or pixels < 1:
        raise ValueError("widths and bit counts must be positive")
    return features * center_bits / (pixels * input_bits_per_px)


def _mean_loss(net: DenseNetwork, X: np.ndarray, batch_size: int, rate: float,
               model: FaultModel | None, rng: np.random.Generator | None,
               trace: FaultTrace | None = None) -> float:
    total = 0.0
    P = net.parameter_count
    for b, idx in enumerate(batch_indices(len(X), batch_size)):
        x = X[idx]
        events = []
        if model is not None:
            events = inject_random(net, model, sample_fault_count(rate, P, len(idx), rng), rng)
        try:
            total += mse_loss(forward(net, x)[0], x) * len(idx)
        finally:
            revert(net, events)
        if trace is not None:
            trace.record(b, events)
    return total / len(X)


def evaluate_clean(net: DenseNetwork, X: np.ndarray, batch_size: int = 100) -> float:
    """Mean reconstruction MSE over the test images, fault-free."""
    return _mean_loss(net, X, batch_size, 0.0, None, None)


def evaluate_faulty(net: DenseNetwork, X: np.ndarray, rate: float, model: FaultModel,
                    rng: np.random.Generator, batch_size: int = 100,
                    trace: FaultTrace | None = None) -> float:
    """Mean MSE with a fresh Poisson number of faults injected for each batch.

    Faults land uniformly over all parameters and are reverted after the batch.
    """
    if rate < 0:
        raise ValueError(f"fault rate must be non-negative, got {rate}")
    return _mean_loss(net, X, batch_size, rate, model, rng, trace)


def eval_fault_rng(seed: int, epoch: int, rate_index: int) -> np.random.Generator:
    # shared by all regimes: paired comparisons see the same fault draws
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(_TEST_STREAM, epoch, rate_index)))


def build_network(cfg: ExperimentConfig, features: int, seed: int) -> DenseNetwork:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_INIT_STREAM,)))
    return DenseNetwork.build(cfg.architecture(features), rng)


def evaluate_network(net: DenseNetwork, X_test: np.ndarray, cfg: ExperimentConfig,
                     regime: str, seed: int, features: int, epoch: int,
                     history: list[float] | None = None,
                     trace_dir: Path | None = None) -> list[RunResult]:
    """One RunResult per configured fault rate. Golden runs are tested fault-free."""
    model = parse_fault_model(cfg.test_fault_model)
    ratio = compression_ratio(features, cfg.center_bits)
    clean = evaluate_clean(net, X_test, cfg.batch_size) if regime == "golden" else None
    out = []
    for i, rate in enumerate(cfg.test_fault_rates):
        if clean is not None:
            loss = clean
        else:
            trace = None
            if trace_dir is not None:
                trace = FaultTrace(trace_dir / f"faults_{regime}_f{features}_s{seed}_e{epoch}_r{i}.csv")
            try:
                loss = evaluate_faulty(net, X_test, rate, model, eval_fault_rng(seed, epoch, i),
                                       cfg.batch_size, trace)
            finally:
                if trace is not None:
                    trace.close()
        out.append(RunResult(regime, seed, features, epoch, rate, loss, ratio,
                             list(history or [])))
    return out


def load_data(cfg: ExperimentConfig, data_dir=None) -> tuple[np.ndarray, np.ndarray]:
    train_path = cfg.train_images or find_images(TRAIN_IMAGES, data_dir)
    test_path = cfg.test_images or find_images(TEST_IMAGES, data_dir)
    train_ds: ImageDataset = load_idx(train_path).limit(cfg.limit_train)
    test_ds: ImageDataset = load_idx(test_path).limit(cfg.limit_test)
    return train_ds.images, test_ds.images


def _cell_name(regime: str, features: int, seed: int) -> str:
    return f"{regime}_f{features}_s{seed}"


def run_cell(cfg: ExperimentConfig, regime: str, features: int, seed: int,
             X_train: np.ndarray, X_test: np.ndarray | None = None,
             out_dir: Path | None = None, trace: bool = False,
             ) -> tuple[list[RunResult], TrainResult]:
    """Train one network, evaluating it at every evaluation epoch and fault rate.

    With ``X_test=None`` the network is trained but not evaluated.
    """
    net = build_network(cfg, features, seed)
    points = set(cfg.evaluation_points())
    trace_dir = out_dir if trace else None
    results: list[RunResult] = []

    def on_epoch_end(epoch, trained, history):
        if X_test is not None and epoch in points:
            results.extend(evaluate_network(
                trained, X_test, cfg, regime, seed, features, epoch,
                [r.mean_loss for r in history], trace_dir))

    if X_test is not None and cfg.epochs_total == 0:
        results.extend(evaluate_network(net, X_test, cfg, regime, seed, features, 0, [],
                                        trace_dir))
    outcome = train(net, X_train, X_train, cfg.train_config(regime, seed),
                    on_epoch_end=on_epoch_end)
    if out_dir is not None:
        name = f"{regime}_f{features}_s{seed}"
        save_checkpoint(outcome.net, out_dir / f"{name}.npz",
                        extra={"regime": regime, "seed": seed, "features": features,
                               "epochs": cfg.epochs_total})
        write_history_csv(out_dir / f"history_{name}.csv", outcome.history)
    return results, outcome


_worker_data: dict = {}


def _worker_init(cfg_json: str, data_dir, need_test: bool) -> None:
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    X_train, X_test = load_data(cfg, data_dir)
    _worker_data.update(cfg=cfg, X_train=X_train, X_test=X_test if need_test else None)


def _worker_cell(regime, features, seed, out_dir, trace):
    d = _worker_data
    return run_cell(d["cfg"], regime, features, seed, d["X_train"], d["X_test"],
                    out_dir, trace)[0]


def grid(cfg: ExperimentConfig) -> list[tuple[str, int, int]]:
    return [(r, f, s) for r in cfg.regimes for f in cfg.features for s in cfg.seeds]


def run_experiment(cfg: ExperimentConfig, *, X_train: np.ndarray | None = None,
                   X_test: np.ndarray | None = None, data_dir=None,
                   out_dir: Path | None = None, jobs: int = 1, trace: bool = False,
                   evaluate: bool = True) -> list[RunResult]:
    """Run every (regime, features, seed) cell of the grid.

    Cells are independent, so ``jobs > 1`` spreads them over worker processes;
    results come back in grid order either way.
    """
    cells = grid(cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    if jobs > 1 and len(cells) > 1:
        if X_train is not None or X_test is not None:
            raise ValueError("in-memory data cannot be combined with jobs > 1")
        with ProcessPoolExecutor(jobs, initializer=_worker_init,
                                 initargs=(cfg.model_dump_json(), data_dir, evaluate)) as pool:
            futures = [pool.submit(_worker_cell, *c, out_dir, trace) for c in cells]
            results = []
            for c, fut in zip(cells, futures):
                try:
                    results.extend(fut.result())
                except Exception as exc:
                    raise ExperimentError(_describe(c, exc)) from exc
        return results

    if X_train is None or (evaluate and X_test is None):
        loaded_train, loaded_test = load_data(cfg, data_dir)
        X_train = loaded_train if X_train is None else X_train
        X_test = loaded_test if X_test is None else X_test
    results = []
    for c in cells:
        log.info("run regime=%s features=%d seed=%d", *c)
        try:
            results.extend(run_cell(cfg, *c, X_train, X_test if evaluate else None,
                                    out_dir, trace)[0])
        except Exception as exc:
            raise ExperimentError(_describe(c, exc)) from exc
    return results


def _describe(cell, exc) -> str:
    regime, features, seed = cell
    return f"run failed (regime={regime}, features={features}, seed={seed}): {exc}"


def evaluate_checkpoint(path, cfg: ExperimentConfig, X_test: np.ndarray,
                        trace_dir: Path | None = None) -> list[RunResult]:
    """Evaluate a saved network with the same fault streams a sweep would use."""
    net, meta = load_checkpoint(path, with_meta=True)
    extra = meta.get("extra", {})
    regime = extra.get("regime", "baseline")
    seed = int(extra.get("seed", cfg.seeds[0]))
    features = int(extra.get("features", min(net.widths)))
    epoch = int(extra.get("epochs", cfg.epochs_total))
    return evaluate_network(net, X_test, cfg, regime, seed, features, epoch, None, trace_dir)


def summarize(results: list[RunResult]) -> list[SummaryRow]:
    """Mean and standard error over seeds for each (regime, features, epochs, rate)."""
    groups: dict[tuple, list[float]] = {}
    for r in results:
        groups.setdefault((r.regime, r.features, r.epochs, r.fault_rate), []).append(
            r.mean_test_loss)
    rows = []
    for (regime, features, epochs, rate), losses in groups.items():
        a = np.asarray(losses)
        stderr = float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else float("nan")
        rows.append(SummaryRow(regime, features, epochs, rate, float(a.mean()), stderr, len(a)))
    return rows


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, R^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


RESULT_COLUMNS = ("regime", "seed", "features", "epochs", "fault_rate", "mean_test_loss",
                  "compression_ratio")
SUMMARY_COLUMNS = ("regime", "features", "epochs", "fault_rate", "mean", "stderr", "n_seeds")


def write_results_csv(path, results: list[RunResult]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow([r.regime, r.seed, r.features, r.epochs, repr(r.fault_rate),
                        repr(r.mean_test_loss), repr(r.compression_ratio)])


def read_results_csv(path) -> list[RunResult]:
    with open(path, newline="") as f:
        return [
            RunResult(row["regime"], int(row["seed"]), int(row["features"]), int(row["epochs"]),
                      float(row["fault_rate"]), float(row["mean_test_loss"]),
                      float(row["compression_ratio"]))
            for row in csv.DictReader(f)
        ]


def write_summary_csv(path, rows: list[SummaryRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r.regime, r.features, r.epochs, repr(r.fault_rate), repr(r.mean),
                        repr(r.stderr), r.n_seeds])


def write_plots(rows: list[SummaryRow], out_dir) -> list[Path]:
    """SVG line plots: loss vs fault rate, and loss vs epochs when several epochs exist."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []
    final_epoch = max(r.epochs for r in rows)
    series: dict[tuple, list[SummaryRow]] = {}
    for r in rows:
        if r.epochs == final_epoch:
            series.setdefault((r.regime, r.features), []).append(r)
    fig, ax = plt.subplots(figsize=(6, 4))
    for (regime, features), pts in sorted(series.items()):
        pts.sort(key=lambda r: r.fault_rate)
        ax.errorbar([p.fault_rate for p in pts], [p.mean for p in pts],
                    yerr=[0 if math.isnan(p.stderr) else p.stderr for p in pts],
                    marker="o", capsize=3, label=f"{regime} ({features} features)")
    ax.set_xlabel("fault rate (faults per parameter per sample)")
    ax.set_ylabel("mean test loss (MSE)")
    ax.set_title(f"Test loss vs fault rate, {final_epoch} epochs")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "loss_vs_rate.svg"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    epochs = sorted({r.epochs for r in rows})
    if len(epochs) > 1:
        by_rate: dict[tuple, list[SummaryRow]] = {}
        for r in rows:
            by_rate.setdefault((r.regime, r.features, r.fault_rate), []).append(r)
        fig, ax = plt.subplots(figsize=(6, 4))
        for (regime, features, rate), pts in sorted(by_rate.items()):
            pts.sort(key=lambda r: r.epochs)
            ax.plot([p.epochs for p in pts], [p.mean for p in pts], marker="o",
                    label=f"{regime}, rate {rate:g}")
        ax.set_xlabel("training epochs")
        ax.set_ylabel("mean test loss (MSE)")
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = out_dir / "loss_vs_epochs.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
