"""Fault models, fault-site sampling and inject/revert bookkeeping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .fixedpoint import QFormat, perturb_float
from .nn import DenseNetwork, ParamCoord


@dataclass(frozen=True)
class BitFlip:
    fmt: QFormat

    def __str__(self) -> str:
        return f"bitflip:{self.fmt}"


@dataclass(frozen=True)
class Gaussian:
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be a positive finite number, got {self.sigma}")

    def __str__(self) -> str:
        return f"gaussian:{self.sigma!r}"


FaultModel = BitFlip | Gaussian


def parse_fault_model(text: str) -> FaultModel:
    """Parse ``bitflip:Q16.12`` or ``gaussian:0.01``."""
    kind, sep, arg = text.strip().partition(":")
    if not sep:
        raise ValueError(f"expected '<kind>:<arg>', got {text!r}")
    kind = kind.lower()
    if kind == "bitflip":
        return BitFlip(QFormat.parse(arg))
    if kind == "gaussian":
        try:
            sigma = float(arg)
        except ValueError:
            raise ValueError(f"bad gaussian sigma {arg!r}") from None
        return Gaussian(sigma)
    raise ValueError(f"unknown fault model {kind!r} (expected bitflip or gaussian)")


@dataclass(frozen=True)
class FaultEvent:
    coord: ParamCoord
    original: float
    mutated: float
    detail: float  # bit index for BitFlip, additive delta for Gaussian


class LedgerError(RuntimeError):
    """Raised when a revert finds a parameter that no longer holds the injected value."""


def poisson_rate(rate: float, param_count: int, batch_size: int) -> float:
    """Expected fault count: rate is faults per parameter per sample."""
    if rate < 0 or param_count < 0 or batch_size < 0:
        raise ValueError("rate, param_count and batch_size must be non-negative")
    lam = rate * param_count * batch_size
    if not math.isfinite(lam):
        raise ValueError(f"non-finite Poisson intensity {lam}")
    return lam


def sample_fault_count(rate: float, param_count: int, batch_size: int,
                       rng: np.random.Generator) -> int:
    lam = poisson_rate(rate, param_count, batch_size)
    return int(rng.poisson(lam)) if lam > 0 else 0


def sample_fault_site(net: DenseNetwork, rng: np.random.Generator) -> ParamCoord:
    """Uniform over every scalar weight and bias of the network."""
    n = net.parameter_count
    if n == 0:
        raise ValueError("network has no parameters")
    return net.coord_at(int(rng.integers(n)))


def sample_layer_site(net: DenseNetwork, layer_index: int,
                      rng: np.random.Generator) -> ParamCoord:
    """Uniform over the parameters of a single layer."""
    n = net.layers[layer_index].parameter_count
    return net.layer_coord_at(layer_index, int(rng.integers(n)))


def inject(net: DenseNetwork, model: FaultModel, coord: ParamCoord,
           rng: np.random.Generator) -> FaultEvent:
    original = net.get_param(coord)
    if isinstance(model, BitFlip):
        bit = int(rng.integers(model.fmt.width))
        mutated = perturb_float(original, model.fmt, bit)
        detail = float(bit)
    elif isinstance(model, Gaussian):
        detail = float(rng.normal(0.0, model.sigma))
        mutated = original + detail
    else:
        raise TypeError(f"unsupported fault model {model!r}")
    net.set_param(coord, mutated)
    return FaultEvent(coord, original, mutated, detail)


def inject_random(net: DenseNetwork, model: FaultModel, count: int,
                  rng: np.random.Generator) -> list[FaultEvent]:
    return [inject(net, model, sample_fault_site(net, rng), rng) for _ in range(count)]


def revert(net: DenseNetwork, events: list[FaultEvent]) -> None:
    """Undo ``events`` newest first."""
    for ev in reversed(events):
        current = net.get_param(ev.coord)
        if current != ev.mutated:
            raise LedgerError(
                f"{ev.coord} holds {current!r}, expected injected value {ev.mutated!r}"
            )
        net.set_param(ev.coord, ev.original)


class FaultTrace:
    """CSV log of injected faults, one row per event."""

    columns = ("batch", "layer", "kind", "row", "col", "detail", "original", "mutated")

    def __init__(self, path):
        self._file = open(path, "w", newline="")
        self._writer = csv.writer(self._file)
        self._writer.writerow(self.columns)

    def record(self, batch: int, events: list[FaultEvent]) -> None:
        for ev in events:
            c = ev.coord
            self._writer.writerow([batch, c.layer, c.kind, c.row, c.col,
                                   repr(ev.detail), repr(ev.original), repr(ev.mutated)])

    def close(self) -> None:
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
