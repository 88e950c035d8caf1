"""Bytes sent per communication round, per strategy.

``w_bytes`` is the serialised model size in bytes; every other quantity is a
count of float32 scalars and is converted at 4 bytes each.
"""

from __future__ import annotations

import numbers
from dataclasses import dataclass

from .errors import ConfigError

BYTES_PER_SCALAR = 4
STRATEGIES = (1, 2, 3, 4, 5, 6)

FORMULAS = {
    1: "A = 2 * w * n_clients",
    2: "B = 2 * d * n_classes * n_clients * 4",
    3: "B",
    4: "A + B",
    5: "A + n_samples * (2 + d * n_clients^2) * 4",
    6: "A + n_clients * B",
}


@dataclass(frozen=True)
class CostModel:
    w_bytes: int
    d: int
    n_clients: int
    n_classes: int
    n_samples: int
    bytes_per_scalar: int = BYTES_PER_SCALAR

    def __post_init__(self):
        for name in ("w_bytes", "d", "n_clients", "n_classes", "n_samples"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.bytes_per_scalar != BYTES_PER_SCALAR:
            raise ConfigError("bytes_per_scalar is fixed at 4 (float32 wire format)")


PRESETS = {
    "ucm": CostModel(w_bytes=44_993_804, d=128, n_clients=10, n_classes=21, n_samples=1470),
    "aid": CostModel(w_bytes=44_993_804, d=128, n_clients=20, n_classes=30, n_samples=7000),
}


def weights_cost(model: CostModel) -> int:
    return 2 * model.w_bytes * model.n_clients


def features_cost(model: CostModel) -> int:
    return 2 * model.d * model.n_classes * model.n_clients * model.bytes_per_scalar


def round_cost(strategy: int, model: CostModel) -> int:
    a = weights_cost(model)
    b = features_cost(model)
    if strategy == 1:
        return a
    if strategy in (2, 3):
        return b
    if strategy == 4:
        return a + b
    if strategy == 5:
        return a + model.n_samples * (2 + model.d * model.n_clients**2) * model.bytes_per_scalar
    if strategy == 6:
        return a + model.n_clients * b
    raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


def cost_rows(model: CostModel) -> list[tuple[int, str, int]]:
    return [(s, FORMULAS[s], round_cost(s, model)) for s in STRATEGIES]


def format_cost_table(model: CostModel, title: str | None = None) -> str:
    rows = cost_rows(model)
    formula_w = max(len(f) for _, f, _ in rows)
    lines = []
    if title:
        lines.append(title)
    lines.append(
        f"w_bytes={model.w_bytes:,} d={model.d} n_clients={model.n_clients} "
        f"n_classes={model.n_classes} n_samples={model.n_samples}"
    )
    lines.append(f"{'strategy':>8}  {'formula':<{formula_w}}  {'bytes':>15}")
    for s, formula, value in rows:
        lines.append(f"{s:>8}  {formula:<{formula_w}}  {value:>15,}")
    return "\n".join(lines)
