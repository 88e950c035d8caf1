"""Experiment runner: config files, full pipeline, metrics CSV, cost tables."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as fdata
from .cost import PRESETS, CostModel, format_cost_table
from .errors import ConfigError
from .federation import (
    NON_FED,
    STRATEGIES,
    STRATEGY_LABELS,
    FederationConfig,
    RoundMetrics,
    _seed_int,
    evaluate,
    init_federation,
    round_cost_model,
    run_round,
    strategy_id,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ["round", "strategy", "accuracy", "bytes_symbolic", "bytes_measured", "wall_ms"]


@dataclass
class ExperimentConfig:
    strategy: str = "all"
    n_clients: int = 10
    rounds: int = 16
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-4
    d: int = 16
    hidden: str = "64,32"
    m: float = 0.2
    s: float = 20.0
    alpha: float = 0.5
    seed: int = 0
    # "synthetic" or a path to a CSV file
    dataset: str = "synthetic"
    n_classes: int = 10
    per_class: int = 100
    d_in: int = 8
    spread: float = 0.25
    test_fraction: float = 0.3
    knn_k: int | None = None
    knn_metric: str = "cosine"
    average_head: bool = True
    workers: int = 1
    # cost-table overrides; unset values come from the experiment itself
    w_bytes: int | None = None
    cost_d: int | None = None
    cost_n_clients: int | None = None
    cost_n_classes: int | None = None
    cost_n_samples: int | None = None

    def __post_init__(self):
        self.strategies()
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction: must lie in (0, 1), got {self.test_fraction}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha: must be positive, got {self.alpha}")
        if self.knn_metric not in ("cosine", "euclidean"):
            raise ConfigError(f"knn_metric: expected cosine or euclidean, got {self.knn_metric!r}")
        if self.knn_k is not None and self.knn_k < 1:
            raise ConfigError(f"knn_k: must be >= 1, got {self.knn_k}")
        self.hidden_sizes()
        self.federation()

    def strategies(self) -> list[int]:
        value = str(self.strategy).strip().lower()
        if value == "all":
            return [*STRATEGIES, NON_FED]
        try:
            return [strategy_id(value)]
        except ConfigError as exc:
            raise ConfigError(f"strategy: {exc}") from None

    def hidden_sizes(self) -> tuple[int, ...]:
        text = str(self.hidden).strip()
        if not text:
            return ()
        try:
            sizes = tuple(int(p) for p in text.split(","))
        except ValueError:
            raise ConfigError(f"hidden: expected comma-separated integers, got {self.hidden!r}") from None
        if any(n <= 0 for n in sizes):
            raise ConfigError(f"hidden: layer sizes must be positive, got {self.hidden!r}")
        return sizes

    def federation(self) -> FederationConfig:
        try:
            return FederationConfig(
                n_clients=self.n_clients, rounds=self.rounds, local_epochs=self.local_epochs,
                batch_size=self.batch_size, lr=self.lr, d=self.d, hidden=self.hidden_sizes(),
                m=self.m, s=self.s, alpha=self.alpha, seed=self.seed, knn_k=self.knn_k,
                knn_metric=self.knn_metric, average_head=self.average_head, workers=self.workers,
            )
        except ConfigError as exc:
            raise ConfigError(f"invalid federation settings: {exc}") from None


CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    kind = str(CONFIG_FIELDS[name].type)
    text = raw.strip()
    optional = "None" in kind
    if optional and text.lower() in ("", "none", "auto"):
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind.startswith("bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return text


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {line_no}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"config line {line_no}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text))
    for key, raw in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in CONFIG_FIELDS:
        value = getattr(cfg, name)
        lines.append(f"{name} = {'auto' if value is None else value}")
    return "\n".join(lines) + "\n"


def load_dataset(cfg: ExperimentConfig) -> fdata.Dataset:
    if cfg.dataset == "synthetic":
        return fdata.synth_generate(cfg.n_classes, cfg.per_class, cfg.d_in, cfg.spread, cfg.seed)
    return fdata.load_csv(cfg.dataset)


def prepare_data(cfg: ExperimentConfig):
    """Split and partition once; every strategy of a run shares the result."""
    dataset = load_dataset(cfg)
    train, val = fdata.split(dataset, cfg.test_fraction, _seed_int(cfg.seed, 101))
    partition = fdata.dirichlet_partition(train, cfg.n_clients, cfg.alpha, _seed_int(cfg.seed, 102))
    return train, val, partition


def run_strategy(strategy, cfg: ExperimentConfig, train, val, partition) -> list[RoundMetrics]:
    fed = cfg.federation()
    strategy = strategy_id(strategy)
    server, clients = init_federation(strategy, fed, train, partition.shards)
    out = [RoundMetrics(0, STRATEGY_LABELS[strategy], evaluate(strategy, server, clients, val, fed), 0, 0, 0.0)]
    for r in range(1, fed.rounds + 1):
        server, clients, metrics = run_round(server, clients, strategy, fed, train, val, final_round=r == fed.rounds)
        log.info("strategy %s round %d accuracy %.4f", metrics.strategy, r, metrics.accuracy)
        out.append(metrics)
    return out


def run_experiment(cfg: ExperimentConfig) -> list[RoundMetrics]:
    """Data, split, shards, then ``rounds`` rounds of every requested strategy.

    Round 0 is the evaluation before any training.
    """
    train, val, partition = prepare_data(cfg)
    metrics: list[RoundMetrics] = []
    for strategy in cfg.strategies():
        metrics.extend(run_strategy(strategy, cfg, train, val, partition))
    return metrics


def write_metrics(metrics, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for m in metrics:
                writer.writerow([m.round, m.strategy, repr(float(m.accuracy)), m.bytes_symbolic,
                                 m.bytes_measured, f"{m.wall_ms:.3f}"])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write metrics: {exc.strerror}", str(path)) from None


def read_metrics(path) -> list[RoundMetrics]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ConfigError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            RoundMetrics(int(r["round"]), r["strategy"], float(r["accuracy"]), int(r["bytes_symbolic"]),
                         int(r["bytes_measured"]), float(r["wall_ms"]))
            for r in reader
        ]


def experiment_cost_model(cfg: ExperimentConfig, strategy: int = 1) -> CostModel:
    """Cost model of the experiment, with any ``cost_*``/``w_bytes`` overrides applied."""
    needs_run = None in (cfg.w_bytes, cfg.cost_d, cfg.cost_n_clients, cfg.cost_n_classes, cfg.cost_n_samples)
    base = None
    if needs_run:
        train, _, partition = prepare_data(cfg)
        fed = cfg.federation()
        _, clients = init_federation(strategy, fed, train, partition.shards)
        base = round_cost_model(strategy, fed, clients, train)

    def pick(override, attr):
        return int(override) if override is not None else getattr(base, attr)

    return CostModel(
        w_bytes=pick(cfg.w_bytes, "w_bytes"),
        d=pick(cfg.cost_d, "d"),
        n_clients=pick(cfg.cost_n_clients, "n_clients"),
        n_classes=pick(cfg.cost_n_classes, "n_classes"),
        n_samples=pick(cfg.cost_n_samples, "n_samples"),
    )


def cost_table(cfg) -> str:
    """Formatted per-strategy byte table for a preset name, CostModel or ExperimentConfig."""
    if isinstance(cfg, str):
        key = cfg.lower()
        if key not in PRESETS:
            raise ConfigError(f"unknown preset {cfg!r}; expected one of {sorted(PRESETS)}")
        return format_cost_table(PRESETS[key], title=f"preset {key}")
    if isinstance(cfg, ExperimentConfig):
        cfg = experiment_cost_model(cfg)
    if not isinstance(cfg, CostModel):
        raise ConfigError(f"cannot build a cost table from {type(cfg).__name__}")
    return format_cost_table(cfg)


def summarize(metrics) -> str:
    by_strategy: dict[str, list[RoundMetrics]] = {}
    for m in metrics:
        by_strategy.setdefault(m.strategy, []).append(m)
    lines = [f"{'strategy':>8} {'rounds':>6} {'first':>7} {'final':>7} {'bytes/round':>14}"]
    for label, rows in by_strategy.items():
        trained = [r for r in rows if r.round > 0]
        first = trained[0].accuracy if trained else float("nan")
        per_round = int(np.mean([r.bytes_measured for r in trained])) if trained else 0
        lines.append(f"{label:>8} {len(trained):>6} {first:>7.4f} {rows[-1].accuracy:>7.4f} {per_round:>14,}")
    return "\n".join(lines)
