"""Horizon-wise RMSE/MAPE scoring, configuration comparison, and the
virtual-node-count sweep. Long-term averages cover horizons 15-20
(75-100 minutes at 5-minute sampling), clipped to the configured
horizon count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import make_windows
from .errors import DataError, NumericError, ShapeError
from .graph import (
    AdjacencyMatrix,
    build_all_ones_adjacency,
    build_distance_adjacency,
)
from .model import StgcnConfig, predict
from .training import TrainConfig, train

LONG_HORIZON_START = 15  # 1-indexed, inclusive
LONG_HORIZON_END = 20


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"rmse: shape {pred.shape} vs shape {target.shape}")
    diff = pred - target
    return float(np.sqrt(np.mean(diff * diff)))


def mape(pred: np.ndarray, target: np.ndarray, mask_epsilon: float = 1e-3):
    """Mean |y - yhat| / |y| over entries with |y| > mask_epsilon.

    Returns (value, masked_count). Raises when every entry is masked.
    """
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mape: shape {pred.shape} vs shape {target.shape}")
    keep = np.abs(target) > mask_epsilon
    masked = int(target.size - keep.sum())
    if masked == target.size:
        raise NumericError("mape undefined: every target entry is masked")
    value = float(np.mean(np.abs(pred[keep] - target[keep]) / np.abs(target[keep])))
    return value, masked


@dataclass
class MetricsReport:
    """Per-horizon scores for one (kind, n_virtual, seed) configuration."""

    kind: str
    n_virtual: int
    seed: int
    rmse_per_horizon: list = field(default_factory=list)
    mape_per_horizon: list = field(default_factory=list)
    masked_per_horizon: list = field(default_factory=list)
    avg_rmse: float = 0.0
    avg_mape: float = 0.0
    longterm_rmse: float = 0.0
    longterm_mape: float = 0.0

    @property
    def num_horizons(self) -> int:
        return len(self.rmse_per_horizon)

    def longterm_range(self) -> tuple:
        lo = min(LONG_HORIZON_START, self.num_horizons)
        hi = min(LONG_HORIZON_END, self.num_horizons)
        return lo, hi


def score_predictions(pred: np.ndarray, target: np.ndarray, kind: str,
                      n_virtual: int, seed: int, mask_epsilon: float = 1e-3) -> MetricsReport:
    """Build a MetricsReport from de-normalized (B, |V|, T_out) arrays."""
    if pred.shape != target.shape:
        raise ShapeError(f"score_predictions: shape {pred.shape} vs shape {target.shape}")
    report = MetricsReport(kind, n_virtual, seed)
    for h in range(pred.shape[2]):
        report.rmse_per_horizon.append(rmse(pred[:, :, h], target[:, :, h]))
        v, masked = mape(pred[:, :, h], target[:, :, h], mask_epsilon)
        report.mape_per_horizon.append(v)
        report.masked_per_horizon.append(masked)
    report.avg_rmse = float(np.mean(report.rmse_per_horizon))
    report.avg_mape = float(np.mean(report.mape_per_horizon))
    lo, hi = report.longterm_range()
    report.longterm_rmse = float(np.mean(report.rmse_per_horizon[lo - 1 : hi]))
    report.longterm_mape = float(np.mean(report.mape_per_horizon[lo - 1 : hi]))
    return report


def evaluate(params, config: StgcnConfig, adjacency: AdjacencyMatrix, test_set,
             seed: int = 0, mask_epsilon: float = 1e-3, batch_size: int = 64,
             embedding_dim: int = 0, adaptive_threshold: float = 0.1) -> MetricsReport:
    """Score a trained model on a test split in original flow units."""
    pred = predict(params, config, adjacency, test_set, batch_size=batch_size,
                   embedding_dim=embedding_dim, adaptive_threshold=adaptive_threshold)
    target = test_set.denormalize(test_set.targets)
    return score_predictions(pred, target, adjacency.kind, adjacency.n_virtual,
                             seed, mask_epsilon)


def adjacency_for_kind(kind: str, graph, n_virtual: int,
                       distance_threshold: float = 0.1,
                       adaptive_threshold: float = 0.1,
                       embedding_dim: int = 8) -> AdjacencyMatrix:
    """Static adjacency skeleton for a configuration; for adaptive kinds
    the live weights come from the trained embeddings at forward time."""
    dist = build_distance_adjacency(graph, distance_threshold)
    if kind == "distance":
        if n_virtual != 0:
            raise DataError("distance configuration requires n_virtual = 0")
        return dist
    if kind == "all_ones":
        if n_virtual != 1:
            raise DataError("all-ones configuration requires n_virtual = 1")
        return build_all_ones_adjacency(dist)
    n = dist.n_real + n_virtual
    if n_virtual < 1:
        raise DataError(f"{kind} configuration requires n_virtual >= 1")
    if kind == "adaptive":
        return AdjacencyMatrix(
            np.zeros((n, n)), dist.n_real, n_virtual, "adaptive",
            learnable_mask=np.ones((n, n), dtype=bool),
            meta={"adaptive_threshold": adaptive_threshold, "embedding_dim": embedding_dim},
        )
    if kind == "semi_adaptive":
        w = np.zeros((n, n))
        w[: dist.n_real, : dist.n_real] = dist.weights
        mask = np.ones((n, n), dtype=bool)
        mask[: dist.n_real, : dist.n_real] = False
        return AdjacencyMatrix(
            w, dist.n_real, n_virtual, "semi_adaptive", learnable_mask=mask,
            meta={**dist.meta, "adaptive_threshold": adaptive_threshold,
                  "embedding_dim": embedding_dim},
        )
    raise DataError(f"unknown adjacency kind {kind!r}")


def run_experiment(kind: str, n_virtual: int, seed: int, graph, series,
                   stgcn_config: StgcnConfig, train_config: TrainConfig,
                   distance_threshold: float = 0.1, adaptive_threshold: float = 0.1,
                   embedding_dim: int = 8, split_ratios=(0.6, 0.2, 0.2),
                   checkpoint_path=None, log_fn=None):
    """Train one configuration end to end and score it on the test split.

    Returns (params, train_log, report, adjacency).
    """
    adjacency = adjacency_for_kind(kind, graph, n_virtual, distance_threshold,
                                   adaptive_threshold, embedding_dim)
    emb_dim = embedding_dim if kind in ("adaptive", "semi_adaptive") else 0
    train_set, val_set, test_set = make_windows(
        series, stgcn_config.input_window, stgcn_config.output_horizons,
        n_virtual, split_ratios)
    cfg = TrainConfig(**{**train_config.__dict__, "seed": seed})
    params, log = train(stgcn_config, adjacency, train_set, val_set, cfg,
                        embedding_dim=emb_dim, adaptive_threshold=adaptive_threshold,
                        checkpoint_path=checkpoint_path, log_fn=log_fn)
    report = evaluate(params, stgcn_config, adjacency, test_set, seed=seed,
                      embedding_dim=emb_dim, adaptive_threshold=adaptive_threshold)
    return params, log, report, adjacency


def sweep_virtual_nodes(graph, series, stgcn_config: StgcnConfig,
                        train_config: TrainConfig, kinds, n_virtual_list, seeds,
                        distance_threshold: float = 0.1, adaptive_threshold: float = 0.1,
                        embedding_dim: int = 8, csv_path=None, log_fn=None) -> list:
    """Train and evaluate every (kind, n_v, seed) cell of the grid.

    Partial results are flushed to ``csv_path`` after each cell.
    """
    if not seeds:
        raise DataError("sweep needs at least one seed")
    reports = []
    for kind in kinds:
        for n_v in n_virtual_list:
            for seed in seeds:
                _, _, report, _ = run_experiment(
                    kind, n_v, seed, graph, series, stgcn_config, train_config,
                    distance_threshold, adaptive_threshold, embedding_dim,
                    log_fn=log_fn)
                reports.append(report)
                if csv_path is not None:
                    write_reports_csv(reports, csv_path)
    return reports


# -- results CSV -------------------------------------------------------

_AVG_ROW = "average"
_LONGTERM_ROW = "average_75_100"


def write_reports_csv(reports, path):
    """One row per (kind, n_v, seed, horizon) plus two average rows per
    report; float fields use repr so parsing round-trips exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "n_virtual", "seed", "horizon", "rmse", "mape", "masked_count"])
        for r in reports:
            base = [r.kind, r.n_virtual, r.seed]
            for h in range(r.num_horizons):
                writer.writerow(base + [h + 1, repr(r.rmse_per_horizon[h]),
                                        repr(r.mape_per_horizon[h]), r.masked_per_horizon[h]])
            lo, hi = r.longterm_range()
            writer.writerow(base + [_AVG_ROW, repr(r.avg_rmse), repr(r.avg_mape),
                                    sum(r.masked_per_horizon)])
            writer.writerow(base + [_LONGTERM_ROW, repr(r.longterm_rmse), repr(r.longterm_mape),
                                    sum(r.masked_per_horizon[lo - 1 : hi])])


def read_reports_csv(path) -> list:
    reports = {}
    order = []
    with open(path) as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = (row["kind"], int(row["n_virtual"]), int(row["seed"]))
            if key not in reports:
                reports[key] = MetricsReport(*key)
                order.append(key)
            r = reports[key]
            if row["horizon"] == _AVG_ROW:
                r.avg_rmse = float(row["rmse"])
                r.avg_mape = float(row["mape"])
            elif row["horizon"] == _LONGTERM_ROW:
                r.longterm_rmse = float(row["rmse"])
                r.longterm_mape = float(row["mape"])
            else:
                r.rmse_per_horizon.append(float(row["rmse"]))
                r.mape_per_horizon.append(float(row["mape"]))
                r.masked_per_horizon.append(int(row["masked_count"]))
    return [reports[k] for k in order]
