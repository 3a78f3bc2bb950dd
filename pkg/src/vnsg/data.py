"""Traffic data: LargeST-style CSV ingestion, synthetic scenario
generation with controllable long-range incident propagation, and
normalized sliding-window dataset construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .graph import RoadGraph, bfs_hops

STEP_SECONDS = 300  # 5-minute sampling
STEPS_PER_DAY = 288

TOPOLOGIES = ("chain", "grid", "two-cluster-bridge")


@dataclass
class TrafficSeries:
    """Per-sensor flow in vehicles per 5-minute interval."""

    values: np.ndarray  # (|V|, T), NaN marks missing
    timestamps: np.ndarray  # T epoch seconds, uniform spacing
    node_ids: list

    def validate(self):
        if self.values.shape != (len(self.node_ids), len(self.timestamps)):
            raise DataError(
                f"series shape {self.values.shape} inconsistent with "
                f"{len(self.node_ids)} nodes x {len(self.timestamps)} frames"
            )
        steps = np.diff(self.timestamps)
        if len(steps) and (steps <= 0).any():
            raise DataError("timestamps are not strictly increasing")
        if len(steps) and not (steps == steps[0]).all():
            raise DataError("non-uniform timestamp spacing")
        return self

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_frames(self) -> int:
        return len(self.timestamps)


@dataclass
class WindowedDataset:
    """Normalized sliding-window input/target pairs for one split."""

    inputs: np.ndarray  # (B, |V|+n_v, T_in), virtual rows exactly zero
    targets: np.ndarray  # (B, |V|, T_out)
    norm_mean: float
    norm_std: float
    split: str
    n_real: int
    n_virtual: int

    @property
    def num_windows(self) -> int:
        return self.inputs.shape[0]

    def denormalize(self, arr: np.ndarray) -> np.ndarray:
        return arr * self.norm_std + self.norm_mean

    def normalize(self, arr: np.ndarray) -> np.ndarray:
        return (arr - self.norm_mean) / self.norm_std


@dataclass
class SyntheticScenario:
    topology: str = "two-cluster-bridge"
    num_nodes: int = 24
    days: int = 14
    incident_rate: float = 3.0  # expected incidents per day
    incident_magnitude: float = 0.6  # fractional flow drop at the source
    propagation_speed: float = 0.5  # hops per step
    seed: int = 0

    def validate(self):
        if self.topology not in TOPOLOGIES:
            raise DataError(f"unknown topology {self.topology!r}; choose from {TOPOLOGIES}")
        if self.num_nodes < 4:
            raise DataError("num_nodes must be >= 4")
        if self.days < 1:
            raise DataError("days must be >= 1")
        if not (0 <= self.incident_magnitude <= 1):
            raise DataError("incident_magnitude must lie in [0, 1]")
        if self.incident_rate < 0:
            raise DataError("incident_rate must be >= 0")
        if self.propagation_speed <= 0:
            raise DataError("propagation_speed must be > 0")
        return self


def _topology_edges(scenario: SyntheticScenario, rng) -> tuple:
    """Edge list plus per-node coordinates for each synthetic topology."""
    n = scenario.num_nodes
    pairs = []
    coords = []
    if scenario.topology == "chain":
        pairs = [(i, i + 1) for i in range(n - 1)]
        coords = [(32.7 + 0.01 * i, -117.2 + 0.01 * i) for i in range(n)]
    elif scenario.topology == "grid":
        rows = int(math.floor(math.sqrt(n)))
        cols = int(math.ceil(n / rows))
        for v in range(n):
            r, c = divmod(v, cols)
            coords.append((32.7 + 0.01 * r, -117.2 + 0.01 * c))
            if c + 1 < cols and v + 1 < n and (v + 1) // cols == r:
                pairs.append((v, v + 1))
            if v + cols < n:
                pairs.append((v, v + cols))
    else:  # two clusters joined by a single bridge edge (a bottleneck)
        m = n // 2
        for base, count, cx in ((0, m, -117.3), (m, n - m, -117.0)):
            for k in range(count):
                ang = 2 * math.pi * k / count
                coords.append((32.7 + 0.02 * math.sin(ang), cx + 0.02 * math.cos(ang)))
                pairs.append((base + k, base + (k + 1) % count))
                if count > 4:
                    pairs.append((base + k, base + (k + 2) % count))
        pairs.append((m - 1, m))
    dedup = sorted({(min(i, j), max(i, j)) for i, j in pairs})
    # a few long cross-town roads widen the distance spread so that the
    # Gaussian kernel keeps every local edge while pruning the long ones
    existing = set(dedup)
    n_long = max(1, round(0.05 * len(dedup)))
    long_pairs = [(i, i + n // 2) for i in range(n // 2)
                  if (i, i + n // 2) not in existing][:n_long]
    distances = []
    for i, j in dedup:
        d = float(rng.uniform(400.0, 900.0))
        distances.append((i, j, d))
        distances.append((j, i, d))
    for i, j in long_pairs:
        d = float(rng.uniform(3500.0, 4500.0))
        distances.append((i, j, d))
        distances.append((j, i, d))
    return distances, coords


def generate_synthetic(scenario: SyntheticScenario) -> tuple:
    """Deterministic synthetic traffic with long-range incident effects.

    Flow is a daily sinusoid plus neighbor diffusion; incidents drop a
    source node's flow by incident_magnitude and reach hop-h neighbors
    after ceil(h / propagation_speed) steps with geometric decay.
    """
    scenario.validate()
    rng = np.random.Generator(np.random.PCG64(scenario.seed))
    distances, coords = _topology_edges(scenario, rng)
    n = scenario.num_nodes
    graph = RoadGraph([f"s{i:03d}" for i in range(n)], coords, distances, n).validate()

    t_total = scenario.days * STEPS_PER_DAY
    t = np.arange(t_total)
    phases = 2 * math.pi * np.arange(n) / n
    amps = rng.uniform(60.0, 120.0, n)
    base = 180.0 + amps[:, None] * np.sin(2 * math.pi * t[None, :] / STEPS_PER_DAY + phases[:, None])

    # diffusion coupling over the road topology
    adj = np.zeros((n, n))
    for i, j, _ in distances:
        adj[i, j] = 1.0
    prop = adj + np.eye(n)
    prop /= prop.sum(axis=1, keepdims=True)
    alpha = 0.3
    values = np.empty_like(base)
    values[:, 0] = base[:, 0]
    for step in range(1, t_total):
        values[:, step] = (1 - alpha) * base[:, step] + alpha * (prop @ values[:, step - 1])

    # incidents: multiplicative drops propagating outward by hop distance
    hops = bfs_hops(adj)
    multiplier = np.ones_like(values)
    duration = 18  # steps (90 minutes)
    decay = 0.75
    for day in range(scenario.days):
        for _ in range(rng.poisson(scenario.incident_rate)):
            node = int(rng.integers(0, n))
            t0 = day * STEPS_PER_DAY + int(rng.integers(0, STEPS_PER_DAY))
            for v in range(n):
                h = hops[node, v]
                if h < 0:
                    continue
                start = t0 + math.ceil(h / scenario.propagation_speed)
                if start >= t_total:
                    continue
                drop = 1.0 - scenario.incident_magnitude * (decay ** h)
                multiplier[v, start : min(start + duration, t_total)] *= drop
    values = np.maximum(values * multiplier, 0.0)

    timestamps = np.arange(t_total, dtype=np.int64) * STEP_SECONDS + 1_546_300_800
    series = TrafficSeries(values, timestamps, list(graph.node_ids)).validate()
    return graph, series


def ingest_largest(flow_file, meta_file, edge_file) -> tuple:
    """Load LargeST-style CSV files into (RoadGraph, TrafficSeries).

    The flow file has header ``timestamp,<node_id>,...`` with one column
    per sensor; empty cells are treated as missing readings.
    """
    from .graph import read_road_graph

    graph = read_road_graph(meta_file, edge_file)
    try:
        fh = open(flow_file)
    except OSError as exc:
        raise DataError(f"cannot read flow file {flow_file}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "timestamp":
            raise DataError(f"{flow_file}: expected header starting with 'timestamp'")
        flow_ids = header[1:]
        if set(flow_ids) != set(graph.node_ids):
            raise DataError(
                f"{flow_file}: sensor columns do not match metadata node ids "
                f"({len(flow_ids)} columns vs {graph.num_nodes} nodes)"
            )
        timestamps, rows = [], []
        for row in reader:
            if not row:
                continue
            timestamps.append(int(float(row[0])))
            rows.append([float(v) if v != "" else math.nan for v in row[1:]])
    if not rows:
        raise DataError(f"{flow_file}: no data rows")
    # align columns to metadata order
    order = [flow_ids.index(nid) for nid in graph.node_ids]
    values = np.array(rows, dtype=np.float64).T[order]
    series = TrafficSeries(values, np.array(timestamps, dtype=np.int64), list(graph.node_ids))
    series.validate()
    return graph, series


def write_flow_csv(series: TrafficSeries, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + list(series.node_ids))
        for k, ts in enumerate(series.timestamps):
            writer.writerow([int(ts)] + [repr(float(v)) for v in series.values[:, k]])


def impute_missing(values: np.ndarray) -> np.ndarray:
    """Last observation carried forward, zeros for leading gaps."""
    out = values.copy()
    for row in out:
        last = 0.0
        for k in range(row.size):
            if np.isnan(row[k]):
                row[k] = last
            else:
                last = row[k]
    return out


def make_windows(series: TrafficSeries, t_in: int, t_out: int, n_virtual: int,
                 split_ratios=(0.6, 0.2, 0.2)) -> tuple:
    """Chronological train/val/test windows with train-only z-scoring.

    Virtual-node rows are appended to every input window as exact zeros;
    every target index is strictly after its window's last input index.
    """
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {split_ratios}")
    t_total = series.num_frames
    if t_total < t_in + t_out:
        raise DataError(
            f"series of length {t_total} too short for T_in={t_in} + T_out={t_out}"
        )
    values = impute_missing(series.values)
    n_real = series.num_nodes
    n_windows = t_total - t_in - t_out + 1
    n_train = int(math.floor(split_ratios[0] * n_windows))
    n_val = int(math.floor(split_ratios[1] * n_windows))
    n_test = n_windows - n_train - n_val

    if n_train > 0:
        train_span = values[:, : n_train - 1 + t_in + t_out]
        mean = float(train_span.mean())
        std = float(train_span.std())
    else:
        mean, std = 0.0, 1.0
    if std < 1e-12:
        std = 1.0

    def build(start: int, count: int, split: str) -> WindowedDataset:
        inputs = np.zeros((count, n_real + n_virtual, t_in))
        targets = np.zeros((count, n_real, t_out))
        for b in range(count):
            s = start + b
            inputs[b, :n_real] = (values[:, s : s + t_in] - mean) / std
            targets[b] = (values[:, s + t_in : s + t_in + t_out] - mean) / std
        return WindowedDataset(inputs, targets, mean, std, split, n_real, n_virtual)

    return (
        build(0, n_train, "train"),
        build(n_train, n_val, "val"),
        build(n_train + n_val, n_test, "test"),
    )
