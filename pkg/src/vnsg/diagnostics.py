"""Over-squashing diagnostics and visualization exports.

Sensitivity is the exact Jacobian magnitude |d yhat_v(h) / d x_u(last
input step)|, computed with one backward pass per sampled output
coordinate and bucketed by hop distance on the real-node graph.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .graph import AdjacencyMatrix, RoadGraph, bfs_hops
from .model import StgcnConfig, forward
from .tensor import Tensor, element


@dataclass
class SensitivityReport:
    """Per-hop mean of output-to-input Jacobian magnitudes."""

    kind: str
    n_virtual: int
    max_hops: int
    per_hop_mean: list = field(default_factory=list)  # index = hop distance
    per_hop_count: list = field(default_factory=list)
    excluded_pairs: int = 0
    sample_count: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind,
            "n_virtual": self.n_virtual,
            "max_hops": self.max_hops,
            "per_hop_mean": self.per_hop_mean,
            "per_hop_count": self.per_hop_count,
            "excluded_pairs": self.excluded_pairs,
            "sample_count": self.sample_count,
        })

    @classmethod
    def from_json(cls, text: str) -> "SensitivityReport":
        return cls(**json.loads(text))


def pairwise_sensitivity(params, config: StgcnConfig, adjacency: AdjacencyMatrix,
                         probe_inputs: np.ndarray, max_hops: int = 6,
                         num_samples: int = 40, seed: int = 0,
                         embedding_dim: int = 0, adaptive_threshold: float = 0.1) -> SensitivityReport:
    """Sample output coordinates (window, node, horizon), backprop each,
    and bucket input-node sensitivities by real-graph hop distance.

    ``probe_inputs`` is (B, |V|+n_v, T_in); hop distances are computed on
    the real-node block only, so virtual shortcuts never shrink them.
    Disconnected (u, v) pairs are excluded and counted.
    """
    probe_inputs = np.asarray(probe_inputs, dtype=np.float64)
    if probe_inputs.ndim != 3 or probe_inputs.shape[0] == 0:
        raise DataError(f"probe inputs must be (B, N, T_in), got {probe_inputs.shape}")
    n_real = adjacency.n_real
    hops = bfs_hops(adjacency.real_block())
    rng = np.random.Generator(np.random.PCG64(seed))

    sums = np.zeros(max_hops + 1)
    counts = np.zeros(max_hops + 1, dtype=np.int64)
    excluded = 0
    last_step = probe_inputs.shape[2] - 1
    for _ in range(num_samples):
        w = int(rng.integers(0, probe_inputs.shape[0]))
        v = int(rng.integers(0, n_real))
        h = int(rng.integers(0, config.output_horizons))
        x = Tensor(probe_inputs[w], requires_grad=True)
        out = forward(params, config, adjacency, x, embedding_dim, adaptive_threshold)
        element(out, (v, h)).backward()
        grad = x.grad if x.grad is not None else np.zeros_like(x.data)
        for u in range(n_real):
            d = hops[u, v]
            if d < 0:
                excluded += 1
                continue
            if d > max_hops:
                continue
            sums[d] += abs(grad[u, last_step])
            counts[d] += 1
    means = [float(sums[d] / counts[d]) if counts[d] else 0.0 for d in range(max_hops + 1)]
    return SensitivityReport(adjacency.kind, adjacency.n_virtual, max_hops,
                             means, [int(c) for c in counts], excluded, num_samples)


# -- SVG helpers -------------------------------------------------------

def _svg_header(width, height, title):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
        f'<text x="{width / 2}" y="16" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>\n'
    )


def _heat_color(value, vmax):
    # white -> dark blue linear ramp
    frac = 0.0 if vmax == 0 else min(max(value / vmax, 0.0), 1.0)
    r = int(255 * (1 - frac))
    g = int(255 * (1 - frac))
    return f"rgb({r},{g},255)"


def export_real_to_virtual_heatmap(adjacency: AdjacencyMatrix, csv_path, svg_path=None):
    """Write the real-to-virtual weight block as an n_v x |V| CSV
    (rows = virtual nodes) and a self-contained SVG heat map."""
    if adjacency.n_virtual < 1:
        raise DataError("heat map export requires at least one virtual node")
    block = adjacency.real_to_virtual().T  # (n_v, |V|)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["virtual_node"] + [f"real_{j}" for j in range(adjacency.n_real)])
        for i, row in enumerate(block):
            writer.writerow([i] + [repr(float(v)) for v in row])

    if svg_path is not None:
        cell, left, top = 14, 80, 40
        n_v, n_r = block.shape
        width = left + n_r * cell + 20
        height = top + n_v * cell + 40
        vmax = float(block.max())
        parts = [_svg_header(width, height, "Real-to-virtual connection weights")]
        for i in range(n_v):
            parts.append(
                f'<text x="{left - 6}" y="{top + i * cell + cell * 0.75}" text-anchor="end" '
                f'font-size="10" font-family="sans-serif">virtual {i}</text>\n'
            )
            for j in range(n_r):
                parts.append(
                    f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" '
                    f'height="{cell}" fill="{_heat_color(block[i, j], vmax)}" '
                    f'stroke="#ccc" stroke-width="0.5"/>\n'
                )
        parts.append(
            f'<text x="{left + n_r * cell / 2}" y="{height - 12}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">real node index</text>\n</svg>\n'
        )
        with open(svg_path, "w") as fh:
            fh.write("".join(parts))


def load_heatmap_csv(path) -> np.ndarray:
    with open(path) as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [[float(v) for v in row[1:]] for row in reader if row]
    return np.array(rows, dtype=np.float64)


def export_node_weight_map(adjacency: AdjacencyMatrix, graph: RoadGraph,
                           virtual_index: int, csv_path, svg_path=None):
    """Per-node weights to/from one virtual node as CSV records
    (id, lat, lon, weight_to_virtual, weight_from_virtual) plus an SVG
    scatter in lon/lat with point size proportional to weight."""
    if not (0 <= virtual_index < adjacency.n_virtual):
        raise DataError(
            f"virtual index {virtual_index} out of range (n_virtual={adjacency.n_virtual})"
        )
    if len(graph.coords) != adjacency.n_real:
        raise DataError("graph coordinates do not match adjacency real node count")
    col = adjacency.n_real + virtual_index
    to_v = adjacency.weights[: adjacency.n_real, col]
    from_v = adjacency.weights[col, : adjacency.n_real]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "lat", "lon", "weight_to_virtual", "weight_from_virtual"])
        for i in range(adjacency.n_real):
            lat, lon = graph.coords[i]
            writer.writerow([graph.node_ids[i], repr(lat), repr(lon),
                             repr(float(to_v[i])), repr(float(from_v[i]))])

    if svg_path is not None:
        width, height, pad = 480, 420, 40
        lats = np.array([c[0] for c in graph.coords])
        lons = np.array([c[1] for c in graph.coords])
        lat_span = max(float(lats.max() - lats.min()), 1e-9)
        lon_span = max(float(lons.max() - lons.min()), 1e-9)
        vmax = float(to_v.max())
        parts = [_svg_header(width, height, f"Weights to virtual node {virtual_index}")]
        for i in range(adjacency.n_real):
            x = pad + (lons[i] - lons.min()) / lon_span * (width - 2 * pad)
            y = height - pad - (lats[i] - lats.min()) / lat_span * (height - 2 * pad)
            radius = 2.0 + (12.0 * to_v[i] / vmax if vmax > 0 else 0.0)
            parts.append(
                f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{radius:.2f}" fill="#1f77b4" '
                f'fill-opacity="0.7"><title>{graph.node_ids[i]}: {to_v[i]!r}</title></circle>\n'
            )
        parts.append("</svg>\n")
        with open(svg_path, "w") as fh:
            fh.write("".join(parts))


def load_node_weight_csv(path) -> list:
    with open(path) as fh:
        return [
            {
                "id": row["id"],
                "lat": float(row["lat"]),
                "lon": float(row["lon"]),
                "weight_to_virtual": float(row["weight_to_virtual"]),
                "weight_from_virtual": float(row["weight_from_virtual"]),
            }
            for row in csv.DictReader(fh)
        ]
