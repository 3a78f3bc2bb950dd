"""The spatio-temporal forecaster: stacked blocks of causal temporal
convolutions (GLU-gated) around a graph convolution, a per-node readout
over the remaining time axis, and virtual-node-aware input/output
handling. Includes binary checkpoint serialization.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, NumericError, ShapeError
from .graph import (
    AdjacencyMatrix,
    NodeEmbeddings,
    adaptive_weights,
    propagation_tensor,
    semi_adaptive_weights,
)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"VNSG"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("glu", "relu", "identity")


@dataclass
class StgcnConfig:
    num_blocks: int = 2
    spatial_hidden: int = 16
    temporal_hidden: int = 32
    kernel_size: int = 3
    activation_spatial: str = "relu"
    activation_temporal: str = "glu"
    input_window: int = 12
    output_horizons: int = 20
    raw_adjacency: bool = False

    def validate(self):
        if self.kernel_size < 1 or self.num_blocks < 1:
            raise DataError("kernel_size and num_blocks must be >= 1")
        if self.spatial_hidden < 1 or self.temporal_hidden < 1:
            raise DataError("hidden sizes must be >= 1")
        if self.output_horizons < 1:
            raise DataError("output_horizons must be >= 1")
        if self.activation_spatial not in ("relu", "identity"):
            raise DataError(f"unknown spatial activation {self.activation_spatial!r}")
        if self.activation_temporal not in ACTIVATIONS:
            raise DataError(f"unknown temporal activation {self.activation_temporal!r}")
        if self.input_window < self.min_input_window():
            raise DataError(
                f"input_window {self.input_window} too short: "
                f"{self.num_blocks} blocks with K={self.kernel_size} need "
                f">= {self.min_input_window()} steps"
            )
        return self

    def min_input_window(self) -> int:
        return self.num_blocks * 2 * (self.kernel_size - 1) + 1

    def remaining_steps(self) -> int:
        return self.input_window - self.num_blocks * 2 * (self.kernel_size - 1)


@dataclass
class StgcnParams:
    """All trainable tensors, addressable by name and as a flat list."""

    tensors: dict = field(default_factory=dict)

    @property
    def flat(self) -> list:
        return list(self.tensors.values())

    @property
    def names(self) -> list:
        return list(self.tensors.keys())

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "StgcnParams":
        out = StgcnParams()
        for name, t in self.tensors.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
            out.tensors[name] = c
        return out

    def embeddings(self, dim: int, threshold: float) -> NodeEmbeddings:
        if "e1" not in self.tensors or "e2" not in self.tensors:
            raise DataError("parameters carry no node embeddings")
        return NodeEmbeddings(self.tensors["e1"], self.tensors["e2"], dim, threshold)


def init_params(config: StgcnConfig, num_nodes: int, seed: int,
                embedding_dim: int = 0) -> StgcnParams:
    """Seeded Glorot-uniform weights; embeddings appended when
    embedding_dim > 0 (adaptive / semi-adaptive configurations)."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    params = StgcnParams()

    def glorot(name, shape):
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        fan_out = shape[0]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params.tensors[name] = Tensor(
            rng.uniform(-bound, bound, shape), requires_grad=True, name=name
        )

    gate = 2 if config.activation_temporal == "glu" else 1
    c_in = 1
    for b in range(config.num_blocks):
        glorot(f"block{b}.tconv1", (gate * config.temporal_hidden, c_in, config.kernel_size))
        glorot(f"block{b}.spatial", (config.temporal_hidden, config.spatial_hidden))
        glorot(f"block{b}.tconv2", (gate * config.temporal_hidden, config.spatial_hidden, config.kernel_size))
        c_in = config.temporal_hidden
    glorot("readout", (config.temporal_hidden, config.remaining_steps(), config.output_horizons))

    if embedding_dim > 0:
        # match init_embeddings: keep some thresholded entries alive
        scl = 1.0 / embedding_dim ** 0.25
        for name in ("e1", "e2"):
            params.tensors[name] = Tensor(
                rng.uniform(-0.5, 0.5, (num_nodes, embedding_dim)) * scl,
                requires_grad=True, name=name,
            )
    return params


def adjacency_tensor(params: StgcnParams, adjacency: AdjacencyMatrix,
                     embedding_dim: int = 0, adaptive_threshold: float = 0.1) -> Tensor:
    """Current adjacency weights as a Tensor; for adaptive kinds this is
    rebuilt from the live embeddings so gradients reach them."""
    if adjacency.kind == "adaptive":
        emb = params.embeddings(embedding_dim, adaptive_threshold)
        return adaptive_weights(emb)
    if adjacency.kind == "semi_adaptive":
        emb = params.embeddings(embedding_dim, adaptive_threshold)
        return semi_adaptive_weights(adjacency.real_block(), emb)
    return Tensor(adjacency.weights)


def _stage(name: str, fn):
    try:
        return fn()
    except NumericError as exc:
        raise NumericError(f"{exc} (layer {name})") from exc


def _temporal(h: Tensor, kernels: Tensor, activation: str, name: str) -> Tensor:
    def run():
        out = T.conv1d_causal(h, kernels)
        if activation == "glu":
            c = out.shape[2] // 2
            lin = T.slice_axis(out, 2, 0, c)
            gat = T.slice_axis(out, 2, c, 2 * c)
            return T.mul(lin, T.sigmoid(gat))
        if activation == "relu":
            return T.relu(out)
        return out

    return _stage(name, run)


def forward_batch(params: StgcnParams, config: StgcnConfig, adjacency: AdjacencyMatrix,
                  x: Tensor, embedding_dim: int = 0, adaptive_threshold: float = 0.1) -> Tensor:
    """Batched forward pass: x is (B, |V|+n_v, T_in), output is
    (B, |V|, T_out). Virtual-node rows are dropped from the output."""
    config.validate()
    if x.data.ndim != 3:
        raise ShapeError(f"forward_batch: expected (B, N, T_in), got shape {x.shape}")
    b, n, t_in = x.shape
    if n != adjacency.size:
        raise ShapeError(f"input rows {n} vs adjacency size {adjacency.size}")
    if t_in != config.input_window:
        raise ShapeError(f"input window {t_in} vs configured {config.input_window}")

    weights = adjacency_tensor(params, adjacency, embedding_dim, adaptive_threshold)
    a_hat = _stage("propagation", lambda: propagation_tensor(weights, raw=config.raw_adjacency))

    h = T.reshape(x, (b, n, 1, t_in))
    for blk in range(config.num_blocks):
        h = _temporal(h, params.tensors[f"block{blk}.tconv1"],
                      config.activation_temporal, f"block{blk}.tconv1")
        w_s = params.tensors[f"block{blk}.spatial"]
        h = _stage(f"block{blk}.spatial",
                   lambda h=h, w=w_s: T.mix_channels(T.mix_nodes(a_hat, h), w))
        if config.activation_spatial == "relu":
            h = T.relu(h)
        h = _temporal(h, params.tensors[f"block{blk}.tconv2"],
                      config.activation_temporal, f"block{blk}.tconv2")
    out = _stage("readout", lambda: T.collapse_readout(h, params.tensors["readout"]))
    return T.slice_axis(out, 1, 0, adjacency.n_real)


def forward(params: StgcnParams, config: StgcnConfig, adjacency: AdjacencyMatrix,
            x: Tensor, embedding_dim: int = 0, adaptive_threshold: float = 0.1) -> Tensor:
    """Single-window forward: x is (|V|+n_v, T_in), output (|V|, T_out)."""
    if x.data.ndim != 2:
        raise ShapeError(f"forward: expected (N, T_in), got shape {x.shape}")
    batched = T.reshape(x, (1,) + x.shape)
    out = forward_batch(params, config, adjacency, batched,
                        embedding_dim, adaptive_threshold)
    return T.reshape(out, out.shape[1:])


def predict(params: StgcnParams, config: StgcnConfig, adjacency: AdjacencyMatrix,
            windows, batch_size: int = 64, embedding_dim: int = 0,
            adaptive_threshold: float = 0.1) -> np.ndarray:
    """Batched prediction, de-normalized back to flow units."""
    if windows.norm_std <= 0:
        raise DataError("windowed dataset is missing normalization stats")
    outs = []
    for start in range(0, windows.num_windows, batch_size):
        xb = Tensor(windows.inputs[start : start + batch_size])
        yb = forward_batch(params, config, adjacency, xb,
                           embedding_dim, adaptive_threshold)
        outs.append(yb.data)
    if not outs:
        return np.zeros((0, adjacency.n_real, config.output_horizons))
    return windows.denormalize(np.concatenate(outs, axis=0))


# -- checkpoint serialization -----------------------------------------

def save_checkpoint(path, params: StgcnParams, config: StgcnConfig, meta: dict = None):
    """Binary layout: magic "VNSG", version u32, u64-length JSON block,
    then per tensor: u32 name length, name, u32 rank, u64 extents,
    little-endian float64 data. All integers little-endian."""
    blob = json.dumps({"config": asdict(config), "meta": meta or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, t in params.tensors.items():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", t.data.ndim))
            for ext in t.data.shape:
                fh.write(struct.pack("<Q", ext))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, config, meta)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    with fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a VNSG checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (jlen,) = struct.unpack("<Q", fh.read(8))
        head = json.loads(fh.read(jlen))
        params = StgcnParams()
        while True:
            raw = fh.read(4)
            if not raw:
                break
            (nlen,) = struct.unpack("<I", raw)
            name = fh.read(nlen).decode()
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            params.tensors[name] = Tensor(data.copy(), requires_grad=True, name=name)
    config = StgcnConfig(**head["config"])
    return params, config, head.get("meta", {})
