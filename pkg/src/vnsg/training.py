"""MAE training loop with Adam, global-norm gradient clipping,
seeded shuffling, validation-based early stopping, and best-checkpoint
tracking.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, NumericError
from .model import StgcnConfig, forward_batch, init_params, save_checkpoint
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    gradient_clip_norm: float = 5.0

    def validate(self):
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DataError("betas must lie in [0, 1)")
        if self.patience < 1:
            raise DataError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise DataError("batch_size and max_epochs must be >= 1")
        return self


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss, wall_time
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    checkpoint_path: str = None

    def save_jsonl(self, path):
        with open(path, "w") as fh:
            for row in self.epochs:
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({
                "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val_loss,
                "checkpoint_path": self.checkpoint_path,
            }) + "\n")


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; subgradient is 0 at exact ties."""
    return T.tmean(T.absolute(T.sub(pred, target)))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params: list) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adam_step(params: list, state: AdamState, config: TrainConfig):
    """Bias-corrected Adam update with optional global-norm clipping.

    Parameters with no accumulated gradient are treated as zero-gradient
    and left unchanged by the update direction.
    """
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
        grads.append(g)

    if config.gradient_clip_norm and config.gradient_clip_norm > 0:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads))
        if total > config.gradient_clip_norm:
            factor = config.gradient_clip_norm / total
            grads = [g * factor for g in grads]

    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
    return state


def _epoch_loss(params, config, adjacency, dataset, batch_size,
                embedding_dim, adaptive_threshold) -> float:
    """MAE over a dataset in normalized units, no parameter updates."""
    if dataset.num_windows == 0:
        return float("nan")
    total = 0.0
    for start in range(0, dataset.num_windows, batch_size):
        xb = Tensor(dataset.inputs[start : start + batch_size])
        yb = dataset.targets[start : start + batch_size]
        pred = forward_batch(params, config, adjacency, xb,
                             embedding_dim, adaptive_threshold)
        total += float(np.abs(pred.data - yb).sum())
    return total / (dataset.targets.size or 1)


def train(config: StgcnConfig, adjacency, train_set, val_set, train_config: TrainConfig,
          embedding_dim: int = 0, adaptive_threshold: float = 0.1,
          checkpoint_path=None, log_fn=None):
    """Optimize all parameters (embeddings included) against MAE.

    Returns (best_params, TrainLog); best is the minimum-validation
    checkpoint, with early stopping after ``patience`` stale epochs.
    For adaptive kinds the adjacency is rebuilt from the live embeddings
    inside every forward pass, so embedding gradients flow.
    """
    train_config.validate()
    if train_set.num_windows == 0:
        raise DataError("training split is empty")
    seeds = np.random.SeedSequence(train_config.seed).spawn(2)
    params = init_params(config, adjacency.size,
                         seed=int(seeds[0].generate_state(1)[0]),
                         embedding_dim=embedding_dim)
    shuffle_rng = np.random.Generator(np.random.PCG64(seeds[1]))
    state = AdamState.for_params(params.flat)
    log = TrainLog()
    best_params = params.copy()
    stale = 0

    for epoch in range(train_config.max_epochs):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(train_set.num_windows)
        loss_sum = 0.0
        for start in range(0, len(perm), train_config.batch_size):
            idx = perm[start : start + train_config.batch_size]
            params.zero_grads()
            xb = Tensor(train_set.inputs[idx])
            yb = Tensor(train_set.targets[idx])
            pred = forward_batch(params, config, adjacency, xb,
                                 embedding_dim, adaptive_threshold)
            loss = mae_loss(pred, yb)
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"training diverged: non-finite loss at epoch {epoch}, batch {start}"
                )
            loss.backward()
            adam_step(params.flat, state, train_config)
            loss_sum += loss.item() * len(idx)
        train_loss = loss_sum / train_set.num_windows
        val_loss = _epoch_loss(params, config, adjacency, val_set,
                               train_config.batch_size, embedding_dim, adaptive_threshold)
        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "wall_time": time.perf_counter() - t0,
        }
        log.epochs.append(row)
        if log_fn:
            log_fn(row)

        monitored = val_loss if np.isfinite(val_loss) else train_loss
        if monitored < log.best_val_loss:
            log.best_val_loss = monitored
            log.best_epoch = epoch
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= train_config.patience:
                break

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, best_params, config, meta={
            "best_epoch": log.best_epoch,
            "best_val_loss": log.best_val_loss,
            "embedding_dim": embedding_dim,
            "adaptive_threshold": adaptive_threshold,
            "adjacency_kind": adjacency.kind,
            "n_real": adjacency.n_real,
            "n_virtual": adjacency.n_virtual,
            "seed": train_config.seed,
        })
        log.checkpoint_path = str(checkpoint_path)
    return best_params, log
