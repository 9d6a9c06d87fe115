"""Adam, the training loop with validation-UAR model selection, and model I/O."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numerics as nx
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SplitData, batches
from .errors import CheckpointError, ConfigError, DataError
from .metrics import uar
from .network import ModelConfig, TorNet, build_model
from .numerics import Parameter, RngStreams, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    patience: Optional[int] = None
    target_uar: Optional[float] = None
    class_weighting: str = "off"
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1 (no epoch would be trained), got {self.max_epochs}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.class_weighting not in ("off", "balanced"):
            raise ConfigError(f"class_weighting must be 'off' or 'balanced', got {self.class_weighting!r}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
    p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """
    if t < 1:
        raise ConfigError(f"Adam step index must be >= 1, got {t}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ConfigError("params, grads and Adam moments must have equal length")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ConfigError(f"Adam shape mismatch: param {p.shape}, grad {g.shape}, moments {m.shape}/{v.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += eps
        p -= (lr / c1) * m / denom
    state.t = t
    return params, state


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.state.t + 1,
            self.lr,
            self.betas[0],
            self.betas[1],
            self.eps,
        )


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


# --------------------------------------------------------------------------
# inference helpers


def predict_logits(model: TorNet, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode logits for a stacked feature array, without building a graph."""
    was_training = model.training
    model.eval()
    outs = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(model(x[start:start + batch_size]).data)
    model.train(was_training)
    n_classes = model.config.n_classes
    return np.concatenate(outs) if outs else np.zeros((0, n_classes), np.float32)


def evaluate_uar(model: TorNet, data: SplitData, batch_size: int = 16) -> Tuple[float, np.ndarray]:
    logits = predict_logits(model, data.x, batch_size)
    preds = logits.argmax(axis=1)
    return uar(data.y, preds, model.config.n_classes), logits


def class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * n_k)``."""
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    if np.any(counts == 0):
        raise DataError("balanced class weighting needs every class in the training split")
    return labels.size / (n_classes * counts)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    history: List[dict]
    best_epoch: int
    best_uar: float
    best_state: Dict[str, np.ndarray]
    final_state: Dict[str, np.ndarray]
    final_epoch: int
    stop_reason: str = "max_epochs"


def snapshot(model: TorNet) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def train(
    model: TorNet,
    train_data: SplitData,
    val_data: SplitData,
    config: TrainConfig,
    *,
    on_epoch: Optional[Callable[[dict], None]] = None,
    record_time: bool = True,
) -> TrainResult:
    """Train with Adam + cross-entropy, keeping the epoch with the best validation UAR.

    Ties keep the earlier epoch.  Training stops after ``max_epochs``, once
    validation UAR reaches ``target_uar`` (if set), or after ``patience``
    epochs without improvement (if set).
    """
    n_classes = model.config.n_classes
    if len(train_data) == 0:
        raise DataError("training split is empty")
    present = np.unique(val_data.y)
    if len(present) < n_classes:
        raise ConfigError(
            f"validation split contains only class(es) {present.tolist()}; UAR is undefined without every class"
        )
    weights = class_weights(train_data.y, n_classes) if config.class_weighting == "balanced" else None
    streams = RngStreams(config.seed)
    params = model.parameters()
    opt = Adam(params, config.lr, (config.beta1, config.beta2), config.eps)

    history: List[dict] = []
    best_epoch, best_uar, best_state = 0, -1.0, None
    stop_reason = "max_epochs"
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        model.train()
        dropout_rng = streams.get(f"dropout/epoch{epoch}")
        loss_sum = 0.0
        for xb, yb in batches(train_data, config.batch_size, config.seed, epoch, shuffle=True):
            model.zero_grad()
            logits = model(xb, dropout_rng)
            loss = nx.softmax_cross_entropy(logits, yb, weights)
            loss.backward()
            if config.grad_clip is not None:
                clip_grad_norm(params, config.grad_clip)
            opt.step()
            loss_sum += float(loss.data) * len(yb)
            del logits, loss  # release the graph before the next forward
        val_uar, _ = evaluate_uar(model, val_data, config.batch_size)
        record = {"epoch": epoch, "train_loss": loss_sum / len(train_data), "val_uar": val_uar}
        if record_time:
            record["seconds"] = round(time.perf_counter() - started, 3)
        history.append(record)
        log.info("epoch %d  train_loss %.4f  val_uar %.4f", epoch, record["train_loss"], val_uar)
        if on_epoch is not None:
            on_epoch(record)
        if val_uar > best_uar:
            best_epoch, best_uar, best_state = epoch, val_uar, snapshot(model)
        if config.target_uar is not None and val_uar >= config.target_uar:
            stop_reason = "target_uar"
            break
        if config.patience is not None and epoch - best_epoch >= config.patience:
            stop_reason = "patience"
            break
    return TrainResult(history, best_epoch, best_uar, best_state, snapshot(model), epoch, stop_reason)


# --------------------------------------------------------------------------
# checkpoints of whole models


def checkpoint_metadata(
    model_config: ModelConfig,
    train_config: Optional[TrainConfig] = None,
    *,
    epoch: int = 0,
    val_uar: Optional[float] = None,
    seed: int = 0,
    created: float = 0.0,
) -> dict:
    return {
        "model_config": model_config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "epoch": epoch,
        "val_uar": val_uar,
        "seed": seed,
        "created": created,
    }


def save_model(path: Union[str, Path], state: Dict[str, np.ndarray], metadata: dict) -> None:
    save_checkpoint(path, state, metadata)


def load_model(path: Union[str, Path]) -> Tuple[TorNet, dict]:
    tensors, metadata = load_checkpoint(path)
    if "model_config" not in metadata:
        raise CheckpointError(f"{path}: metadata has no model_config")
    config = ModelConfig.from_dict(metadata["model_config"])
    model = build_model(config, seed=int(metadata.get("seed", 0)))
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: tensor table does not match the model: {exc}") from None
    model.eval()
    return model, metadata
