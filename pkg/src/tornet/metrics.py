"""Unweighted average recall, confusion matrices and percentile-bootstrap CIs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError
from .numerics import RngStreams


def confusion_matrix(labels: Sequence[int], predictions: Sequence[int], n_classes: int = 2) -> np.ndarray:
    """``cm[true, predicted]`` counts."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise DataError(f"{labels.size} labels vs {predictions.size} predictions")
    for name, arr in (("label", labels), ("prediction", predictions)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DataError(f"{name} outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def recalls_from_confusion(cm: np.ndarray) -> np.ndarray:
    support = cm.sum(axis=1)
    if np.any(support == 0):
        missing = [int(k) for k in np.flatnonzero(support == 0)]
        raise DataError(f"UAR undefined: class(es) {missing} absent from labels")
    return np.diag(cm) / support


def uar(labels: Sequence[int], predictions: Sequence[int], n_classes: int = 2) -> float:
    """Mean over classes of per-class recall."""
    return float(recalls_from_confusion(confusion_matrix(labels, predictions, n_classes)).mean())


def _nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    # (1 - 0.95) / 2 is 0.025000000000000022 in binary; without the guard
    # ceil(q * 1000) would pick rank 26 instead of 25
    k = min(len(sorted_values), max(1, math.ceil(q * len(sorted_values) - 1e-9)))
    return float(sorted_values[k - 1])


def bootstrap_uars(
    labels: Sequence[int], predictions: Sequence[int], n: int = 1000, seed: int = 0, n_classes: int = 2
) -> np.ndarray:
    """UAR over ``n`` index resamples drawn with replacement.

    A resample missing any class is redrawn, so exactly ``n`` valid
    resamples contribute.
    """
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    recalls_from_confusion(confusion_matrix(labels, predictions, n_classes))  # validates inputs
    rng = RngStreams(seed).get("bootstrap")
    size = labels.size
    out = np.empty(n)
    filled = 0
    while filled < n:
        idx = rng.integers(0, size, size=size)
        cm = confusion_matrix(labels[idx], predictions[idx], n_classes)
        if np.any(cm.sum(axis=1) == 0):
            continue
        out[filled] = recalls_from_confusion(cm).mean()
        filled += 1
    return out


def bootstrap_ci(
    labels: Sequence[int],
    predictions: Sequence[int],
    n: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    n_classes: int = 2,
) -> Tuple[float, float]:
    """Nearest-rank percentile interval of the bootstrap UAR distribution."""
    if n < 1:
        raise DataError(f"need at least one bootstrap resample, got {n}")
    values = np.sort(bootstrap_uars(labels, predictions, n, seed, n_classes))
    alpha = (1.0 - level) / 2.0
    return _nearest_rank(values, alpha), _nearest_rank(values, 1.0 - alpha)


@dataclass
class EvalReport:
    uar: float
    recalls: List[float]
    confusion: List[List[int]]
    ci_low: float
    ci_high: float
    n_bootstrap: int
    level: float
    n_samples: int
    split: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self, class_names: Optional[Sequence[str]] = None) -> str:
        k = len(self.recalls)
        names = list(class_names) if class_names else [str(i) for i in range(k)]
        width = max(10, *(len(n) for n in names))
        lines = [
            f"split: {self.split or '-'}   samples: {self.n_samples}",
            f"UAR: {100 * self.uar:.1f}%   {100 * self.level:.0f}% CI ({self.n_bootstrap} resamples): "
            f"{100 * self.ci_low:.1f} - {100 * self.ci_high:.1f}",
            "",
            "confusion (rows = true, cols = predicted)",
            " " * width + "".join(f"{n:>{width}s}" for n in names) + f"{'recall':>{width}s}",
        ]
        for name, row, rec in zip(names, self.confusion, self.recalls):
            lines.append(f"{name:<{width}s}" + "".join(f"{v:>{width}d}" for v in row) + f"{100 * rec:>{width - 1}.1f}%")
        return "\n".join(lines)


def evaluate_predictions(
    labels: Sequence[int],
    predictions: Sequence[int],
    n_classes: int = 2,
    n_bootstrap: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    split: str = "",
) -> EvalReport:
    cm = confusion_matrix(labels, predictions, n_classes)
    recalls = recalls_from_confusion(cm)
    low, high = bootstrap_ci(labels, predictions, n_bootstrap, level, seed, n_classes)
    return EvalReport(
        uar=float(recalls.mean()),
        recalls=[float(r) for r in recalls],
        confusion=cm.tolist(),
        ci_low=low,
        ci_high=high,
        n_bootstrap=n_bootstrap,
        level=level,
        n_samples=int(cm.sum()),
        split=split,
    )
