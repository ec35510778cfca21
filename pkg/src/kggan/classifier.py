"""Linear softmax classifiers and ZSL / GZSL training-set assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import FeatureSet
from .nn import Adam, ParameterSet

__all__ = [
    "ZSL", "GZSL", "DatasetSplit", "SoftmaxClassifier", "SoftmaxConfig", "TrainingError",
    "assemble_training_set", "softmax_nll", "train_softmax", "predict_topk",
    "save_classifier", "load_classifier",
]

ZSL = "zsl"
GZSL = "gzsl"


class TrainingError(RuntimeError):
    pass


def _check_mode(mode: str) -> str:
    mode = mode.lower()
    if mode not in (ZSL, GZSL):
        raise ValueError(f"mode must be 'zsl' or 'gzsl', got {mode!r}")
    return mode


@dataclass(frozen=True)
class DatasetSplit:
    """Real seen training rows, test rows, and the two disjoint label sets."""

    train: FeatureSet
    test: FeatureSet
    seen: tuple[str, ...]
    unseen: tuple[str, ...]
    mode: str = GZSL

    def __post_init__(self):
        object.__setattr__(self, "mode", _check_mode(self.mode))
        if set(self.seen) & set(self.unseen):
            raise ValueError("seen and unseen label sets overlap")
        if not set(self.train.labels) <= set(self.seen):
            raise ValueError("training rows must carry seen labels")
        allowed = set(self.unseen) if self.mode == ZSL else set(self.seen) | set(self.unseen)
        if not set(self.test.labels) <= allowed:
            raise ValueError(f"{self.mode} test rows carry labels outside the mode's label set")

    @property
    def labels(self) -> tuple[str, ...]:
        """Candidate label set of the mode."""
        return self.unseen if self.mode == ZSL else self.seen + self.unseen

    def for_mode(self, mode: str) -> "DatasetSplit":
        mode = _check_mode(mode)
        test = self.test.with_labels(self.unseen) if mode == ZSL else self.test
        return DatasetSplit(self.train, test, self.seen, self.unseen, mode)


def assemble_training_set(mode: str, real_seen: FeatureSet | None, synthetic_unseen: FeatureSet,
                          seen: Sequence[str] = (), unseen: Sequence[str] = ()
                          ) -> tuple[FeatureSet, tuple[str, ...]]:
    """ZSL: synthetic unseen rows over Y_u.  GZSL: real seen plus synthetic unseen over Y_s + Y_u.

    Label sets default to the labels present in the corresponding rows.
    """
    mode = _check_mode(mode)
    if synthetic_unseen is None or len(synthetic_unseen) == 0:
        raise ValueError("the synthetic unseen feature set is empty")
    unseen = tuple(unseen) or synthetic_unseen.label_set
    if mode == ZSL:
        return synthetic_unseen, unseen
    if real_seen is None or len(real_seen) == 0:
        raise ValueError("GZSL training needs real seen features")
    seen = tuple(seen) or real_seen.label_set
    return FeatureSet.concat([real_seen, synthetic_unseen]), seen + unseen


@dataclass
class SoftmaxClassifier:
    """P(y|x) = exp(theta_y . x) / sum_i exp(theta_i . x), no bias."""

    labels: tuple[str, ...]
    theta: np.ndarray  # (n_labels, dim)
    losses: list[float] = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta)
        if self.theta.ndim != 2 or self.theta.shape[0] != len(self.labels):
            raise ValueError("theta needs one row per label")

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def scores(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.theta.T

    def proba(self, x: np.ndarray) -> np.ndarray:
        s = self.scores(x)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    def rank(self, x: np.ndarray) -> np.ndarray:
        """Label indices per row, best first; ties go to the lower index."""
        return np.argsort(-self.scores(x), axis=1, kind="stable")

    def predict(self, x: np.ndarray) -> list[str]:
        return [self.labels[r[0]] for r in self.rank(x)]


def softmax_nll(theta: Tensor, x: np.ndarray | Tensor, y_idx: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of labels ``y_idx`` under softmax(x theta^T)."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=theta.dtype))
    logp = ad.log_softmax(ad.matmul(x, ad.transpose(theta)), axis=1)
    onehot = np.zeros(logp.shape, dtype=theta.dtype)
    onehot[np.arange(len(y_idx)), y_idx] = 1.0
    return ad.neg(ad.mean(ad.sum(logp * onehot, axis=1)))


@dataclass
class SoftmaxConfig:
    lr: float = 0.001
    epochs: int = 30
    batch_size: int | None = 64  # None = full batch
    seed: int = 0
    dtype: str = "float64"


def train_softmax(features: FeatureSet, labels: Sequence[str] | None = None,
                  config: SoftmaxConfig | None = None) -> SoftmaxClassifier:
    """Minimise the mean NLL with Adam from theta = 0.

    ``labels`` fixes the label set and row order of theta; it defaults to
    the labels present in ``features`` in first-seen order.
    """
    config = config or SoftmaxConfig()
    labels = tuple(labels) if labels is not None else features.label_set
    if len(set(labels)) < 2:
        raise ValueError("softmax training needs at least two labels")
    index = {y: i for i, y in enumerate(labels)}
    unknown = set(features.labels) - set(index)
    if unknown:
        raise ValueError(f"rows carry labels outside the label set: {sorted(unknown)}")
    dtype = np.dtype(config.dtype)
    x = features.x.astype(dtype)
    y = np.array([index[v] for v in features.labels], dtype=np.int64)
    params = ParameterSet({"theta": np.zeros((len(labels), features.dim), dtype=dtype)})
    opt = Adam(params, lr=config.lr, betas=(0.9, 0.999))
    rng = np.random.default_rng(config.seed)
    n = len(y)
    bs = n if not config.batch_size else min(config.batch_size, n)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss = softmax_nll(params["theta"], x[idx], y[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"softmax loss is not finite at epoch {epoch}")
            total += value * len(idx)
            opt.step(params.grads(loss))
        losses.append(total / n)
    return SoftmaxClassifier(labels, params["theta"].data.copy(), losses)


def predict_topk(x: np.ndarray, clf: SoftmaxClassifier, k: int) -> list[str]:
    if not 1 <= k <= len(clf.labels):
        raise ValueError(f"k must be in [1, {len(clf.labels)}], got {k}")
    order = clf.rank(np.asarray(x).reshape(1, -1))[0]
    return [clf.labels[i] for i in order[:k]]


def save_classifier(clf: SoftmaxClassifier, path) -> None:
    lines = [f"softmax {len(clf.labels)} {clf.dim}"]
    for y, row in zip(clf.labels, clf.theta):
        lines.append("\t".join([y] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_classifier(path) -> SoftmaxClassifier:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "softmax":
            raise ValueError("expected header 'softmax <labels> <dim>'")
        n, dim = int(header[1]), int(header[2])
        labels, rows = [], []
        for raw in fh:
            parts = raw.rstrip("\r\n").split("\t")
            if parts == [""]:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"row for {parts[0]!r} has {len(parts) - 1} values, expected {dim}")
            labels.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    if len(labels) != n:
        raise ValueError(f"header declares {n} labels, found {len(labels)}")
    return SoftmaxClassifier(tuple(labels), np.array(rows, dtype=float).reshape(n, dim))
