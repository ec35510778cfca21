"""Per-class Hit@k, macro averaging and the GZSL harmonic mean."""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .classifier import GZSL, ZSL, DatasetSplit, SoftmaxClassifier

__all__ = [
    "EvalReport", "per_class_hit_at_k", "macro_average", "harmonic_mean",
    "make_report", "save_report", "load_report", "ZSL_KS", "GZSL_KS",
]

ZSL_KS = (1, 2, 5)
GZSL_KS = (1,)


def per_class_hit_at_k(rankings: Sequence[Sequence[str]], truths: Sequence[str], k: int,
                       classes: Sequence[str] | None = None) -> dict[str, float]:
    """100 * fraction of each class's rows whose top-k contains the class.

    Classes listed in ``classes`` but absent from ``truths`` are dropped
    with a warning.
    """
    if len(rankings) != len(truths):
        raise ValueError("one ranking per test row is required")
    hits: dict[str, int] = {}
    counts: dict[str, int] = {}
    for ranked, y in zip(rankings, truths):
        if len(ranked) < k:
            raise ValueError(f"a test row has {len(ranked)} ranked labels, fewer than k={k}")
        counts[y] = counts.get(y, 0) + 1
        hits[y] = hits.get(y, 0) + (y in ranked[:k])
    order = list(classes) if classes is not None else sorted(counts)
    absent = [c for c in order if c not in counts]
    if absent:
        warnings.warn(f"classes without test rows excluded from Hit@{k}: {absent}", stacklevel=2)
    return {c: 100.0 * hits[c] / counts[c] for c in order if c in counts}


def macro_average(values) -> float:
    vals = list(values.values()) if isinstance(values, Mapping) else list(values)
    if not vals:
        raise ValueError("macro average of an empty list")
    return math.fsum(vals) / len(vals)   # exactly rounded sum: independent of class order


def harmonic_mean(h_s: float, h_u: float) -> float:
    if h_s + h_u == 0:
        return 0.0
    return 2.0 * h_s * h_u / (h_s + h_u)


@dataclass
class EvalReport:
    mode: str
    ks: tuple[int, ...]
    per_class: dict[int, dict[str, float]]   # k -> class -> Hit@k
    counts: dict[str, int]
    macro: dict[int, float] = field(default_factory=dict)
    h_s: float | None = None
    h_u: float | None = None
    h: float | None = None
    config_digest: str = ""
    meta: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        """Flat metric name -> value map (the report file's key set)."""
        out = {}
        for k in self.ks:
            out[f"hit@{k}"] = self.macro[k]
            for c, v in self.per_class[k].items():
                out[f"hit@{k}/{c}"] = v
        if self.mode == GZSL:
            out.update({"H_s": self.h_s, "H_u": self.h_u, "H": self.h})
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "ks": list(self.ks),
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "counts": self.counts, "macro": {str(k): v for k, v in self.macro.items()},
            "H_s": self.h_s, "H_u": self.h_u, "H": self.h,
            "config_digest": self.config_digest, "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(d["mode"], tuple(d["ks"]),
                   {int(k): dict(v) for k, v in d["per_class"].items()},
                   dict(d["counts"]), {int(k): v for k, v in d["macro"].items()},
                   d["H_s"], d["H_u"], d["H"], d["config_digest"], dict(d.get("meta", {})))

    def render(self) -> str:
        lines = [f"mode\t{self.mode}", f"config_digest\t{self.config_digest}"]
        for key in sorted(self.metrics()):
            lines.append(f"{key}\t{self.metrics()[key]:.2f}")
        for key in sorted(self.meta):
            lines.append(f"meta.{key}\t{self.meta[key]}")
        return "\n".join(lines) + "\n"


def make_report(split: DatasetSplit, clf: SoftmaxClassifier, ks: Sequence[int] | None = None,
                config_digest: str = "", meta: Mapping | None = None) -> EvalReport:
    """ZSL: macro Hit@k over unseen classes.  GZSL: H_s, H_u at k=1 and H."""
    if set(clf.labels) != set(split.labels):
        raise ValueError(
            f"classifier labels {sorted(clf.labels)} do not match the {split.mode} label set")
    ks = tuple(ks) if ks is not None else (ZSL_KS if split.mode == ZSL else GZSL_KS)
    if max(ks) > len(clf.labels):
        raise ValueError(f"k={max(ks)} exceeds the {len(clf.labels)} candidate labels")
    test = split.test
    order = clf.rank(test.x) if len(test) else np.zeros((0, len(clf.labels)), dtype=int)
    rankings = [[clf.labels[i] for i in row[:max(ks)]] for row in order]
    classes = [c for c in split.labels if c in set(test.labels)]
    per_class = {k: per_class_hit_at_k(rankings, test.labels, k, classes) for k in ks}
    counts = {c: test.labels.count(c) for c in classes}
    report = EvalReport(split.mode, ks, per_class, counts, config_digest=config_digest,
                        meta=dict(meta or {}))
    report.macro = {k: macro_average(per_class[k]) for k in ks}
    if split.mode == GZSL:
        k1 = per_class[ks[0]]
        seen_vals = [v for c, v in k1.items() if c in set(split.seen)]
        unseen_vals = [v for c, v in k1.items() if c in set(split.unseen)]
        report.h_s = macro_average(seen_vals)
        report.h_u = macro_average(unseen_vals)
        report.h = harmonic_mean(report.h_s, report.h_u)
    if not report.config_digest:
        report.config_digest = hashlib.sha256(
            json.dumps([split.mode, list(ks), list(clf.labels)]).encode()).hexdigest()[:16]
    return report


_BLOCK = "# machine-readable"


def save_report(report: EvalReport, path) -> None:
    text = report.render() + _BLOCK + "\n" + json.dumps(report.to_dict(), sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_report(path) -> EvalReport:
    text = Path(path).read_text(encoding="utf-8")
    _, sep, block = text.partition(_BLOCK + "\n")
    if not sep:
        raise ValueError(f"{path}: no machine-readable block")
    return EvalReport.from_dict(json.loads(block))
