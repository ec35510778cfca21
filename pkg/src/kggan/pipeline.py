"""Experiment configuration and the end-to-end embed -> GAN -> classifier run.

A ``PipelineConfig`` has one section per stage.  It is plain JSON on disk,
validated strictly: unknown sections or keys are errors, so a typo never
silently falls back to a default.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping

import numpy as np

from .classifier import GZSL, ZSL, DatasetSplit, SoftmaxConfig, assemble_training_set, train_softmax
from .evaluation import EvalReport, make_report
from .gae import ClassEmbeddingTable, GaeConfig, train_gae
from .gan import GanCheckpoint, GanConfig, synthesize_unseen, train_gan
from .kg import KnowledgeGraph
from .synth import WorldSpec

__all__ = [
    "ConfigError", "PipelineConfig", "VIEWS", "embed_classes", "word_vector_table",
    "run_pipeline", "evaluate_checkpoint", "PipelineResult", "parse_override",
]

VIEWS = ("GC", "GA", "GC+GA", "word-vector-only")
_GAE_VIEWS = {"GC": "class", "GA": "attribute", "GC+GA": "both"}


class ConfigError(ValueError):
    pass


def _default_sections() -> dict[str, dict[str, Any]]:
    sections = {
        "world": asdict(WorldSpec()),
        "sample": {"n_train_per_seen": 200, "n_test_per_class": 100},
        "gae": asdict(GaeConfig()),
        "gan": GanConfig.desk().to_dict(),
        "classifier": asdict(SoftmaxConfig(lr=0.01, epochs=30)),
        "eval": {"mode": ZSL, "view": "GC+GA", "n_per_class": 300, "ks": None},
    }
    for section, key in _RESERVED:
        del sections[section][key]
    return sections


# keys derived from the run seed or the view selector; set them there instead
_RESERVED = {("gae", "views"), ("gae", "seed"), ("gan", "seed"), ("classifier", "seed"), ("world", "seed")}


@dataclass
class PipelineConfig:
    world: dict
    sample: dict
    gae: dict
    gan: dict
    classifier: dict
    eval: dict
    seed: int = 0

    @classmethod
    def default(cls, seed: int = 0) -> "PipelineConfig":
        return cls(**_default_sections(), seed=seed)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        cfg = cls.default()
        cfg.update(d)
        return cfg

    def update(self, d: Mapping) -> None:
        for section, value in d.items():
            if section == "seed":
                self.seed = _as_int("seed", value)
                continue
            if section not in _default_sections():
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(value, Mapping):
                raise ConfigError(f"section {section!r} must be an object")
            for key, v in value.items():
                self.set(section, key, v)

    def set(self, section: str, key: str, value: Any) -> None:
        defaults = _default_sections()
        if section not in defaults:
            raise ConfigError(f"unknown config section {section!r}")
        if (section, key) in _RESERVED:
            raise ConfigError(f"{section}.{key} is derived from the run seed / view selector")
        if key not in defaults[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        getattr(self, section)[key] = value

    def to_dict(self) -> dict:
        return {"seed": self.seed, **{f.name: copy.deepcopy(getattr(self, f.name))
                                      for f in fields(self) if f.name != "seed"}}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # typed views of each section; construction re-validates values

    def world_spec(self) -> WorldSpec:
        try:
            spec = WorldSpec.from_dict({**self.world, "seed": self.seed})
            spec.validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"world: {e}") from e
        return spec

    def gae_config(self) -> GaeConfig:
        view = self.view
        try:
            return GaeConfig(**{**self.gae, "views": _GAE_VIEWS.get(view, "both"), "seed": self.seed})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"gae: {e}") from e

    def gan_config(self) -> GanConfig:
        try:
            return GanConfig.from_dict({**self.gan, "seed": self.seed})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"gan: {e}") from e

    def classifier_config(self) -> SoftmaxConfig:
        try:
            return SoftmaxConfig(**{**self.classifier, "seed": self.seed})
        except TypeError as e:
            raise ConfigError(f"classifier: {e}") from e

    @property
    def view(self) -> str:
        v = self.eval["view"]
        if v not in VIEWS:
            raise ConfigError(f"eval.view must be one of {VIEWS}, got {v!r}")
        return v

    @property
    def mode(self) -> str:
        m = str(self.eval["mode"]).lower()
        if m not in (ZSL, GZSL):
            raise ConfigError(f"eval.mode must be zsl or gzsl, got {m!r}")
        return m

    def validate(self) -> None:
        self.world_spec()
        self.gae_config()
        self.gan_config()
        self.classifier_config()
        self.view, self.mode  # noqa: B018 - property access validates
        n = self.eval["n_per_class"]
        if not isinstance(n, int) or n < 1:
            raise ConfigError("eval.n_per_class must be a positive integer")
        for key in ("n_train_per_seen", "n_test_per_class"):
            if not isinstance(self.sample[key], int) or self.sample[key] < 0:
                raise ConfigError(f"sample.{key} must be a non-negative integer")


def _as_int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer")
    return value


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value``; the value is parsed as JSON when possible."""
    lhs, sep, rhs = text.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    try:
        value = json.loads(rhs)
    except json.JSONDecodeError:
        value = rhs
    return section, key, value


def word_vector_table(classes, class_vectors: Mapping[str, np.ndarray]) -> ClassEmbeddingTable:
    """Raw class name vectors in the g^c slot, empty g^a: the no-graph baseline."""
    missing = [c for c in classes if c not in class_vectors]
    if missing:
        raise ValueError(f"missing name vector for class(es): {missing[:5]}")
    gc = np.stack([np.asarray(class_vectors[c], dtype=float) for c in classes])
    return ClassEmbeddingTable(tuple(classes), gc, np.zeros((len(classes), 0)), provenance="word-vectors")


def embed_classes(kg: KnowledgeGraph, name_vectors: Mapping[str, np.ndarray], view: str,
                  gae: GaeConfig) -> ClassEmbeddingTable:
    """Class embedding table for the chosen view selector."""
    if view not in VIEWS:
        raise ValueError(f"view must be one of {VIEWS}, got {view!r}")
    if view == "word-vector-only":
        return word_vector_table(kg.classes, name_vectors)
    cfg = GaeConfig(**{**asdict(gae), "views": _GAE_VIEWS[view]})
    return train_gae(kg, name_vectors, cfg).table


@dataclass
class PipelineResult:
    table: ClassEmbeddingTable
    checkpoint: GanCheckpoint
    report: EvalReport


def run_pipeline(split: DatasetSplit, kg: KnowledgeGraph, name_vectors: Mapping[str, np.ndarray],
                 config: PipelineConfig, table: ClassEmbeddingTable | None = None) -> PipelineResult:
    """Embed, train the GAN on real seen rows, synthesise unseen rows, classify, report."""
    config.validate()
    if table is None:
        table = embed_classes(kg, name_vectors, config.view, config.gae_config())
    ckpt = train_gan(split.train, table, config.gan_config())
    report = evaluate_checkpoint(split, table, ckpt, config)
    return PipelineResult(table, ckpt, report)


def evaluate_checkpoint(split: DatasetSplit, table: ClassEmbeddingTable, ckpt: GanCheckpoint,
                        config: PipelineConfig, config_digest: str = "") -> EvalReport:
    mode = config.mode
    split = split.for_mode(mode)
    syn = synthesize_unseen(ckpt, table, split.unseen, config.eval["n_per_class"], seed=config.seed)
    feats, labels = assemble_training_set(mode, split.train, syn, split.seen, split.unseen)
    clf = train_softmax(feats, labels, config.classifier_config())
    ks = config.eval["ks"]
    return make_report(split, clf, ks, config_digest=config_digest or config.digest(),
                       meta={"view": config.view, "seed": config.seed})
