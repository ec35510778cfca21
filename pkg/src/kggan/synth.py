"""Synthetic zero-shot worlds with known class-conditional feature laws.

A world is a random taxonomy over labelled classes plus an attribute
pool.  Every attribute owns a sparse non-negative direction in feature
space; a class mean is a baseline activation plus the sum of its
attributes' directions plus a damped copy of its parent's mean.

Attributes come in families.  Each family drives its own block of
feature units, and each class draws its attributes mostly from one home
family, usually inherited from its parent.  The class-attribute links
therefore have structure a graph encoder can learn, and unseen classes
are pinned down by the graph alone.  The exact Bayes classifier gives a
ceiling for any learned pipeline.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from .classifier import GZSL, DatasetSplit
from .features import FeatureSet
from .kg import HAS_ATTRIBUTE, SUBCLASS, KnowledgeGraph, LabelSpace

__all__ = [
    "WorldSpec", "SyntheticWorld", "WorldSpecError",
    "generate_world", "sample_dataset", "bayes_oracle_accuracy", "class_means_from_kg",
]


class WorldSpecError(ValueError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    n_seen: int = 5
    n_unseen: int = 11
    n_attributes: int = 15
    feature_dim: int = 32
    name_dim: int = 32
    min_attributes: int = 3
    max_attributes: int = 6
    branching: int = 3
    parent_weight: float = 0.3
    attribute_density: float = 0.3   # fraction of feature units a latent part drives
    latent_rank: int = 0             # number of latent parts; 0 = one per attribute
    attribute_groups: int = 3        # attribute families; 0 = no family structure
    group_fidelity: float = 1.0      # chance an attribute is drawn from the class's home family
    group_inherit: float = 0.8       # chance a class keeps its parent's home family
    baseline: float = 2.0            # common activation level keeping features positive
    noise: float = 0.45              # isotropic feature noise std
    attribute_name_noise: float = 0.1
    class_name_noise: float = 0.6
    seed: int = 0

    @classmethod
    def mini_a(cls, scale: float = 0.2, **overrides) -> "WorldSpec":
        """Table-1 ImNet-A counts (25 seen / 55 unseen / 76 attributes) scaled down."""
        base = dict(n_seen=round(25 * scale), n_unseen=round(55 * scale),
                    n_attributes=round(76 * scale))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def mini_o(cls, scale: float = 0.5, **overrides) -> "WorldSpec":
        """Table-1 ImNet-O counts (10 seen / 25 unseen / 38 attributes) scaled down."""
        base = dict(n_seen=round(10 * scale), n_unseen=round(25 * scale),
                    n_attributes=round(38 * scale))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorldSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise WorldSpecError(f"unknown world spec keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        if self.n_seen < 2:
            raise WorldSpecError("a world needs at least 2 seen classes")
        if self.n_unseen < 1:
            raise WorldSpecError("a world needs at least 1 unseen class")
        if self.n_attributes < 6:
            raise WorldSpecError("the attribute pool must hold at least 6 attributes")
        if not 1 <= self.min_attributes <= self.max_attributes:
            raise WorldSpecError("need 1 <= min_attributes <= max_attributes")
        if self.max_attributes > self.n_attributes:
            raise WorldSpecError(
                f"classes need up to {self.max_attributes} attributes but the pool has {self.n_attributes}")
        if self.branching < 1 or self.feature_dim < 1 or self.name_dim < 1:
            raise WorldSpecError("branching and dimensions must be positive")
        if self.attribute_groups < 0 or self.attribute_groups > self.n_attributes:
            raise WorldSpecError("attribute_groups must lie in [0, n_attributes]")
        if not (0 <= self.group_fidelity <= 1 and 0 <= self.group_inherit <= 1):
            raise WorldSpecError("group_fidelity and group_inherit are probabilities")
        if min(self.noise, self.attribute_name_noise, self.class_name_noise) < 0:
            raise WorldSpecError("noise scales must be non-negative")


@dataclass(frozen=True)
class SyntheticWorld:
    spec: WorldSpec
    kg: KnowledgeGraph
    labels: LabelSpace
    directions: dict[str, np.ndarray]      # attribute -> feature-space direction
    means: dict[str, np.ndarray]           # class -> true feature mean
    name_vectors: dict[str, np.ndarray]    # class and attribute names -> vectors
    projection: np.ndarray = field(repr=False)  # (name_dim, feature_dim)

    @property
    def classes(self) -> tuple[str, ...]:
        return self.kg.classes

    def class_name_vectors(self) -> dict[str, np.ndarray]:
        return {c: self.name_vectors[c] for c in self.kg.classes}

    def attribute_name_vectors(self) -> dict[str, np.ndarray]:
        return {a: self.name_vectors[a] for a in self.kg.attributes}

    def manifest(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "seen": list(self.labels.seen),
            "unseen": list(self.labels.unseen),
            "means": {c: [float(v) for v in self.means[c]] for c in sorted(self.means)},
            "directions": {a: [float(v) for v in self.directions[a]] for a in sorted(self.directions)},
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.manifest(), sort_keys=True).encode()).hexdigest()[:16]


def class_means_from_kg(kg: KnowledgeGraph, directions: Mapping[str, np.ndarray],
                        parent_weight: float, baseline: float) -> dict[str, np.ndarray]:
    """Recompute every class mean from graph content and attribute directions."""
    dim = len(next(iter(directions.values())))
    parent = {kg.classes[a]: kg.classes[b] for a, b in kg.subclass}
    content: dict[str, np.ndarray] = {}

    def resolve(c: str) -> np.ndarray:
        if c not in content:
            v = np.zeros(dim)
            for a in kg.attributes_of(c):
                v = v + directions[a]
            if c in parent:
                v = v + parent_weight * resolve(parent[c])
            content[c] = v
        return content[c]

    return {c: baseline + resolve(c) for c in kg.classes}


def _random_tree(rng: np.random.Generator, n: int, branching: int) -> list[int]:
    """parent[i] for nodes 1..n-1 (node 0 is the root); at most ``branching`` children each."""
    parents = [-1]
    children = [0] * n
    for i in range(1, n):
        open_nodes = [j for j in range(i) if children[j] < branching]
        p = int(rng.choice(open_nodes))
        parents.append(p)
        children[p] += 1
    return parents


def _pick_attributes(rng, k: int, groups: np.ndarray, home: int, fidelity: float) -> list[int]:
    """``k`` distinct attribute indices, each from the home family with probability ``fidelity``."""
    chosen: list[int] = []
    for _ in range(k):
        inside = [a for a in np.flatnonzero(groups == home) if a not in chosen]
        outside = [a for a in np.flatnonzero(groups != home) if a not in chosen]
        pool = inside if inside and (not outside or rng.random() < fidelity) else outside
        chosen.append(int(rng.choice(pool)))
    return sorted(chosen)


def generate_world(spec: WorldSpec | None = None) -> SyntheticWorld:
    spec = spec or WorldSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_seen + spec.n_unseen
    width = max(2, len(str(n - 1)))
    class_names = [f"class_{i:0{width}d}" for i in range(n)]
    attr_width = max(2, len(str(spec.n_attributes - 1)))
    attr_names = [f"attr_{i:0{attr_width}d}" for i in range(spec.n_attributes)]

    parents = _random_tree(rng, n, spec.branching)
    triples = [(class_names[i], SUBCLASS, class_names[p]) for i, p in enumerate(parents) if p >= 0]
    n_groups = spec.attribute_groups
    attr_group = np.arange(spec.n_attributes) % n_groups if n_groups else np.zeros(spec.n_attributes, int)
    home = np.zeros(n, dtype=int)
    for i, p in enumerate(parents):
        if n_groups and (p < 0 or rng.random() >= spec.group_inherit):
            home[i] = rng.integers(n_groups)
        elif p >= 0:
            home[i] = home[p]
    for i, c in enumerate(class_names):
        k = int(rng.integers(spec.min_attributes, spec.max_attributes + 1))
        for a in _pick_attributes(rng, k, attr_group, home[i], spec.group_fidelity if n_groups else 0.0):
            triples.append((c, HAS_ATTRIBUTE, attr_names[a]))
    kg = KnowledgeGraph.from_triples(triples, classes=class_names, attributes=attr_names)

    rank = spec.latent_rank or spec.n_attributes
    blocks = np.arange(spec.feature_dim) % n_groups if n_groups else np.zeros(spec.feature_dim, int)
    parts = []
    for r in range(rank):
        mask = rng.random(spec.feature_dim) < spec.attribute_density
        if n_groups and not spec.latent_rank:
            mask &= blocks == attr_group[r]
        if not mask.any():
            mask[rng.integers(spec.feature_dim)] = True
        parts.append(mask * rng.uniform(0.5, 1.5, size=spec.feature_dim))
    parts = np.stack(parts)
    if spec.latent_rank:
        loadings = rng.dirichlet(np.full(rank, 0.5), size=spec.n_attributes)
        loadings *= rank ** 0.5
    else:
        loadings = np.eye(rank)
    directions = {a: loadings[i] @ parts for i, a in enumerate(attr_names)}
    means = class_means_from_kg(kg, directions, spec.parent_weight, spec.baseline)

    order = rng.permutation(n)
    seen = tuple(sorted(class_names[i] for i in order[:spec.n_seen]))
    unseen = tuple(sorted(class_names[i] for i in order[spec.n_seen:]))

    q, _ = np.linalg.qr(rng.standard_normal((max(spec.name_dim, spec.feature_dim),) * 2))
    projection = q[:spec.name_dim, :spec.feature_dim]
    names = {}
    for a in attr_names:
        names[a] = projection @ directions[a] + spec.attribute_name_noise * rng.standard_normal(spec.name_dim)
    for c in class_names:
        names[c] = (projection @ (means[c] - spec.baseline)
                    + spec.class_name_noise * rng.standard_normal(spec.name_dim))
    return SyntheticWorld(spec, kg, LabelSpace(seen, unseen), directions, means, names, projection)


def _draw(world: SyntheticWorld, labels: Sequence[str], n: int, rng, provenance: str) -> FeatureSet:
    rows, ys = [], []
    for y in labels:
        mu = world.means[y]
        rows.append(mu + world.spec.noise * rng.standard_normal((n, mu.size)))
        ys += [y] * n
    x = np.concatenate(rows) if rows else np.zeros((0, world.spec.feature_dim))
    return FeatureSet(x.reshape(-1, world.spec.feature_dim), tuple(ys), (provenance,) * len(ys))


def sample_dataset(world: SyntheticWorld, n_train_per_seen: int = 200, n_test_per_class: int = 100,
                   seed: int = 0) -> DatasetSplit:
    """Real seen training rows plus test rows for every class (GZSL split)."""
    rng = np.random.default_rng(seed)
    train = _draw(world, world.labels.seen, n_train_per_seen, rng, "seen")
    test_seen = _draw(world, world.labels.seen, n_test_per_class, rng, "seen")
    test_unseen = _draw(world, world.labels.unseen, n_test_per_class, rng, "unseen")
    return DatasetSplit(train, FeatureSet.concat([test_seen, test_unseen]),
                        world.labels.seen, world.labels.unseen, GZSL)


def bayes_oracle_accuracy(world: SyntheticWorld, test: FeatureSet,
                          candidates: Sequence[str] | None = None, seed: int = 0) -> dict[str, float]:
    """Per-class top-1 accuracy (%) of the maximum-likelihood rule under the true laws.

    Classes share an isotropic covariance, so the rule is nearest true mean;
    exact ties are broken uniformly at random.
    """
    candidates = tuple(candidates) if candidates is not None else world.classes
    means = np.stack([world.means[c] for c in candidates])
    rng = np.random.default_rng(seed)
    d2 = ((test.x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    correct: dict[str, list[int]] = {}
    for row, y in zip(d2, test.labels):
        best = np.flatnonzero(row <= row.min() + 1e-12 * max(1.0, row.min()))
        pick = candidates[int(best[0] if len(best) == 1 else rng.choice(best))]
        correct.setdefault(y, []).append(pick == y)
    return {y: 100.0 * float(np.mean(v)) for y, v in correct.items()}


def with_noise(spec: WorldSpec, noise: float) -> WorldSpec:
    return replace(spec, noise=noise)
