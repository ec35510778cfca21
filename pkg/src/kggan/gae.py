"""Two-view graph auto-encoder producing class embeddings.

Each view (taxonomy, class-attribute) has its own GCN encoder and its
own inner-product link decoder.  A class embedding is the class-view
vector followed by the attribute-view vector.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kg import DecoderEdges, GraphView, KnowledgeGraph, edge_sets_for_decoder, extract_views
from .nn import Adam, ParameterSet, glorot_uniform

log = logging.getLogger(__name__)

__all__ = [
    "GaeConfig", "GcnLayer", "ClassEmbeddingTable", "TrainingError",
    "init_gcn_params", "gcn_layer", "encode", "encode_view", "concat_embedding",
    "reconstruction_loss", "decoder_scores", "train_gae", "train_view",
    "load_embeddings", "save_embeddings", "link_prediction", "roc_auc", "view_inputs",
]

SCORE_CLAMP = 30.0


class TrainingError(RuntimeError):
    pass


@dataclass
class GaeConfig:
    layers: int = 2
    dim_class: int = 50
    dim_attribute: int = 50
    hidden: int = 64
    lr: float = 0.001
    epochs: int = 300
    negative_policy: str = "auto"
    negative_ratio: int = 5
    views: str = "both"  # both | class | attribute
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.dim_class < 0 or self.dim_attribute < 0 or self.hidden <= 0:
            raise ValueError("embedding dimensions must be non-negative and hidden width positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.layers < 1:
            raise ValueError("at least one GCN layer is required")
        if self.views not in ("both", "class", "attribute"):
            raise ValueError(f"views must be both|class|attribute, got {self.views!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class GcnLayer:
    weight: Tensor  # (out, in), applied to the neighbour mean
    bias: Tensor    # (out, in), applied to the node's own vector
    activation: str = "relu"  # relu | identity


def init_gcn_params(rng: np.random.Generator, dims: Sequence[int], prefix: str,
                    dtype=np.float64) -> ParameterSet:
    params = ParameterSet()
    for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        params.create(f"{prefix}.W{k}", glorot_uniform(rng, d_out, d_in, dtype))
        params.create(f"{prefix}.B{k}", glorot_uniform(rng, d_out, d_in, dtype))
    return params


def layers_from(params: ParameterSet, prefix: str) -> list[GcnLayer]:
    n = sum(1 for k in params if k.startswith(f"{prefix}.W"))
    return [GcnLayer(params[f"{prefix}.W{k}"], params[f"{prefix}.B{k}"],
                     "identity" if k == n else "relu") for k in range(1, n + 1)]


def gcn_layer(prev: Tensor, view: GraphView | np.ndarray, layer: GcnLayer) -> Tensor:
    """act(W · mean_{j in N_i} prev_j + B · prev_i) for every node i.

    ``view`` may be a precomputed row-normalised adjacency matrix.
    """
    adj = view.mean_adjacency() if isinstance(view, GraphView) else view
    prev = prev if isinstance(prev, Tensor) else Tensor(prev)
    if prev.ndim != 2 or prev.shape[0] != adj.shape[0]:
        raise ad.ShapeError(f"gcn_layer: input {prev.shape} does not cover {adj.shape[0]} nodes")
    if layer.weight.shape[1] != prev.shape[1] or layer.bias.shape != layer.weight.shape:
        raise ad.ShapeError(
            f"gcn_layer: weight {layer.weight.shape}/bias {layer.bias.shape} "
            f"incompatible with input dimension {prev.shape[1]}")
    agg = ad.matmul(Tensor(adj.astype(prev.dtype)), prev)
    out = ad.matmul(agg, ad.transpose(layer.weight)) + ad.matmul(prev, ad.transpose(layer.bias))
    if layer.activation == "relu":
        return ad.relu(out)
    if layer.activation == "identity":
        return out
    raise ValueError(f"unknown activation {layer.activation!r}")


def encode_view(inputs: np.ndarray | Tensor, view: GraphView, layers: Sequence[GcnLayer]) -> Tensor:
    """Last-layer vectors for every node of ``view``."""
    adj = view.mean_adjacency()
    h = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    for layer in layers:
        h = gcn_layer(h, adj, layer)
    return h


def view_inputs(view: GraphView, name_vectors: Mapping[str, np.ndarray], dtype=np.float64,
                normalize: bool = False) -> np.ndarray:
    """Stacked node vectors in view order.

    With ``normalize`` the matrix is divided by its mean row norm.  One
    global scale keeps relative magnitudes; training uses it because raw
    word vectors can push initial decoder scores past the clamp, where the
    loss has no gradient.
    """
    missing = [n for n in view.nodes if n not in name_vectors]
    if missing:
        raise ValueError(f"missing name vector for node(s): {missing[:5]}")
    dims = {np.asarray(name_vectors[n]).size for n in view.nodes}
    if len(dims) != 1:
        raise ValueError(f"{view.kind} view name vectors have mixed dimensions {sorted(dims)}")
    x = np.stack([np.asarray(name_vectors[n], dtype=np.float64).ravel() for n in view.nodes])
    scale = np.linalg.norm(x, axis=1).mean() if normalize and len(x) else 0.0
    return (x / scale if scale > 0 else x).astype(dtype)


def encode(class_view: GraphView | None, attribute_view: GraphView | None,
           name_vectors: Mapping[str, np.ndarray],
           class_layers: Sequence[GcnLayer] = (), attribute_layers: Sequence[GcnLayer] = (),
           normalize: bool = False) -> tuple[np.ndarray | None, np.ndarray | None]:
    """(g^c table, g^a table), each with one row per class node.

    Pass ``normalize=True`` to reproduce the tables of ``train_gae``.
    """
    gc = ga = None
    if class_view is not None:
        gc = encode_view(view_inputs(class_view, name_vectors, normalize=normalize),
                         class_view, class_layers).data
    if attribute_view is not None:
        h = encode_view(view_inputs(attribute_view, name_vectors, normalize=normalize),
                        attribute_view, attribute_layers)
        ga = h.data[: attribute_view.n_classes]
    return gc, ga


def concat_embedding(gc, ga) -> np.ndarray:
    return np.concatenate([np.asarray(gc, dtype=float).ravel(), np.asarray(ga, dtype=float).ravel()])


def _select(n: int, idx: np.ndarray, dtype) -> Tensor:
    sel = np.zeros((len(idx), n), dtype=dtype)
    sel[np.arange(len(idx)), idx] = 1.0
    return Tensor(sel)


def decoder_scores(emb: Tensor, pairs: np.ndarray) -> Tensor:
    """Inner products emb_i . emb_j for each row (i, j) of ``pairs``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    left = ad.matmul(_select(emb.shape[0], pairs[:, 0], emb.dtype), emb)
    right = ad.matmul(_select(emb.shape[0], pairs[:, 1], emb.dtype), emb)
    return ad.sum(left * right, axis=1)


def reconstruction_loss(emb: Tensor | np.ndarray, positives, negatives, weight: float) -> Tensor:
    """-sum log sig(s_pos) - w * sum log sig(-s_neg), scores clamped to +-30."""
    emb = emb if isinstance(emb, Tensor) else Tensor(emb)
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 2)
    if len(positives) == 0:
        raise ValueError("reconstruction_loss needs at least one positive pair")
    s_pos = ad.clip(decoder_scores(emb, positives), -SCORE_CLAMP, SCORE_CLAMP)
    loss = ad.neg(ad.sum(ad.log_sigmoid(s_pos)))
    if len(negatives):
        s_neg = ad.clip(decoder_scores(emb, negatives), -SCORE_CLAMP, SCORE_CLAMP)
        loss = loss - weight * ad.sum(ad.log_sigmoid(ad.neg(s_neg)))
    return loss


@dataclass
class ViewModel:
    view: GraphView
    params: ParameterSet
    prefix: str
    edges: DecoderEdges
    losses: list[float] = field(default_factory=list)

    def layers(self) -> list[GcnLayer]:
        return layers_from(self.params, self.prefix)


def train_view(view: GraphView, name_vectors: Mapping[str, np.ndarray], out_dim: int,
               config: GaeConfig, prefix: str, seed: int, edges: DecoderEdges | None = None) -> ViewModel:
    dtype = np.dtype(config.dtype)
    x = view_inputs(view, name_vectors, dtype, normalize=True)
    dims = [x.shape[1]] + [config.hidden] * (config.layers - 1) + [out_dim]
    rng = np.random.default_rng(seed)
    params = init_gcn_params(rng, dims, prefix, dtype)
    if edges is None:
        edges = edge_sets_for_decoder(view, config.negative_policy, config.negative_ratio, seed=seed)
    model = ViewModel(view, params, prefix, edges)
    opt = Adam(params, lr=config.lr, betas=(0.9, 0.999))
    adj = view.mean_adjacency().astype(dtype)
    xt = Tensor(x)
    for epoch in range(config.epochs):
        h = xt
        for layer in model.layers():
            h = gcn_layer(h, adj, layer)
        loss = reconstruction_loss(h, edges.positives, edges.negatives, edges.weight)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"{view.kind} view GAE loss diverged at epoch {epoch}")
        model.losses.append(value)
        opt.step(params.grads(loss))
    log.debug("%s view: %d epochs, final loss %s", view.kind, config.epochs,
              model.losses[-1] if model.losses else None)
    return model


@dataclass(frozen=True)
class ClassEmbeddingTable:
    classes: tuple[str, ...]
    gc: np.ndarray  # (n, dim_c)
    ga: np.ndarray  # (n, dim_a)
    provenance: str = ""

    def __post_init__(self):
        n = len(self.classes)
        if self.gc.shape[0] != n or self.ga.shape[0] != n:
            raise ValueError("embedding tables must have one row per class")

    @property
    def dim_c(self) -> int:
        return self.gc.shape[1]

    @property
    def dim_a(self) -> int:
        return self.ga.shape[1]

    @property
    def dim(self) -> int:
        return self.dim_c + self.dim_a

    @property
    def g(self) -> np.ndarray:
        return np.concatenate([self.gc, self.ga], axis=1)

    def index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.classes)}

    def vector(self, name: str) -> np.ndarray:
        i = self.index()[name]
        return np.concatenate([self.gc[i], self.ga[i]])

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        idx = self.index()
        missing = [n for n in names if n not in idx]
        if missing:
            raise KeyError(f"no embedding for class(es): {missing}")
        return self.g[[idx[n] for n in names]]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.classes).encode())
        h.update(np.ascontiguousarray(self.gc, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.ga, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, ClassEmbeddingTable):
            return NotImplemented
        return (self.classes == other.classes and np.array_equal(self.gc, other.gc)
                and np.array_equal(self.ga, other.ga))

    __hash__ = None


@dataclass
class GaeResult:
    table: ClassEmbeddingTable
    models: dict[str, ViewModel]

    @property
    def losses(self) -> dict[str, list[float]]:
        return {k: m.losses for k, m in self.models.items()}


def train_gae(kg: KnowledgeGraph, name_vectors: Mapping[str, np.ndarray],
              config: GaeConfig | None = None) -> GaeResult:
    """Train the selected view encoders independently and tabulate g = [g^c; g^a]."""
    config = config or GaeConfig()
    class_view, attr_view = extract_views(kg)
    n = len(kg.classes)
    models: dict[str, ViewModel] = {}
    gc = np.zeros((n, 0))
    ga = np.zeros((n, 0))
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    if config.views in ("both", "class") and config.dim_class > 0:
        m = train_view(class_view, name_vectors, config.dim_class, config, "class",
                       int(seeds[0].generate_state(1)[0]))
        models["class"] = m
        gc = encode_view(view_inputs(class_view, name_vectors, np.dtype(config.dtype), normalize=True),
                         class_view, m.layers()).data.astype(np.float64)
    if config.views in ("both", "attribute") and config.dim_attribute > 0:
        m = train_view(attr_view, name_vectors, config.dim_attribute, config, "attribute",
                       int(seeds[1].generate_state(1)[0]))
        models["attribute"] = m
        h = encode_view(view_inputs(attr_view, name_vectors, np.dtype(config.dtype), normalize=True),
                        attr_view, m.layers()).data.astype(np.float64)
        ga = h[:n]
    table = ClassEmbeddingTable(kg.classes, gc, ga, provenance=config.digest())
    return GaeResult(table, models)


def roc_auc(pos_scores, neg_scores) -> float:
    """P(score of a random positive > score of a random negative), ties count half."""
    pos = np.asarray(pos_scores, dtype=float)[:, None]
    neg = np.asarray(neg_scores, dtype=float)[None, :]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    return float(np.mean((pos > neg) + 0.5 * (pos == neg)))


@dataclass
class LinkPrediction:
    auc: float
    pos_scores: np.ndarray
    neg_scores: np.ndarray


def link_prediction(view: GraphView, name_vectors: Mapping[str, np.ndarray], out_dim: int,
                    config: GaeConfig, holdout: float = 0.2, seed: int = 0) -> LinkPrediction:
    """Hide a fraction of the view's links, train on the rest, score hidden links.

    Hidden positives are compared with an equal number of never-linked
    admissible pairs; both are excluded from the training negatives.
    """
    rng = np.random.default_rng(seed)
    edges = np.array(view.edges, dtype=np.int64)
    n_test = max(1, int(round(holdout * len(edges))))
    if n_test >= len(edges):
        raise ValueError("holdout leaves no training links")
    perm = rng.permutation(len(edges))
    test_pos, train_pos = edges[perm[:n_test]], edges[perm[n_test:]]
    linked = {tuple(e) for e in view.edges}
    if view.kind == "class":
        pairs = [(i, j) for i in range(view.n_nodes) for j in range(i + 1, view.n_nodes)]
    else:
        pairs = [(i, j) for i in range(view.n_classes) for j in range(view.n_classes, view.n_nodes)]
    free = np.array([p for p in pairs if p not in linked], dtype=np.int64)
    if len(free) < n_test + 1:
        raise ValueError("too few unlinked pairs to hold out negatives")
    pick = rng.permutation(len(free))
    test_neg, train_neg = free[pick[:n_test]], free[pick[n_test:]]
    train_view_ = view.without_edges(test_pos)
    edges_ = DecoderEdges(train_pos, train_neg, len(train_pos) / len(train_neg))
    model = train_view(train_view_, name_vectors, out_dim, config, view.kind, seed, edges=edges_)
    x = view_inputs(train_view_, name_vectors, np.dtype(config.dtype), normalize=True)
    emb = encode_view(x, train_view_, model.layers()).data.astype(np.float64)
    score = lambda pairs: np.einsum("ij,ij->i", emb[pairs[:, 0]], emb[pairs[:, 1]])  # noqa: E731
    pos, neg = score(test_pos), score(test_neg)
    return LinkPrediction(roc_auc(pos, neg), pos, neg)


def _fmt(row: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in row)


def save_embeddings(table: ClassEmbeddingTable, path) -> None:
    lines = [f"class_embeddings {len(table.classes)} {table.dim_c} {table.dim_a}"]
    for i, name in enumerate(table.classes):
        lines.append(f"{name}\t{_fmt(table.gc[i])}\t{_fmt(table.ga[i])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path) -> ClassEmbeddingTable:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "class_embeddings":
            raise ValueError("expected header 'class_embeddings <n> <dim_c> <dim_a>'")
        n, dc, da = map(int, header[1:])
        names, gc, ga = [], [], []
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected name, g^c and g^a fields")
            vc = [float(v) for v in parts[1].split(",")] if parts[1] else []
            va = [float(v) for v in parts[2].split(",")] if parts[2] else []
            if len(vc) != dc or len(va) != da:
                raise ValueError(f"line {lineno}: dimensions {len(vc)}/{len(va)}, expected {dc}/{da}")
            names.append(parts[0])
            gc.append(vc)
            ga.append(va)
    if len(names) != n:
        raise ValueError(f"expected {n} rows, found {len(names)}")
    return ClassEmbeddingTable(tuple(names), np.array(gc, dtype=float).reshape(n, dc),
                               np.array(ga, dtype=float).reshape(n, da))
