"""Conditional WGAN-GP that synthesises visual features from class embeddings.

Generator:  x_hat = relu(W2 relu(W1 [z; g] + b1) + b2)
Critic:     D(x, g) = w2 . leaky_relu(W1 [x; g] + b1) + b2

The generator loss adds a classification term from a frozen softmax
trained on real seen features; the critic loss carries a gradient
penalty on points interpolated between real and synthetic features.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .classifier import SoftmaxClassifier, SoftmaxConfig, train_softmax
from .features import FeatureSet
from .gae import ClassEmbeddingTable
from .nn import Adam, ParameterSet, glorot_uniform

__all__ = [
    "GanConfig", "SeenClassifier", "GanCheckpoint", "GanTrainingError",
    "init_generator", "init_discriminator", "generator_forward", "critic_forward",
    "pretrain_seen_classifier", "generate", "interpolate", "gradient_penalty",
    "generator_loss", "discriminator_loss", "train_gan", "synthesize_unseen",
    "save_checkpoint", "load_checkpoint",
]

CHECKPOINT_MAGIC = b"KGGANCKPT"
CHECKPOINT_VERSION = 1


class GanTrainingError(RuntimeError):
    pass


@dataclass
class GanConfig:
    noise_dim: int = 100
    feature_dim: int = 2048
    hidden_g: int = 4096
    hidden_d: int = 4096
    lam: float = 0.01    # classification-loss weight
    beta: float = 10.0   # gradient-penalty weight
    lr: float = 0.0001
    adam_betas: tuple[float, float] = (0.5, 0.9)
    n_critic: int = 5
    batch_size: int = 64
    steps: int = 2000    # generator updates
    leak: float = 0.2
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0
    init: str = "data"   # "data": fold real-feature mean/std into the outer layers; "glorot": plain

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        for name in ("noise_dim", "feature_dim", "hidden_g", "hidden_d", "n_critic", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.init not in ("data", "glorot"):
            raise ValueError("init must be 'data' or 'glorot'")

    @classmethod
    def desk(cls, **overrides) -> "GanConfig":
        """Desk-scale sizes for synthetic worlds.

        The step size is raised to 1e-3: at 1e-4 the generator is still far
        from the seen-class means after a desk-sized number of steps.
        """
        base = dict(feature_dim=32, hidden_g=128, hidden_d=128, lr=1e-3, steps=1000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GanConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GAN config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SeenClassifier:
    clf: SoftmaxClassifier
    frozen: bool = True

    @property
    def labels(self) -> tuple[str, ...]:
        return self.clf.labels

    @property
    def theta(self) -> np.ndarray:
        return self.clf.theta


def init_generator(rng: np.random.Generator, noise_dim: int, emb_dim: int, hidden: int,
                   feature_dim: int, dtype=np.float32) -> ParameterSet:
    return ParameterSet({
        "G.W1": glorot_uniform(rng, hidden, noise_dim + emb_dim, dtype),
        "G.b1": np.zeros(hidden, dtype=dtype),
        "G.W2": glorot_uniform(rng, feature_dim, hidden, dtype),
        "G.b2": np.zeros(feature_dim, dtype=dtype),
    })


def init_discriminator(rng: np.random.Generator, feature_dim: int, emb_dim: int, hidden: int,
                       dtype=np.float32) -> ParameterSet:
    return ParameterSet({
        "D.W1": glorot_uniform(rng, hidden, feature_dim + emb_dim, dtype),
        "D.b1": np.zeros(hidden, dtype=dtype),
        "D.W2": glorot_uniform(rng, 1, hidden, dtype),
        "D.b2": np.zeros(1, dtype=dtype),
    })


def _as_tensor(v, dtype) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=dtype))


def generator_forward(params: Mapping[str, Tensor], z, g) -> Tensor:
    dtype = params["G.W1"].dtype
    z, g = _as_tensor(z, dtype), _as_tensor(g, dtype)
    expected = params["G.W1"].shape[1]
    if z.ndim != 2 or g.ndim != 2 or z.shape[0] != g.shape[0] or z.shape[1] + g.shape[1] != expected:
        raise ad.ShapeError(f"generator: noise {z.shape} + embedding {g.shape} != input width {expected}")
    h = ad.relu(ad.matmul(ad.concat([z, g], axis=1), ad.transpose(params["G.W1"])) + params["G.b1"])
    return ad.relu(ad.matmul(h, ad.transpose(params["G.W2"])) + params["G.b2"])


def critic_forward(params: Mapping[str, Tensor], x, g, leak: float = 0.2) -> Tensor:
    """Critic values, shape (batch,)."""
    dtype = params["D.W1"].dtype
    x, g = _as_tensor(x, dtype), _as_tensor(g, dtype)
    expected = params["D.W1"].shape[1]
    if x.ndim != 2 or g.ndim != 2 or x.shape[0] != g.shape[0] or x.shape[1] + g.shape[1] != expected:
        raise ad.ShapeError(f"critic: feature {x.shape} + embedding {g.shape} != input width {expected}")
    h = ad.leaky_relu(ad.matmul(ad.concat([x, g], axis=1), ad.transpose(params["D.W1"])) + params["D.b1"],
                      leak)
    out = ad.matmul(h, ad.transpose(params["D.W2"])) + params["D.b2"]
    return ad.reshape(out, (x.shape[0],))


def generate(z, g_y, params: Mapping[str, Tensor]) -> np.ndarray:
    """Synthetic feature(s) for noise ``z`` and class embedding ``g_y``.

    Accepts single vectors or batches (rows).
    """
    z = np.asarray(z)
    g_y = np.asarray(g_y)
    single = z.ndim == 1
    with ad.no_grad():
        out = generator_forward(params, np.atleast_2d(z), np.atleast_2d(g_y)).data
    return out[0] if single else out


def interpolate(x, x_hat, eps):
    """eps * x + (1 - eps) * x_hat; ``eps`` broadcasts per row."""
    if isinstance(x, Tensor) or isinstance(x_hat, Tensor):
        return x * eps + x_hat * (1.0 - np.asarray(eps))
    x, x_hat = np.asarray(x), np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ad.ShapeError(f"interpolate: {x.shape} vs {x_hat.shape}")
    return eps * x + (1.0 - np.asarray(eps)) * x_hat


def gradient_penalty(d_params: Mapping[str, Tensor], x_tilde, g, leak: float = 0.2) -> Tensor:
    """mean over rows of (||grad_x D(x_tilde, g)||_2 - 1)^2, differentiable in D's parameters."""
    xt = Tensor(np.asarray(x_tilde.data if isinstance(x_tilde, Tensor) else x_tilde,
                           dtype=d_params["D.W1"].dtype), requires_grad=True)
    d = critic_forward(d_params, xt, g, leak)
    (gx,) = ad.grad(ad.sum(d), [xt], create_graph=True)
    norms = ad.l2_norm(gx, axis=1)
    return ad.mean(ad.square(norms - 1.0))


def _log_prob_of(theta: np.ndarray, x: Tensor, y_idx: np.ndarray) -> Tensor:
    logp = ad.log_softmax(ad.matmul(x, Tensor(theta.T.astype(x.dtype))), axis=1)
    onehot = np.zeros(logp.shape, dtype=x.dtype)
    onehot[np.arange(len(y_idx)), y_idx] = 1.0
    return ad.sum(logp * onehot, axis=1)


def generator_loss(z, labels: Sequence[str], table: ClassEmbeddingTable | np.ndarray,
                   g_params, d_params, seen_clf: SeenClassifier, lam: float,
                   leak: float = 0.2) -> Tensor:
    """-mean D(x_hat, g) - lam * mean log P(y | x_hat), with x_hat = G(z, g).

    ``table`` may be a pre-gathered embedding matrix with one row per label.
    """
    index = {y: i for i, y in enumerate(seen_clf.labels)}
    bad = [y for y in labels if y not in index]
    if bad:
        raise ValueError(f"generator loss labels outside the seen set: {sorted(set(bad))}")
    g = table.matrix(labels) if isinstance(table, ClassEmbeddingTable) else np.asarray(table)
    x_hat = generator_forward(g_params, z, g)
    loss = ad.neg(ad.mean(critic_forward(d_params, x_hat, g, leak)))
    if lam:
        y_idx = np.array([index[y] for y in labels])
        loss = loss - lam * ad.mean(_log_prob_of(seen_clf.theta, x_hat, y_idx))
    return loss


def discriminator_loss(x, g, x_hat, eps, d_params, beta: float, leak: float = 0.2) -> Tensor:
    """mean D(x, g) - mean D(x_hat, g) - beta * GP(x_tilde); the critic maximises it.

    ``x_hat`` is treated as a constant (generator parameters get no gradient).
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    x_hat = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat)
    x = np.asarray(x)
    eps = np.asarray(eps, dtype=float).reshape(-1, 1) if np.ndim(eps) else float(eps)
    real = ad.mean(critic_forward(d_params, x, g, leak))
    fake = ad.mean(critic_forward(d_params, x_hat, g, leak))
    loss = real - fake
    if beta:
        loss = loss - beta * gradient_penalty(d_params, interpolate(x, x_hat, eps), g, leak)
    return loss


def pretrain_seen_classifier(features: FeatureSet, labels: Sequence[str] | None = None,
                             config: SoftmaxConfig | None = None) -> SeenClassifier:
    """Linear softmax on real seen features, returned frozen."""
    config = config or SoftmaxConfig(lr=0.01, epochs=100, batch_size=64)
    labels = tuple(labels) if labels is not None else features.label_set
    counts = {y: 0 for y in labels}
    for y in features.labels:
        counts[y] = counts.get(y, 0) + 1
    if len(labels) < 2:
        raise ValueError("the seen classifier needs at least two seen classes")
    empty = [y for y, c in counts.items() if c == 0]
    if empty:
        raise ValueError(f"seen classes without samples: {empty}")
    return SeenClassifier(train_softmax(features, labels, config), frozen=True)


@dataclass
class GanCheckpoint:
    config: GanConfig
    generator: dict[str, np.ndarray]
    discriminator: dict[str, np.ndarray]
    seen_classifier: SeenClassifier
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list, compare=False, repr=False)

    @property
    def emb_dim(self) -> int:
        return self.generator["G.W1"].shape[1] - self.config.noise_dim

    def generator_params(self) -> ParameterSet:
        return ParameterSet(self.generator)

    def discriminator_params(self) -> ParameterSet:
        return ParameterSet(self.discriminator)

    def arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.generator)
        out.update(self.discriminator)
        out["C.theta"] = self.seen_classifier.theta
        out.update({f"opt/{k}": v for k, v in self.optimizer.items()})
        return out


def _data_dependent_init(gp: ParameterSet, dp: ParameterSet, x: np.ndarray) -> None:
    """Rescale freshly initialised layers as if features were standardised.

    The critic's first layer sees (x - mu) / sd, so its leaky kinks fall
    inside the data range rather than near the origin; the generator's
    output layer emits mu + sd * (...), so fakes start on top of the data.
    Only initial values change; the architecture does not.
    """
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 1e-6, sd, 1.0)
    f = x.shape[1]
    w1 = dp["D.W1"].data.copy()
    w1[:, :f] = w1[:, :f] / sd
    dp.assign("D.W1", w1)
    dp.assign("D.b1", dp["D.b1"].data - w1[:, :f] @ mu)
    gp.assign("G.W2", gp["G.W2"].data * sd[:, None])
    gp.assign("G.b2", gp["G.b2"].data + mu)


def _rng_from_state(state: dict, seed: int) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if state:
        rng.bit_generator.state = state
    return rng


def train_gan(seen: FeatureSet, table: ClassEmbeddingTable, config: GanConfig,
              seen_clf: SeenClassifier | None = None, resume: GanCheckpoint | None = None,
              on_checkpoint: Callable[[GanCheckpoint], None] | None = None) -> GanCheckpoint:
    """Alternate ``n_critic`` critic updates with one generator update.

    The returned checkpoint's ``history`` holds L_G, L_D and GP per step.
    """
    dtype = np.dtype(config.dtype)
    labels = seen.label_set
    idx = table.index()
    missing = [y for y in labels if y not in idx]
    if missing:
        raise ValueError(f"seen classes without a class embedding: {missing}")
    if seen.dim != config.feature_dim:
        raise ValueError(f"features have dimension {seen.dim}, config says {config.feature_dim}")
    if seen_clf is None and resume is not None:
        seen_clf = resume.seen_classifier
    elif seen_clf is None and len(labels) == 1:
        # a one-class softmax is identically 1, so the classification term vanishes
        seen_clf = SeenClassifier(SoftmaxClassifier(labels, np.zeros((1, seen.dim))))
    elif seen_clf is None:
        seen_clf = pretrain_seen_classifier(seen, labels)
    emb = table.matrix(labels).astype(dtype)
    label_idx = {y: i for i, y in enumerate(labels)}
    y_all = np.array([label_idx[y] for y in seen.labels])
    x_all = seen.x.astype(dtype)
    clf_index = {y: i for i, y in enumerate(seen_clf.labels)}
    clf_rows = np.array([clf_index[y] for y in labels])
    theta = seen_clf.theta.astype(dtype)

    if resume is None:
        rng = np.random.default_rng(config.seed)
        gp = init_generator(rng, config.noise_dim, emb.shape[1], config.hidden_g, config.feature_dim, dtype)
        dp = init_discriminator(rng, config.feature_dim, emb.shape[1], config.hidden_d, dtype)
        if config.init == "data":
            _data_dependent_init(gp, dp, x_all)
        start = 0
    else:
        rng = _rng_from_state(resume.rng_state, config.seed)
        gp = ParameterSet({k: v.astype(dtype) for k, v in resume.generator.items()})
        dp = ParameterSet({k: v.astype(dtype) for k, v in resume.discriminator.items()})
        start = resume.step
    opt_g = Adam(gp, lr=config.lr, betas=config.adam_betas)
    opt_d = Adam(dp, lr=config.lr, betas=config.adam_betas)
    if resume is not None and resume.optimizer:
        opt_g.load_state({k[2:]: v for k, v in resume.optimizer.items() if k.startswith("G/")})
        opt_d.load_state({k[2:]: v for k, v in resume.optimizer.items() if k.startswith("D/")})

    def snapshot(step: int, history: list[dict]) -> GanCheckpoint:
        opt = {f"G/{k}": v.copy() for k, v in opt_g.state().items()}
        opt.update({f"D/{k}": v.copy() for k, v in opt_d.state().items()})
        return GanCheckpoint(config, gp.arrays(), dp.arrays(), seen_clf, step,
                             dict(rng.bit_generator.state), opt, list(history))

    n, bs = len(y_all), config.batch_size
    history: list[dict] = list(resume.history) if resume is not None else []
    for step in range(start, config.steps):
        for _ in range(config.n_critic):
            b = rng.integers(0, n, size=bs)
            z = rng.standard_normal((bs, config.noise_dim)).astype(dtype)
            eps = rng.uniform(0.0, 1.0, size=(bs, 1)).astype(dtype)
            g = emb[y_all[b]]
            with ad.no_grad():
                x_hat = generator_forward(gp, z, g).data
            real = ad.mean(critic_forward(dp, x_all[b], g, config.leak))
            fake = ad.mean(critic_forward(dp, x_hat, g, config.leak))
            penalty = gradient_penalty(dp, interpolate(x_all[b], x_hat, eps), g, config.leak)
            l_d = real - fake - config.beta * penalty
            opt_d.step(dp.grads(ad.neg(l_d)))
        b = rng.integers(0, n, size=bs)
        z = rng.standard_normal((bs, config.noise_dim)).astype(dtype)
        g = emb[y_all[b]]
        x_hat = generator_forward(gp, z, g)
        l_g = ad.neg(ad.mean(critic_forward(dp, x_hat, g, config.leak)))
        if config.lam:
            l_g = l_g - config.lam * ad.mean(_log_prob_of(theta, x_hat, clf_rows[y_all[b]]))
        record = {"step": step, "L_G": float(l_g.data), "L_D": float(l_d.data),
                  "GP": float(penalty.data)}
        if not all(np.isfinite(v) for v in record.values()):
            raise GanTrainingError(f"non-finite loss at step {step}: {record}")
        opt_g.step(gp.grads(l_g))
        history.append(record)
        if on_checkpoint and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            on_checkpoint(snapshot(step + 1, history))
    return snapshot(max(start, config.steps), history)


def synthesize_unseen(ckpt: GanCheckpoint, table: ClassEmbeddingTable, unseen: Sequence[str],
                      n_per_class: int = 300, seed: int = 0, shared_noise: bool = False) -> FeatureSet:
    """``n_per_class`` synthetic rows per unseen class, provenance ``synthetic``.

    Each class draws from its own seeded noise stream unless
    ``shared_noise`` is set, in which case every class sees the same noise.
    """
    idx = table.index()
    missing = [y for y in unseen if y not in idx]
    if missing:
        raise ValueError(f"unseen classes without a class embedding: {missing}")
    dtype = np.dtype(ckpt.config.dtype)
    gp = ParameterSet({k: v.astype(dtype) for k, v in ckpt.generator.items()})
    nz = ckpt.config.noise_dim
    streams = np.random.SeedSequence(seed).spawn(max(len(unseen), 1))
    blocks, labels = [], []
    for i, y in enumerate(unseen):
        rng = np.random.default_rng(streams[0] if shared_noise else streams[i])
        z = rng.standard_normal((n_per_class, nz)).astype(dtype)
        g = np.repeat(table.vector(y)[None, :].astype(dtype), n_per_class, axis=0)
        blocks.append(generate(z, g, gp) if n_per_class else np.zeros((0, ckpt.config.feature_dim), dtype))
        labels += [y] * n_per_class
    x = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, ckpt.config.feature_dim), dtype)
    return FeatureSet(x, tuple(labels), ("synthetic",) * len(labels))


def save_checkpoint(ckpt: GanCheckpoint, path) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header
    (config, step, RNG state, seen labels, shape table), float32 payload."""
    arrays = ckpt.arrays()
    table, offset = [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "seen_labels": list(ckpt.seen_classifier.labels),
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arrays[t["name"]], dtype="<f4").tobytes() for t in table)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> GanCheckpoint:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a GAN checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", buf, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(buf[off:off + hlen].decode("utf-8"))
    off += hlen
    payload = np.frombuffer(buf, dtype="<f4", offset=off)
    arrays = {}
    for t in header["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        arrays[t["name"]] = payload[t["offset"]:t["offset"] + size].reshape(t["shape"]).astype(np.float32)
    config = GanConfig.from_dict(header["config"])
    gen = {k: v for k, v in arrays.items() if k.startswith("G.")}
    dis = {k: v for k, v in arrays.items() if k.startswith("D.")}
    opt = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
    clf = SeenClassifier(SoftmaxClassifier(tuple(header["seen_labels"]), arrays["C.theta"]))
    return GanCheckpoint(config, gen, dis, clf, header["step"], header["rng_state"], opt)
