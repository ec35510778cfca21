"""Command line: ``kggan [global flags] {world,embed,gan,eval,report} ...``.

Every stage reads and writes files in one run directory (``--dir``,
default ``$KGGAN_OUTPUT_DIR`` or ``./kggan-run``).  Each artifact gets a
``<name>.meta.json`` sidecar recording the config digest and the digests
of the inputs it was built from; ``eval`` refuses to mix artifacts whose
recorded inputs do not match the files on disk.

Exit codes: 0 success, 1 training/runtime failure, 2 invalid input or config.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifier import GZSL, ZSL, DatasetSplit, TrainingError
from .evaluation import load_report, macro_average, save_report
from .features import FeatureSet, load_features, save_features
from .gae import TrainingError as GaeTrainingError
from .gae import load_embeddings, save_embeddings
from .gan import GanTrainingError, load_checkpoint, save_checkpoint, train_gan
from .kg import KGParseError, KGValidationError, load_graph, load_name_vectors, save_graph, save_name_vectors
from .pipeline import ConfigError, PipelineConfig, embed_classes, evaluate_checkpoint, parse_override
from .synth import WorldSpec, WorldSpecError, generate_world, sample_dataset

log = logging.getLogger("kggan")

OUTPUT_ENV = "KGGAN_OUTPUT_DIR"
DEFAULT_DIR = "kggan-run"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

FILES = {
    "manifest": "world.json",
    "kg": "kg.tsv",
    "names": "names.vec",
    "train": "train.feats",
    "test": "test.feats",
    "embeddings": "embeddings.tsv",
    "checkpoint": "gan.ckpt",
    "report": "report.txt",
}


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


# -- provenance ----------------------------------------------------------------

def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def artifact_digest(path: Path) -> str:
    """Chain digest from the sidecar when present, else the raw file digest."""
    meta = _meta_path(path)
    if meta.exists():
        return json.loads(meta.read_text(encoding="utf-8"))["digest"]
    return file_digest(path)


def write_meta(path: Path, stage: str, config_digest: str, inputs: dict[str, Path]) -> str:
    input_digests = {k: artifact_digest(p) for k, p in sorted(inputs.items())}
    body = {"stage": stage, "config_digest": config_digest, "inputs": input_digests,
            "file": file_digest(path)}
    body["digest"] = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
    _meta_path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return body["digest"]


def check_chain(path: Path, expected: dict[str, Path]) -> None:
    """Refuse ``path`` if its sidecar names inputs other than the given files."""
    meta = _meta_path(path)
    if not meta.exists():
        return
    body = json.loads(meta.read_text(encoding="utf-8"))
    if body.get("file") != file_digest(path):
        raise CliError(f"{path} was modified after it was written (digest mismatch)")
    for name, p in expected.items():
        recorded = body["inputs"].get(name)
        if recorded is not None and recorded != artifact_digest(p):
            raise CliError(f"{path} was built from a different {name} than {p}; rerun the earlier stages")


# -- config ----------------------------------------------------------------------

def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.default()
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(data, dict):
            raise CliError("the config file must hold a JSON object")
        cfg.update(data)
    for text in args.set or ():
        section, key, value = parse_override(text)
        cfg.set(section, key, value)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _run_dir(args) -> Path:
    d = Path(args.dir or os.environ.get(OUTPUT_ENV) or DEFAULT_DIR)
    return d


def _path(args, name: str) -> Path:
    explicit = getattr(args, name, None)
    return Path(explicit) if explicit else _run_dir(args) / FILES[name]


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {what}: {path}")
    return path


def _write_config(path: Path, cfg: PipelineConfig) -> None:
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- subcommands ---------------------------------------------------------------------

def cmd_world(args, cfg: PipelineConfig) -> int:
    presets = {"mini-a": WorldSpec.mini_a, "mini-o": WorldSpec.mini_o}
    if args.spec not in (None, "default"):
        if args.spec not in presets:
            raise CliError(f"unknown world spec {args.spec!r}; choose mini-a or mini-o")
        preset = presets[args.spec]()
        for key in ("n_seen", "n_unseen", "n_attributes"):
            if cfg.world[key] == getattr(WorldSpec(), key):
                cfg.world[key] = getattr(preset, key)
    spec = cfg.world_spec()
    out = _run_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(spec)
    split = sample_dataset(world, cfg.sample["n_train_per_seen"], cfg.sample["n_test_per_class"],
                           seed=cfg.seed)
    paths = {k: out / FILES[k] for k in ("manifest", "kg", "names", "train", "test")}
    manifest = world.manifest()
    manifest.update({"seed": cfg.seed, "world_digest": world.digest(), "config": cfg.to_dict()})
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_graph(world.kg, paths["kg"])
    save_name_vectors(paths["names"], "node", world.name_vectors)
    save_features(split.train, paths["train"], binary=True)
    save_features(split.test, paths["test"], binary=True)
    digest = cfg.digest()
    write_meta(paths["manifest"], "world", digest, {})
    for k in ("kg", "names", "train", "test"):
        write_meta(paths[k], "world", digest, {"manifest": paths["manifest"]})
    print(f"world {world.digest()}: {len(world.labels.seen)} seen, {len(world.labels.unseen)} unseen, "
          f"{len(world.kg.attributes)} attributes -> {out}")
    return 0


def _labels(args) -> tuple[tuple[str, ...], tuple[str, ...]]:
    manifest = json.loads(_need(_path(args, "manifest"), "world manifest").read_text(encoding="utf-8"))
    return tuple(manifest["seen"]), tuple(manifest["unseen"])


def cmd_embed(args, cfg: PipelineConfig) -> int:
    kg_path, names_path = _need(_path(args, "kg"), "graph"), _need(_path(args, "names"), "name vectors")
    kg = load_graph(kg_path)
    _, vectors = load_name_vectors(names_path)
    table = embed_classes(kg, vectors, cfg.view, cfg.gae_config())
    out = _path(args, "embeddings")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(table, out)
    write_meta(out, "embed", cfg.digest(), {"kg": kg_path, "names": names_path})
    print(f"embeddings ({cfg.view}): {len(table.classes)} classes, dim_c={table.dim_c}, "
          f"dim_a={table.dim_a} -> {out}")
    return 0


def cmd_gan(args, cfg: PipelineConfig) -> int:
    train_path = _need(_path(args, "train"), "seen training features")
    emb_path = _need(_path(args, "embeddings"), "class embeddings")
    seen = load_features(train_path)
    table = load_embeddings(emb_path)
    missing = sorted(set(seen.labels) - set(table.classes))
    if missing:
        raise CliError(f"no class embedding for seen class(es) {missing}")
    gan_cfg = cfg.gan_config()
    if seen.dim != gan_cfg.feature_dim:
        raise CliError(f"features have dimension {seen.dim} but gan.feature_dim is {gan_cfg.feature_dim}")
    ckpt = train_gan(seen, table, gan_cfg)
    out = _path(args, "checkpoint")
    save_checkpoint(ckpt, out)
    write_meta(out, "gan", cfg.digest(), {"train": train_path, "embeddings": emb_path})
    last = ckpt.history[-1] if ckpt.history else {}
    print(f"gan: {ckpt.step} generator steps"
          + (f", final L_G={last['L_G']:.4f} L_D={last['L_D']:.4f}" if last else "") + f" -> {out}")
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    if args.mode:
        cfg.eval["mode"] = args.mode
    if args.k:
        cfg.eval["ks"] = list(args.k)
    ckpt_path = _need(_path(args, "checkpoint"), "GAN checkpoint")
    emb_path = _need(_path(args, "embeddings"), "class embeddings")
    train_path = _need(_path(args, "train"), "seen training features")
    test_path = _need(_path(args, "test"), "test features")
    check_chain(ckpt_path, {"train": train_path, "embeddings": emb_path})
    check_chain(emb_path, {})
    seen, unseen = _labels(args)
    train, test = load_features(train_path), load_features(test_path)
    split = DatasetSplit(train, test, seen, unseen, GZSL).for_mode(cfg.mode)
    ckpt = load_checkpoint(ckpt_path)
    table = load_embeddings(emb_path)
    report = evaluate_checkpoint(split, table, ckpt, cfg, config_digest=cfg.digest())
    report.meta["chain"] = artifact_digest(ckpt_path)
    out = _path(args, "report")
    save_report(report, out)
    write_meta(out, "eval", cfg.digest(), {"checkpoint": ckpt_path, "embeddings": emb_path, "test": test_path})
    sys.stdout.write(report.render())
    return 0


def cmd_report(args, cfg: PipelineConfig) -> int:
    paths = [Path(p) for p in args.reports] or [_path(args, "report")]
    reports = [load_report(_need(p, "report")) for p in paths]
    keys = sorted(set.intersection(*(set(r.metrics()) for r in reports)))
    keys = [k for k in keys if "/" not in k] if not args.per_class else keys
    lines = [f"reports\t{len(reports)}", f"modes\t{','.join(sorted({r.mode for r in reports}))}"]
    for k in keys:
        vals = [r.metrics()[k] for r in reports]
        lines.append(f"{k}\t{macro_average(vals):.2f}\t{np.std(vals):.2f}")
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# -- entry -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kggan", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="JSON config file (sections world, sample, gae, gan, classifier, eval)")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--deterministic", action="store_true",
                   help="pin BLAS to one thread so reruns are byte-identical across machines")
    p.add_argument("--dir", help=f"run directory (default ${OUTPUT_ENV} or ./{DEFAULT_DIR})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    w = sub.add_parser("world", help="generate a synthetic world and its train/test split")
    w.add_argument("--spec", default="mini-a", help="mini-a | mini-o | default")

    e = sub.add_parser("embed", help="train the graph auto-encoder and write class embeddings")
    e.add_argument("--view", choices=["GC", "GA", "GC+GA", "word-vector-only"])
    e.add_argument("--kg")
    e.add_argument("--names")
    e.add_argument("--embeddings", help="output path")

    g = sub.add_parser("gan", help="train the conditional WGAN-GP on seen features")
    g.add_argument("--train")
    g.add_argument("--embeddings")
    g.add_argument("--checkpoint", help="output path")

    v = sub.add_parser("eval", help="synthesise unseen features, train the classifier, write a report")
    v.add_argument("--mode", choices=[ZSL, GZSL])
    v.add_argument("-k", type=int, action="append")
    v.add_argument("--checkpoint")
    v.add_argument("--embeddings")
    v.add_argument("--train")
    v.add_argument("--test")
    v.add_argument("--manifest")
    v.add_argument("--report", help="output path")

    r = sub.add_parser("report", help="summarise one or more report files")
    r.add_argument("reports", nargs="*")
    r.add_argument("--per-class", action="store_true")
    r.add_argument("--output")
    return p


COMMANDS = {"world": cmd_world, "embed": cmd_embed, "gan": cmd_gan, "eval": cmd_eval, "report": cmd_report}

_VALIDATION_ERRORS = (CliError, ConfigError, WorldSpecError, KGParseError, KGValidationError,
                      ValueError, KeyError, OSError)
_RUNTIME_ERRORS = (TrainingError, GaeTrainingError, GanTrainingError, RuntimeError, FloatingPointError)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        unpinned = any(os.environ.get(v) != "1" for v in _THREAD_VARS)
        for v in _THREAD_VARS:
            os.environ[v] = "1"
        if unpinned and argv is None:
            # BLAS reads its thread count at load time, so restart with the pins in place
            os.execv(sys.executable, [sys.executable, "-m", "kggan.cli", *sys.argv[1:]])
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if getattr(args, "view", None):
            cfg.eval["view"] = args.view
        cfg.validate()
        return COMMANDS[args.command](args, cfg)
    except _RUNTIME_ERRORS as e:
        print(f"kggan {args.command}: {e}", file=sys.stderr)
        return 1
    except _VALIDATION_ERRORS as e:
        code = e.code if isinstance(e, CliError) else 2
        print(f"kggan {args.command}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
