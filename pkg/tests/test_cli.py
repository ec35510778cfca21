import json
import subprocess
import sys

import numpy as np
import pytest

from kggan import cli
from kggan.gae import load_embeddings
from kggan.gan import init_discriminator, init_generator, load_checkpoint
from kggan.evaluation import load_report

FAST = ["--set", "gae.epochs=15", "--set", "gan.steps=20", "--set", "eval.n_per_class=30"]


def run(tmp, *args, fast=True):
    return cli.main(["--dir", str(tmp), "--seed", "7", *(FAST if fast else []), *args])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    for stage in (["world", "--spec", "mini-a"], ["embed"], ["gan"], ["eval"]):
        assert run(d, *stage) == 0
    return d


def test_stages_write_their_artifacts(run_dir):
    for name in cli.FILES.values():
        assert (run_dir / name).exists(), name
        assert (run_dir / (name + ".meta.json")).exists(), name
    manifest = json.loads((run_dir / "world.json").read_text())
    assert len(manifest["seen"]) == 5 and len(manifest["unseen"]) == 11 and manifest["seed"] == 7
    table = load_embeddings(run_dir / "embeddings.tsv")
    assert (table.dim_c, table.dim_a) == (50, 50)


def test_zsl_report_schema(run_dir, capsys):
    r = load_report(run_dir / "report.txt")
    assert r.mode == "zsl" and set(r.macro) == {1, 2, 5}
    assert r.macro[5] >= r.macro[1]
    assert r.meta["seed"] == 7 and r.meta["chain"]


def test_gzsl_report_schema(run_dir, tmp_path):
    out = tmp_path / "g.txt"
    assert run(run_dir, "eval", "--mode", "gzsl", "--report", str(out)) == 0
    r = load_report(out)
    assert {"H_s", "H_u", "H"} <= set(r.metrics())


def test_report_summarises_several_files(run_dir, tmp_path, capsys):
    out = tmp_path / "sum.txt"
    assert run(run_dir, "report", str(run_dir / "report.txt"), str(run_dir / "report.txt"),
               "--output", str(out)) == 0
    lines = dict(l.split("\t", 1) for l in out.read_text().splitlines())
    assert lines["reports"] == "2"
    assert lines["hit@1"].endswith("\t0.00")   # identical reports -> zero spread


def test_every_stage_is_byte_identical_on_rerun(run_dir, tmp_path):
    for stage in (["world", "--spec", "mini-a"], ["embed"], ["gan"], ["eval"]):
        assert run(tmp_path, *stage) == 0
    for name in cli.FILES.values():
        for suffix in ("", ".meta.json"):
            assert (tmp_path / (name + suffix)).read_bytes() == (run_dir / (name + suffix)).read_bytes(), name


@pytest.mark.parametrize("view,dims", [("GA", (0, 50)), ("GC", (50, 0)), ("word-vector-only", (32, 0))])
def test_view_selector(run_dir, tmp_path, view, dims):
    out = tmp_path / "e.tsv"
    assert run(run_dir, "embed", "--view", view, "--embeddings", str(out)) == 0
    t = load_embeddings(out)
    assert (t.dim_c, t.dim_a) == dims


def test_zero_step_gan_is_initialisation(run_dir, tmp_path):
    out = tmp_path / "g.ckpt"
    assert cli.main(["--dir", str(run_dir), "--seed", "7", "--set", "gan.steps=0", "--set", "gan.init=glorot", "gan",
                     "--checkpoint", str(out)]) == 0
    ckpt = load_checkpoint(out)
    rng = np.random.default_rng(7)
    emb = load_embeddings(run_dir / "embeddings.tsv").dim
    g0 = init_generator(rng, 100, emb, 128, 32).arrays()
    d0 = init_discriminator(rng, 32, emb, 128).arrays()
    for k in g0:
        np.testing.assert_array_equal(ckpt.generator[k], g0[k])
    for k in d0:
        np.testing.assert_array_equal(ckpt.discriminator[k], d0[k])


def test_world_without_unseen_classes_exits_2(tmp_path, capsys):
    assert run(tmp_path, "--set", "world.n_unseen=0", "world") == 2
    assert "unseen" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    assert run(tmp_path, "--set", "gan.stepz=3", "world") == 2
    assert "gan.stepz" in capsys.readouterr().err


def test_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"world": {"n_unseen": 4}}))
    assert cli.main(["--dir", str(tmp_path), "--config", str(tmp_path / "c.json"), "world", "--spec",
                     "default"]) == 0
    assert len(json.loads((tmp_path / "world.json").read_text())["unseen"]) == 4
    (tmp_path / "bad.json").write_text("[1, 2]")
    assert cli.main(["--dir", str(tmp_path), "--config", str(tmp_path / "bad.json"), "world"]) == 2


def test_missing_seen_embedding_exits_2(run_dir, tmp_path, capsys):
    lines = (run_dir / "embeddings.tsv").read_text().splitlines()
    manifest = json.loads((run_dir / "world.json").read_text())
    first_seen = manifest["seen"][0]
    kept = [lines[0].replace(lines[0].split()[1], str(int(lines[0].split()[1]) - 1))]
    kept += [l for l in lines[1:] if not l.startswith(first_seen + "\t")]
    (tmp_path / "e.tsv").write_text("\n".join(kept) + "\n")
    code = run(run_dir, "gan", "--embeddings", str(tmp_path / "e.tsv"),
               "--checkpoint", str(tmp_path / "g.ckpt"))
    assert code == 2
    assert first_seen in capsys.readouterr().err


def test_eval_refuses_a_mismatched_chain(run_dir, tmp_path, capsys):
    other = tmp_path / "e.tsv"
    assert run(run_dir, "--seed", "8", "embed", "--embeddings", str(other)) == 0
    code = run(run_dir, "eval", "--embeddings", str(other), "--report", str(tmp_path / "r.txt"))
    assert code == 2
    assert "different embeddings" in capsys.readouterr().err


def test_eval_refuses_a_modified_checkpoint(run_dir, tmp_path, capsys):
    bad = tmp_path / "gan.ckpt"
    bad.write_bytes((run_dir / "gan.ckpt").read_bytes()[:-4] + b"\0\0\0\0")
    (tmp_path / "gan.ckpt.meta.json").write_text((run_dir / "gan.ckpt.meta.json").read_text())
    assert run(run_dir, "eval", "--checkpoint", str(bad), "--report", str(tmp_path / "r.txt")) == 2
    assert "modified" in capsys.readouterr().err


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "envdir"))
    assert cli.main(["--seed", "1", "--set", "world.n_unseen=2", "world", "--spec", "default"]) == 0
    assert (tmp_path / "envdir" / "world.json").exists()


def test_console_entry_point_deterministic_flag(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "kggan.cli", "--deterministic", "--dir", str(tmp_path),
                           "--seed", "3", "world"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "5 seen, 11 unseen" in proc.stdout
