import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from cirkit.cli import cli, load_cache, save_cache
from cirkit.engine import NegativeCache, cache_targets
from cirkit.forge import read_triplets
from cirkit.manifest import load_manifest, output_hashes
from cirkit.model import Checkpoint, init_params, load_checkpoint, save_checkpoint
from cirkit.store import load_embeddings, make_matrix, write_embeddings

from conftest import unit_rows

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, args, expect=0):
    result = runner.invoke(cli, args, catch_exceptions=False)
    assert result.exit_code == expect, result.output
    return result


@pytest.fixture
def synth_dir(tmp_path, runner):
    out = tmp_path / "synth"
    invoke(runner, ["make-synthetic", "--out", str(out), "--n-images", "120",
                    "--dim", "12", "--seed", "3"])
    return out


def test_make_synthetic_files_load(synth_dir):
    images = load_embeddings(synth_dir / "img.cire")
    assert images.n == 120
    manifest = load_manifest(synth_dir / "manifest.json")
    assert set(output_hashes(manifest)) >= {"images", "texts", "triplets"}


def test_make_synthetic_deterministic(tmp_path, runner):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        invoke(runner, ["make-synthetic", "--out", str(out), "--n-images", "80",
                        "--dim", "8", "--seed", "1"])
    ha = output_hashes(load_manifest(a / "manifest.json"))
    hb = output_hashes(load_manifest(b / "manifest.json"))
    assert ha == hb


def make_image_store(tmp_path, rng, n=30, d=8):
    path = tmp_path / "img.cire"
    ids = [f"img_{i:03d}" for i in range(n)]
    write_embeddings(make_matrix(ids, unit_rows(rng, n, d).astype(np.float32)), path)
    return path


def test_forge_pipeline(tmp_path, runner, rng):
    emb = make_image_store(tmp_path, rng)
    out = tmp_path / "forged"
    invoke(runner, ["forge", "--emb", str(emb), "--out-dir", str(out),
                    "--c0", "2", "--c1", "8", "--templates", "0,1",
                    "--budget", "10", "--seed", "1", "--type-word", "dress",
                    "--k", "5"])
    captions = [json.loads(l) for l in open(out / "captions.jsonl")]
    assert len(captions) == 30
    assert all(len(c["caption"].split()) == 5 for c in captions)
    triplets = read_triplets(out / "triplets.jsonl")
    assert len(triplets) == 20  # budget x |templates|
    assert all(t.provenance == "generated" for t in triplets)
    pairs = [json.loads(l) for l in open(out / "pairs.jsonl")]
    assert len(pairs) == 30


def test_forge_rerun_byte_identical(tmp_path, runner, rng):
    emb = make_image_store(tmp_path, rng)
    hashes = []
    for name in ("f1", "f2"):
        out = tmp_path / name
        invoke(runner, ["forge", "--emb", str(emb), "--out-dir", str(out),
                        "--c0", "1", "--c1", "6", "--templates", "2",
                        "--budget", "8", "--seed", "7"])
        hashes.append(output_hashes(load_manifest(out / "manifest.json")))
    assert hashes[0] == hashes[1]


def test_forge_budget_error_exit_code(tmp_path, runner, rng):
    emb = make_image_store(tmp_path, rng)
    result = runner.invoke(cli, ["forge", "--emb", str(emb),
                                 "--out-dir", str(tmp_path / "x"),
                                 "--c0", "0", "--c1", "4",
                                 "--budget", "99999"])
    assert result.exit_code == 2  # ConfigError


def test_forge_fractional_window(tmp_path, runner, rng):
    emb = make_image_store(tmp_path, rng)
    out = tmp_path / "frac"
    invoke(runner, ["forge", "--emb", str(emb), "--out-dir", str(out),
                    "--c0", "0.1", "--c1", "0.4", "--fractional",
                    "--templates", "2", "--budget", "5", "--seed", "2"])
    assert (out / "triplets.jsonl").exists()


def train_args(synth_dir, out, stage="1", **extra):
    args = ["train", "--stage", stage,
            "--triplets", str(synth_dir / "train_triplets.jsonl"),
            "--images", str(synth_dir / "img.cire"),
            "--texts", str(synth_dir / "txt.cire"),
            "--out", str(out),
            "--epochs", "2", "--batch-size", "16", "--hidden", "6",
            "--seed", "4"]
    for key, value in extra.items():
        args += [f"--{key.replace('_', '-')}"] + ([] if value is None else [str(value)])
    return args


def test_train_stage1_and_metrics(tmp_path, runner, synth_dir):
    out = tmp_path / "s1.cirm"
    invoke(runner, train_args(synth_dir, out))
    ckpt = load_checkpoint(out)
    assert ckpt.step > 0
    lines = [json.loads(l) for l in open(str(out) + ".metrics.jsonl")]
    assert "config" in lines[0]
    assert lines[0]["config"]["stage"] == "one"
    metric_lines = lines[1:]
    assert len(metric_lines) == 2
    assert {"epoch", "step", "loss", "val_rmean", "stage"} <= set(metric_lines[0])
    manifest = load_manifest(str(out) + ".manifest.json")
    assert "checkpoint" in manifest["outputs"]


def test_train_determinism_by_hash(tmp_path, runner, synth_dir):
    hashes = []
    for name in ("a.cirm", "b.cirm"):
        out = tmp_path / name
        invoke(runner, train_args(synth_dir, out))
        hashes.append(output_hashes(load_manifest(str(out) + ".manifest.json")))
    assert hashes[0]["checkpoint"] == hashes[1]["checkpoint"]


def test_train_stage2_requires_init(tmp_path, runner, synth_dir):
    result = runner.invoke(cli, train_args(synth_dir, tmp_path / "x.cirm", stage="2"))
    assert result.exit_code == 2
    assert "--init" in result.output or "init" in result.output


def test_train_stage2_with_build_cache_freezes_wt(tmp_path, runner, synth_dir):
    s1 = tmp_path / "s1.cirm"
    invoke(runner, train_args(synth_dir, s1))
    s2 = tmp_path / "s2.cirm"
    invoke(runner, train_args(synth_dir, s2, stage="2", init=s1,
                              build_cache=None))
    wt1 = load_checkpoint(s1).params.Wt
    wt2 = load_checkpoint(s2).params.Wt
    np.testing.assert_array_equal(wt1, wt2)


def test_train_stage2_rejects_stale_cache(tmp_path, runner, synth_dir, rng):
    s1 = tmp_path / "s1.cirm"
    invoke(runner, train_args(synth_dir, s1))
    # cache built from a DIFFERENT checkpoint
    other = Checkpoint.fresh(init_params(12, 6, seed=99))
    other.params.Wt[0, 0] = 3.0
    images = load_embeddings(synth_dir / "img.cire")
    from cirkit.store import normalize_rows
    cache = cache_targets(other, normalize_rows(images))
    cache_path = tmp_path / "stale.cire"
    save_cache(cache, cache_path)
    result = runner.invoke(cli, train_args(synth_dir, tmp_path / "x.cirm",
                                           stage="2", init=s1, cache=cache_path))
    assert result.exit_code == 3
    assert "fingerprint" in result.output


def test_train_config_file_and_flag_precedence(tmp_path, runner, synth_dir):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "optimizer": {"lr": 0.5, "tau": 0.2},
        "epochs": 1,
    }))
    out = tmp_path / "c.cirm"
    args = ["train", "--stage", "1",
            "--triplets", str(synth_dir / "train_triplets.jsonl"),
            "--images", str(synth_dir / "img.cire"),
            "--texts", str(synth_dir / "txt.cire"),
            "--out", str(out), "--config", str(cfg_path),
            "--lr", "0.001", "--batch-size", "16", "--hidden", "6"]
    invoke(runner, args)
    lines = [json.loads(l) for l in open(str(out) + ".metrics.jsonl")]
    config = lines[0]["config"]
    assert config["lr"] == 0.001      # flag wins
    assert config["tau"] == 0.2       # config file wins over default
    assert config["epochs"] == 1


def test_train_validation_errors_listed_exhaustively(tmp_path, runner, synth_dir):
    args = ["train", "--stage", "2",
            "--triplets", str(synth_dir / "train_triplets.jsonl"),
            "--images", str(synth_dir / "img.cire"),
            "--texts", str(synth_dir / "txt.cire"),
            "--out", str(tmp_path / "x.cirm"),
            "--tau", "-1", "--lr", "-2", "--batch-size", "0"]
    result = runner.invoke(cli, args)
    assert result.exit_code == 2
    for needle in ("tau", "lr", "batch_size", "--init", "--cache"):
        assert needle in result.output


def test_train_paper_grid_values_accepted(tmp_path, runner, synth_dir):
    # the published tuning grids must pass config validation
    for lr in ("2e-6", "5e-6", "6e-6", "1e-5", "2e-5"):
        for tau in ("0.01", "0.02", "0.03", "0.05"):
            out = tmp_path / f"g_{lr}_{tau}.cirm"
            args = train_args(synth_dir, out) + ["--lr", lr, "--tau", tau]
            args[args.index("--epochs") + 1] = "0"  # validation only
            invoke(runner, args)


def eval_args(synth_dir, ckpt, report, convention="cirr"):
    return ["eval", "--checkpoint", str(ckpt),
            "--queries", str(synth_dir / "val_queries.jsonl"),
            "--images", str(synth_dir / "img.cire"),
            "--texts", str(synth_dir / "txt.cire"),
            "--k", "1,5,10", "--subset-k", "1,2,3",
            "--groups", str(synth_dir / "groups.jsonl"),
            "--convention", convention,
            "--report", str(report)]


def test_eval_report_structure(tmp_path, runner, synth_dir):
    ckpt = tmp_path / "s1.cirm"
    invoke(runner, train_args(synth_dir, ckpt))
    report_path = tmp_path / "report.json"
    result = invoke(runner, eval_args(synth_dir, ckpt, report_path))
    assert "R@1" in result.output and "Rmean" in result.output
    doc = json.loads(report_path.read_text())
    assert doc["convention"] == "cirr"
    assert doc["masked_reference"] is True
    assert set(doc["recall_at"]) == {"1", "5", "10"}
    assert set(doc["subset_recall_at"]) == {"1", "2", "3"}
    assert doc["rmean"] == (doc["recall_at"]["5"] + doc["subset_recall_at"]["1"]) / 2
    assert doc["checkpoint_fingerprint"]
    assert doc["n_queries"] > 0


def test_eval_missing_groups_is_config_error(tmp_path, runner, synth_dir):
    ckpt = tmp_path / "s1.cirm"
    invoke(runner, train_args(synth_dir, ckpt))
    args = eval_args(synth_dir, ckpt, tmp_path / "r.json")
    i = args.index("--groups")
    del args[i:i + 2]
    result = runner.invoke(cli, args)
    assert result.exit_code == 2


def test_eval_empty_queries_no_report(tmp_path, runner, synth_dir):
    ckpt = tmp_path / "s1.cirm"
    invoke(runner, train_args(synth_dir, ckpt))
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    report_path = tmp_path / "r.json"
    args = eval_args(synth_dir, ckpt, report_path)
    args[args.index("--queries") + 1] = str(empty)
    result = runner.invoke(cli, args)
    assert result.exit_code == 3
    assert not report_path.exists()


def test_eval_corrupt_cire_exit_code(tmp_path, runner, synth_dir):
    ckpt = tmp_path / "s1.cirm"
    invoke(runner, train_args(synth_dir, ckpt))
    bad = tmp_path / "bad.cire"
    bad.write_bytes(b"JUNKJUNKJUNK" * 4)
    args = eval_args(synth_dir, ckpt, tmp_path / "r.json")
    args[args.index("--images") + 1] = str(bad)
    result = runner.invoke(cli, args)
    assert result.exit_code == 3


def test_eval_deterministic(tmp_path, runner, synth_dir):
    ckpt = tmp_path / "s1.cirm"
    invoke(runner, train_args(synth_dir, ckpt))
    hashes = []
    for name in ("r1.json", "r2.json"):
        path = tmp_path / name
        invoke(runner, eval_args(synth_dir, ckpt, path))
        manifest = load_manifest(str(path) + ".manifest.json")
        hashes.append(output_hashes(manifest)["report"])
    assert hashes[0] == hashes[1]


def test_negstudy_smoke(tmp_path, runner, synth_dir):
    out = tmp_path / "study"
    invoke(runner, ["negstudy",
                    "--triplets", str(synth_dir / "train_triplets.jsonl"),
                    "--images", str(synth_dir / "img.cire"),
                    "--texts", str(synth_dir / "txt.cire"),
                    "--queries", str(synth_dir / "val_queries.jsonl"),
                    "--out-dir", str(out),
                    "--epochs", "1", "--batch-size", "16", "--hidden", "4",
                    "--k", "5"])
    doc = json.loads((out / "negstudy.json").read_text())
    assert len(doc["rows"]) == 4
    labels = {row["method"]: row["label"] for row in doc["rows"]}
    assert labels == {"ref_replace": 1, "text_replace": 2,
                      "target_replace": 3, "query_replace": 4}
    assert all("recall_at_5" in row for row in doc["rows"])


def test_negstudy_unknown_method_rejected(tmp_path, runner, synth_dir):
    # neg-method is not a negstudy flag; the train command rejects bad labels
    result = runner.invoke(cli, ["train", "--stage", "1",
                                 "--triplets", str(synth_dir / "train_triplets.jsonl"),
                                 "--images", str(synth_dir / "img.cire"),
                                 "--texts", str(synth_dir / "txt.cire"),
                                 "--out", str(tmp_path / "x.cirm"),
                                 "--neg-method", "bogus"])
    assert result.exit_code == 2


def test_import_command(tmp_path, runner):
    src = tmp_path / "annotated.jsonl"
    with open(src, "w") as fh:
        fh.write(json.dumps({"candidate": "imgA", "captions": "make it red",
                             "target": "imgB"}) + "\n")
        fh.write(json.dumps({"candidate": "imgC", "captions": "longer sleeves",
                             "target": "imgD"}) + "\n")
    out = tmp_path / "triplets.jsonl"
    invoke(runner, ["import", "--input", str(src), "--out", str(out),
                    "--ref-key", "candidate", "--text-key", "captions",
                    "--target-key", "target"])
    triplets = read_triplets(out)
    assert len(triplets) == 2
    assert triplets[0].provenance == "annotated"
    assert triplets[0].template_id is None


def test_embed_texts_stub(tmp_path, runner, synth_dir):
    out = tmp_path / "txt2.cire"
    invoke(runner, ["embed-texts",
                    "--texts", str(synth_dir / "train_triplets.jsonl"),
                    "--out", str(out), "--dim", "12", "--seed", "1"])
    store = load_embeddings(out)
    triplets = read_triplets(synth_dir / "train_triplets.jsonl")
    assert all(t.modified_text in store for t in triplets)
    norms = np.linalg.norm(store.data.astype(np.float64), axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)


def test_cache_round_trip(tmp_path, runner, synth_dir):
    s1 = tmp_path / "s1.cirm"
    invoke(runner, train_args(synth_dir, s1))
    cache_path = tmp_path / "cache.cire"
    invoke(runner, ["cache", "--checkpoint", str(s1),
                    "--emb", str(synth_dir / "img.cire"),
                    "--out", str(cache_path)])
    cache = load_cache(cache_path)
    assert isinstance(cache, NegativeCache)
    assert cache.built_from == load_checkpoint(s1).wt_fingerprint()
    # rebuild: byte-identical cache file
    cache2 = tmp_path / "cache2.cire"
    invoke(runner, ["cache", "--checkpoint", str(s1),
                    "--emb", str(synth_dir / "img.cire"),
                    "--out", str(cache2)])
    assert cache_path.read_bytes() == cache2.read_bytes()


HELP_COMMANDS = ["", "forge", "train", "eval", "negstudy", "cache", "import"]


@pytest.mark.parametrize("command", HELP_COMMANDS)
def test_help_golden(runner, command):
    args = ([command] if command else []) + ["--help"]
    result = invoke(runner, args)
    golden = GOLDEN_DIR / f"help_{command or 'root'}.txt"
    assert golden.exists(), f"golden file missing: {golden}"
    assert result.output == golden.read_text()


def test_train_help_documents_every_config_field(runner):
    result = invoke(runner, ["train", "--help"])
    for field in ("tau", "lr", "weight-decay", "batch-size", "epochs",
                  "neg-method", "seed", "hidden", "neg-pool", "stage"):
        assert field in result.output


def test_train_numerical_failure_exit_code(tmp_path, runner, synth_dir):
    args = train_args(synth_dir, tmp_path / "x.cirm") + ["--lr", "1e22"]
    import numpy as np
    with np.errstate(over="ignore", invalid="ignore"):
        result = runner.invoke(cli, args)
    assert result.exit_code == 4
    assert "loss" in result.output or "non-finite" in result.output
