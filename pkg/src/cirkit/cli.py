"""Command-line entry point wiring the full pipeline.

Exit codes: 0 success, 2 usage/config error, 3 data/format error,
4 numerical failure, 5 provider/transport failure. The caption service
endpoint may be supplied via the CIR_CAPTION_URL environment variable.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import captions as cap
from . import engine, evaluator, forge, model, synthetic
from .errors import CirkitError, ConfigError, DataFormatError
from .manifest import RunManifest, sha256_file
from .store import load_embeddings, make_matrix, normalize_rows, write_embeddings

CONTEXT_SETTINGS = {
    "help_option_names": ["-h", "--help"],
    "terminal_width": 96,
    "max_content_width": 96,
}


@click.group(context_settings=CONTEXT_SETTINGS)
@click.option("--threads", type=int, default=1, show_default=True,
              help="Global cap on internal fan-out (caption requests etc).")
@click.pass_context
def cli(ctx, threads):
    """Composed-image-retrieval toolkit: forge triplets, train, evaluate."""
    if threads < 1:
        raise click.UsageError("--threads must be >= 1")
    ctx.obj = {"threads": threads}


def mapped_errors(fn):
    """Translate CirkitError subclasses into their contract exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CirkitError as exc:
            click.echo(f"error: {exc}", err=True)
            raise SystemExit(exc.exit_code)

    return wrapper


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x != ""]
    except ValueError:
        raise ConfigError(f"cannot parse {what} list from {text!r}")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    flat = {}
    for key, value in cfg.items():
        if isinstance(value, dict):  # nested sections flatten one level
            flat.update(value)
        else:
            flat[key] = value
    return flat


def _resolve(flag_value, config: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _load_store(path, name: str):
    matrix = load_embeddings(path)
    try:
        return normalize_rows(matrix)
    except CirkitError as exc:
        raise DataFormatError(f"{name} store {path}: {exc}")


# --- make-synthetic ----------------------------------------------------------

@cli.command("make-synthetic", hidden=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--n-images", type=int, default=2000, show_default=True)
@click.option("--dim", type=int, default=32, show_default=True)
@click.option("--noise", type=float, default=0.1, show_default=True)
@click.option("--n-clusters", type=int, default=4, show_default=True)
@click.option("--cluster-spread", type=float, default=0.3, show_default=True)
@click.option("--text-vocab", type=int, default=4, show_default=True)
@click.option("--identity-edit-fraction", type=float, default=0.3, show_default=True)
@click.option("--shared-target-fraction", type=float, default=0.3, show_default=True)
@click.option("--text-noise", type=float, default=0.35, show_default=True)
@click.option("--val-fraction", type=float, default=0.3, show_default=True)
@click.option("--group-size", type=int, default=6, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-modality-rotation", is_flag=True, default=False)
@mapped_errors
def cmd_make_synthetic(out_dir, **kw):
    """Generate the separable synthetic dataset used by the acceptance suite."""
    spec = synthetic.SyntheticSpec(
        n_images=kw["n_images"], dim=kw["dim"], noise=kw["noise"],
        n_clusters=kw["n_clusters"], cluster_spread=kw["cluster_spread"],
        text_vocab=kw["text_vocab"],
        identity_edit_fraction=kw["identity_edit_fraction"],
        shared_target_fraction=kw["shared_target_fraction"],
        text_noise=kw["text_noise"], val_fraction=kw["val_fraction"],
        group_size=kw["group_size"], seed=kw["seed"],
        modality_rotation=not kw["no_modality_rotation"],
    )
    manifest = RunManifest(command=sys.argv[1:], config=kw, seed=kw["seed"])
    manifest.start("generate")
    paths = synthetic.write_synthetic(spec, out_dir)
    manifest.stop("generate")
    for name, p in paths.items():
        manifest.add_output(name, p)
    manifest.write(Path(out_dir) / "manifest.json")
    click.echo(f"synthetic dataset written to {out_dir}")


# --- embed-texts (deterministic stand-in encoder) ----------------------------

def _hashed_text_vector(text: str, dim: int, seed: int) -> np.ndarray:
    vec = np.zeros(dim, dtype=np.float64)
    tokens = text.split()
    if not tokens:
        raise DataFormatError(f"cannot embed empty text {text!r}")
    for tok in tokens:
        digest = hashlib.sha256(f"{seed}:{tok}".encode("utf-8")).digest()
        for slot in range(4):
            idx = int.from_bytes(digest[4 * slot:4 * slot + 2], "little") % dim
            sign = 1.0 if digest[4 * slot + 2] & 1 else -1.0
            vec[idx] += sign
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise DataFormatError(f"degenerate hashed embedding for {text!r}")
    return (vec / norm).astype(np.float32)


@cli.command("embed-texts", hidden=True)
@click.option("--texts", "texts_path", required=True, type=click.Path(exists=True),
              help="Triplets jsonl (modified texts are embedded) or plain text lines.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--dim", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@mapped_errors
def cmd_embed_texts(texts_path, out_path, dim, seed):
    """Hashed bag-of-words text embeddings: a deterministic desk-scale stand-in."""
    seen: dict[str, None] = {}
    with open(texts_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.lstrip().startswith("{"):
                rec = json.loads(line)
                seen[rec["modified_text"]] = None
            else:
                seen[line] = None
    ids = list(seen)
    if not ids:
        raise DataFormatError(f"no texts found in {texts_path}")
    rows = np.stack([_hashed_text_vector(t, dim, seed) for t in ids])
    write_embeddings(make_matrix(ids, rows), out_path)
    click.echo(f"embedded {len(ids)} texts into {out_path}")


# --- import ------------------------------------------------------------------

@cli.command("import")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--ref-key", default="ref_id", show_default=True)
@click.option("--text-key", default="modified_text", show_default=True)
@click.option("--target-key", default="target_id", show_default=True)
@mapped_errors
def cmd_import(input_path, out_path, ref_key, text_key, target_key):
    """Convert an annotated jsonl dataset into the canonical triplet schema."""
    triplets = []
    with open(input_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                triplets.append(forge.Triplet(
                    ref_id=str(rec[ref_key]),
                    modified_text=str(rec[text_key]),
                    target_id=str(rec[target_key]),
                    provenance="annotated",
                ))
            except (KeyError, json.JSONDecodeError) as exc:
                raise DataFormatError(f"{input_path}:{lineno}: {exc}")
    if not triplets:
        raise DataFormatError(f"no records found in {input_path}")
    forge.write_triplets(triplets, out_path)
    click.echo(f"imported {len(triplets)} annotated triplets into {out_path}")


# --- forge -------------------------------------------------------------------

def _read_image_list(path) -> list[tuple[str, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise DataFormatError(f"{path}: image list must be a JSON array")
    out = []
    for item in data:
        if isinstance(item, str):
            out.append((item, item))
        elif isinstance(item, dict) and "image_id" in item:
            out.append((item["image_id"], item.get("image_ref", item["image_id"])))
        else:
            raise DataFormatError(f"{path}: bad image list entry {item!r}")
    return out


@cli.command("forge")
@click.option("--emb", "emb_path", required=True, type=click.Path(exists=True),
              help="CIRE image embeddings used for pair matching.")
@click.option("--images", "images_path", type=click.Path(exists=True), default=None,
              help="Optional JSON list of {image_id, image_ref}; defaults to all embedding ids.")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--c0", type=float, required=True, help="Rank window lower bound (inclusive).")
@click.option("--c1", type=float, required=True, help="Rank window upper bound (exclusive).")
@click.option("--fractional", is_flag=True, default=False,
              help="Interpret c0/c1 as fractions of the candidate count.")
@click.option("--templates", default="0,1,2", show_default=True,
              help="Comma-separated template ids from {0,1,2}.")
@click.option("--budget", type=int, required=True,
              help="Number of pairs to turn into triplets.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--type-word", default="image", show_default=True,
              help="Dataset type word substituted into the caption prompt.")
@click.option("--k", "k_words", type=int, default=10, show_default=True,
              help="Caption word budget substituted into the prompt.")
@click.option("--provider", type=click.Choice(["stub", "http"]), default="stub",
              show_default=True)
@click.option("--caption-url", default=None,
              help="Caption service base URL (falls back to $CIR_CAPTION_URL).")
@click.pass_context
@mapped_errors
def cmd_forge(ctx, emb_path, images_path, out_dir, c0, c1, fractional, templates,
              budget, seed, type_word, k_words, provider, caption_url):
    """Run captions -> pairs -> triplets, writing every intermediate."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=sys.argv[1:], seed=seed, config={
        "c0": c0, "c1": c1, "fractional": fractional, "templates": templates,
        "budget": budget, "seed": seed, "type_word": type_word, "k": k_words,
        "provider": provider,
    })
    manifest.add_input("embeddings", emb_path)
    if images_path:
        manifest.add_input("images", images_path)

    matrix = _load_store(emb_path, "image")
    image_list = (_read_image_list(images_path) if images_path
                  else [(i, i) for i in matrix.ids])
    missing = [i for i, _ in image_list if i not in matrix]
    if missing:
        raise DataFormatError(f"image ids missing from embeddings: {missing[:5]}")

    manifest.start("captions")
    if provider == "stub":
        prov = cap.StubProvider(seed=seed)
    else:
        url = caption_url or os.environ.get("CIR_CAPTION_URL")
        if not url:
            raise ConfigError("http provider needs --caption-url or $CIR_CAPTION_URL")
        prov = cap.HttpProvider(url)
    cache = cap.CaptionCache(out / "captions.jsonl")
    requests_in = cap.make_requests(
        [i for i, _ in image_list], [r for _, r in image_list], type_word, k_words)
    records = cap.caption_batch(requests_in, prov, cache=cache,
                                fanout=ctx.obj["threads"])
    # canonicalize cache file to input order so reruns are byte-identical
    with open(out / "captions.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "image_id": rec.image_id, "caption": rec.caption,
                "provider": rec.provider,
            }, sort_keys=True) + "\n")
    caption_of = {rec.image_id: rec.caption for rec in records}
    manifest.stop("captions")

    manifest.start("pairs")
    pair_cfg = forge.PairMatchConfig(c0=c0, c1=c1, seed=seed, fractional=fractional)
    pairs = forge.match_pairs(matrix, pair_cfg)
    forge.write_pairs(pairs, out / "pairs.jsonl")
    manifest.stop("pairs")

    manifest.start("triplets")
    quads = [
        forge.Quadruplet(ref_id=a, ref_caption=caption_of[a],
                         target_id=b, target_caption=caption_of[b])
        for a, b in pairs if a in caption_of and b in caption_of
    ]
    template_ids = _parse_int_list(templates, "template")
    triplets = forge.forge_triplets(quads, template_ids, budget=budget, seed=seed)
    forge.write_triplets(triplets, out / "triplets.jsonl")
    manifest.stop("triplets")

    for name in ("captions.jsonl", "pairs.jsonl", "triplets.jsonl"):
        manifest.add_output(name, out / name)
    manifest.write(out / "manifest.json")
    click.echo(f"forged {len(triplets)} triplets over {len(pairs)} pairs in {out_dir}")


# --- cache -------------------------------------------------------------------

def save_cache(cache: engine.NegativeCache, path) -> None:
    write_embeddings(cache.corpus, path)
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump({"built_from": cache.built_from}, fh, sort_keys=True)
        fh.write("\n")


def load_cache(path) -> engine.NegativeCache:
    corpus = load_embeddings(path)
    meta_path = str(path) + ".meta.json"
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise DataFormatError(f"cannot read cache metadata {meta_path}: {exc}")
    return engine.NegativeCache(
        corpus=make_matrix(corpus.ids, corpus.data, normalized=True),
        built_from=meta["built_from"],
    )


@cli.command("cache")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--emb", "emb_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@mapped_errors
def cmd_cache(ckpt_path, emb_path, out_path):
    """Push every candidate through the frozen target projection and persist."""
    ckpt = model.load_checkpoint(ckpt_path)
    matrix = _load_store(emb_path, "image")
    manifest = RunManifest(command=sys.argv[1:], config={})
    manifest.add_input("checkpoint", ckpt_path)
    manifest.add_input("embeddings", emb_path)
    manifest.start("cache")
    cache = engine.cache_targets(ckpt, matrix)
    save_cache(cache, out_path)
    manifest.stop("cache")
    manifest.add_output("cache", out_path)
    manifest.add_output("cache_meta", str(out_path) + ".meta.json")
    manifest.write(str(out_path) + ".manifest.json")
    click.echo(f"cached {cache.corpus.n} target representations to {out_path}")


# --- train -------------------------------------------------------------------

STAGE_DEFAULTS = {
    "one": {"epochs": 50},
    "two": {"epochs": 5},
}


def _validate_train_settings(settings: dict, stage: str, init, cache_path,
                             build_cache) -> list[str]:
    problems = []
    if settings["tau"] <= 0:
        problems.append(f"tau must be > 0 (got {settings['tau']})")
    if settings["lr"] <= 0:
        problems.append(f"lr must be > 0 (got {settings['lr']})")
    if settings["weight_decay"] < 0:
        problems.append(f"weight_decay must be >= 0 (got {settings['weight_decay']})")
    if settings["batch_size"] < 1:
        problems.append(f"batch_size must be >= 1 (got {settings['batch_size']})")
    if settings["epochs"] < 0:
        problems.append(f"epochs must be >= 0 (got {settings['epochs']})")
    if settings["neg_method"] not in engine.NEG_METHODS:
        problems.append(f"unknown neg_method {settings['neg_method']!r}")
    if stage == "two":
        if settings["neg_method"] != "target_replace":
            problems.append("stage 2 requires neg_method=target_replace")
        if init is None:
            problems.append("stage 2 requires --init")
        if cache_path is None and not build_cache:
            problems.append("stage 2 requires --cache or --build-cache")
    if settings["neg_pool"] is not None and settings["neg_pool"] < settings["batch_size"]:
        problems.append("neg_pool must be >= batch_size")
    return problems


@cli.command("train")
@click.option("--stage", type=click.Choice(["1", "2"]), required=True)
@click.option("--triplets", "triplets_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_path", required=True, type=click.Path(exists=True))
@click.option("--texts", "texts_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON config file; command-line flags override its values.")
@click.option("--epochs", type=int, default=None, help="[config: epochs]")
@click.option("--lr", type=float, default=None, help="[config: lr]")
@click.option("--tau", type=float, default=None, help="[config: tau]")
@click.option("--weight-decay", type=float, default=None, help="[config: weight_decay]")
@click.option("--batch-size", type=int, default=None, help="[config: batch_size]")
@click.option("--neg-method", default=None,
              type=click.Choice(list(engine.NEG_METHODS)), help="[config: neg_method]")
@click.option("--seed", type=int, default=None, help="[config: seed]")
@click.option("--hidden", type=int, default=None, help="[config: hidden]")
@click.option("--neg-pool", type=int, default=None,
              help="Stage-2 negative pool cap; omit for the full corpus. [config: neg_pool]")
@click.option("--init", "init_path", type=click.Path(exists=True), default=None,
              help="Checkpoint to start from (required for stage 2).")
@click.option("--cache", "cache_path", type=click.Path(exists=True), default=None,
              help="Negative cache CIRE file (stage 2).")
@click.option("--build-cache", is_flag=True, default=False,
              help="Build the stage-2 cache from --init before training.")
@click.option("--val-queries", type=click.Path(exists=True), default=None)
@click.option("--val-groups", type=click.Path(exists=True), default=None)
@click.option("--val-k", default="10,50", show_default=True)
@click.option("--val-convention", type=click.Choice(list(evaluator.CONVENTIONS)),
              default="fashioniq", show_default=True)
@click.option("--log", "log_path", type=click.Path(), default=None,
              help="Metrics log path (default: <out>.metrics.jsonl).")
@mapped_errors
def cmd_train(stage, triplets_path, images_path, texts_path, out_path, config_path,
              epochs, lr, tau, weight_decay, batch_size, neg_method, seed, hidden,
              neg_pool, init_path, cache_path, build_cache, val_queries, val_groups,
              val_k, val_convention, log_path):
    """Fine-tune stage 1 (in-batch) or stage 2 (full-corpus static negatives)."""
    stage_word = "one" if stage == "1" else "two"
    file_cfg = _load_config_file(config_path)
    settings = {
        "tau": _resolve(tau, file_cfg, "tau", 0.05),
        "lr": _resolve(lr, file_cfg, "lr", 1e-3),
        "weight_decay": _resolve(weight_decay, file_cfg, "weight_decay", 0.0),
        "batch_size": _resolve(batch_size, file_cfg, "batch_size", 32),
        "epochs": _resolve(epochs, file_cfg, "epochs",
                           STAGE_DEFAULTS[stage_word]["epochs"]),
        "neg_method": _resolve(neg_method, file_cfg, "neg_method", "target_replace"),
        "seed": _resolve(seed, file_cfg, "seed", 0),
        "hidden": _resolve(hidden, file_cfg, "hidden", None),
        "neg_pool": _resolve(neg_pool, file_cfg, "neg_pool", None),
    }
    init = model.load_checkpoint(init_path) if init_path else None
    problems = _validate_train_settings(settings, stage_word, init, cache_path,
                                        build_cache)
    if problems:
        raise ConfigError("invalid train configuration:\n  - "
                          + "\n  - ".join(problems))
    cfg = engine.TrainConfig(stage=stage_word, **settings)

    manifest = RunManifest(command=sys.argv[1:], seed=cfg.seed,
                           config={**settings, "stage": stage_word})
    for name, p in (("triplets", triplets_path), ("images", images_path),
                    ("texts", texts_path)):
        manifest.add_input(name, p)
    if init_path:
        manifest.add_input("init", init_path)

    triplets = forge.read_triplets(triplets_path)
    images = _load_store(images_path, "image")
    texts = _load_store(texts_path, "text")
    data = engine.TrainData(examples=engine.examples_from_triplets(triplets),
                            images=images, texts=texts)

    cache = None
    if stage_word == "two":
        if cache_path:
            manifest.add_input("cache", cache_path)
            cache = load_cache(cache_path)
        else:
            cache = engine.cache_targets(init, images)
            cache_out = str(out_path) + ".cache.cire"
            save_cache(cache, cache_out)
            manifest.add_output("cache", cache_out)

    val_fn = None
    if val_queries:
        queries = evaluator.read_queries(val_queries)
        groups = evaluator.read_groups(val_groups) if val_groups else None
        ks = _parse_int_list(val_k, "val-k")

        def val_fn(ckpt):
            rep = evaluator.evaluate(
                ckpt, queries, images, texts, ks=ks,
                convention=val_convention,
                subset_ks=[1] if val_convention == "cirr" else None,
                groups=groups,
            )
            if rep.rmean is None:
                raise ConfigError(
                    f"validation needs the {val_convention} rmean components in --val-k")
            return rep.rmean

        manifest.add_input("val_queries", val_queries)
        if val_groups:
            manifest.add_input("val_groups", val_groups)

    log_file = log_path or str(out_path) + ".metrics.jsonl"
    manifest.start("train")
    with open(log_file, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"config": {**settings, "stage": stage_word}},
                            sort_keys=True) + "\n")
        result = engine.train(data, cfg, init=init, cache=cache,
                              val_fn=val_fn, log_fh=fh)
    manifest.stop("train")
    model.save_checkpoint(result.checkpoint, out_path)
    manifest.add_output("checkpoint", out_path)
    manifest.add_output("metrics", log_file)
    manifest.write(str(out_path) + ".manifest.json")
    last = result.metrics[-1].loss if result.metrics else float("nan")
    click.echo(f"stage {stage} done: {cfg.epochs} epochs, "
               f"final epoch loss {last:.4f}, checkpoint {out_path}")


# --- eval --------------------------------------------------------------------

def _format_report(report: evaluator.EvalReport) -> str:
    lines = []
    lines.append(f"{'metric':<18}{'value':>10}")
    for k in sorted(report.recall_at):
        lines.append(f"{'R@' + str(k):<18}{report.recall_at[k] * 100:>9.2f}%")
    for k in sorted(report.subset_recall_at):
        lines.append(f"{'Rsubset@' + str(k):<18}{report.subset_recall_at[k] * 100:>9.2f}%")
    if report.rmean is not None:
        lines.append(f"{'Rmean':<18}{report.rmean * 100:>9.2f}%")
    return "\n".join(lines)


@cli.command("eval")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--queries", "queries_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_path", required=True, type=click.Path(exists=True))
@click.option("--texts", "texts_path", required=True, type=click.Path(exists=True))
@click.option("--k", "ks", default="1,5,10,50", show_default=True)
@click.option("--subset-k", "subset_ks", default=None,
              help="Comma-separated subset-recall cutoffs (needs --groups).")
@click.option("--groups", "groups_path", type=click.Path(exists=True), default=None)
@click.option("--convention", type=click.Choice(list(evaluator.CONVENTIONS)),
              default="cirr", show_default=True)
@click.option("--mask-reference/--no-mask-reference", "mask_reference", default=None,
              help="Mask each query's reference from its candidates "
                   "(default: on for cirr, off for fashioniq).")
@click.option("--report", "report_path", required=True, type=click.Path())
@mapped_errors
def cmd_eval(ckpt_path, queries_path, images_path, texts_path, ks, subset_ks,
             groups_path, convention, mask_reference, report_path):
    """Exhaustively rank candidates and report Recall@K / subset recall / Rmean."""
    ckpt = model.load_checkpoint(ckpt_path)
    queries = evaluator.read_queries(queries_path)
    images = _load_store(images_path, "image")
    texts = _load_store(texts_path, "text")
    k_list = _parse_int_list(ks, "k")
    subset_list = _parse_int_list(subset_ks, "subset-k") if subset_ks else None
    if subset_list and groups_path is None:
        raise ConfigError("subset metrics require --groups")
    groups = evaluator.read_groups(groups_path) if groups_path else None

    manifest = RunManifest(command=sys.argv[1:], config={
        "k": ks, "subset_k": subset_ks, "convention": convention,
        "mask_reference": mask_reference,
    })
    for name, p in (("checkpoint", ckpt_path), ("queries", queries_path),
                    ("images", images_path), ("texts", texts_path)):
        manifest.add_input(name, p)
    if groups_path:
        manifest.add_input("groups", groups_path)

    manifest.start("eval")
    report = evaluator.evaluate(
        ckpt, queries, images, texts, ks=k_list, convention=convention,
        subset_ks=subset_list, groups=groups, mask_reference=mask_reference,
    )
    manifest.stop("eval")

    doc = report.to_dict()
    doc["config"] = manifest.config
    doc["checkpoint_fingerprint"] = sha256_file(ckpt_path)
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add_output("report", report_path)
    manifest.write(str(report_path) + ".manifest.json")
    click.echo(_format_report(report))


# --- negstudy ----------------------------------------------------------------

@cli.command("negstudy")
@click.option("--triplets", "triplets_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_path", required=True, type=click.Path(exists=True))
@click.option("--texts", "texts_path", required=True, type=click.Path(exists=True))
@click.option("--queries", "queries_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--k", "eval_k", type=int, default=10, show_default=True)
@click.option("--epochs", type=int, default=20, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--tau", type=float, default=0.05, show_default=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--hidden", type=int, default=16, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@mapped_errors
def cmd_negstudy(triplets_path, images_path, texts_path, queries_path, out_dir,
                 eval_k, epochs, lr, tau, batch_size, hidden, seed):
    """Train four models differing only in negative construction; compare recall."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=sys.argv[1:], seed=seed, config={
        "k": eval_k, "epochs": epochs, "lr": lr, "tau": tau,
        "batch_size": batch_size, "hidden": hidden, "seed": seed,
    })
    for name, p in (("triplets", triplets_path), ("images", images_path),
                    ("texts", texts_path), ("queries", queries_path)):
        manifest.add_input(name, p)
    triplets = forge.read_triplets(triplets_path)
    images = _load_store(images_path, "image")
    texts = _load_store(texts_path, "text")
    queries = evaluator.read_queries(queries_path)
    data = engine.TrainData(examples=engine.examples_from_triplets(triplets),
                            images=images, texts=texts)
    rows = []
    for method in engine.NEG_METHODS:
        manifest.start(method)
        cfg = engine.TrainConfig(tau=tau, lr=lr, batch_size=batch_size,
                                 epochs=epochs, stage="one", neg_method=method,
                                 seed=seed, hidden=hidden)
        result = engine.train(data, cfg)
        ckpt_path = out / f"stage1_{method}.cirm"
        model.save_checkpoint(result.checkpoint, ckpt_path)
        report = evaluator.evaluate(result.checkpoint, queries, images, texts,
                                    ks=(eval_k,), convention="cirr")
        rows.append({
            "method": method,
            "label": engine.NEG_METHOD_LABELS[method],
            f"recall_at_{eval_k}": report.recall_at[eval_k],
        })
        manifest.stop(method)
        manifest.add_output(f"checkpoint_{method}", ckpt_path)
    doc = {"config": manifest.config, "rows": rows}
    report_path = out / "negstudy.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add_output("report", report_path)
    manifest.write(out / "manifest.json")
    click.echo(f"{'method':<18}{'label':>6}{'R@' + str(eval_k):>10}")
    for row in rows:
        click.echo(f"{row['method']:<18}{row['label']:>6}"
                   f"{row[f'recall_at_{eval_k}'] * 100:>9.2f}%")


def main():
    try:
        cli(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)


if __name__ == "__main__":
    main()
