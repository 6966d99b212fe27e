"""cir-export command line: embeddings, captions, and annotation imports."""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click

from .annotations import AnnotationError, import_cirr, import_fashioniq
from .captions import CaptionExportError, export_captions
from .cire import CireError
from .encoders import EncoderError, make_image_encoder, make_text_encoder
from .jobs import (
    ExportError,
    ExportJob,
    export_image_embeddings,
    export_text_embeddings,
    image_list_from_dir,
)

_ERRORS = (AnnotationError, CaptionExportError, CireError, EncoderError,
           ExportError)

CONTEXT_SETTINGS = {"terminal_width": 96, "max_content_width": 96}


@click.group(context_settings=CONTEXT_SETTINGS)
def cli():
    """Export embeddings, captions, and annotations in cirkit's formats."""


@cli.command("images")
@click.option("--image-dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--encoder", default="pixelstat", show_default=True)
@click.option("--dim", type=int, default=256, show_default=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
def cmd_images(image_dir, out_path, encoder, dim, batch_size):
    """Embed every image in a folder (row order = sorted filename stems)."""
    job = ExportJob(inputs=image_list_from_dir(image_dir),
                    encoder=make_image_encoder(encoder, dim),
                    out_path=out_path, batch_size=batch_size)
    export_image_embeddings(job)
    click.echo(f"exported {len(job.inputs) - len(job.skipped)} image embeddings "
               f"to {out_path}" + (f" ({len(job.skipped)} skipped)"
                                   if job.skipped else ""))


@cli.command("texts")
@click.option("--texts", "texts_path", required=True, type=click.Path(exists=True),
              help="One text per line; the text doubles as the row id.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--encoder", default="hashbow", show_default=True)
@click.option("--dim", type=int, default=256, show_default=True)
def cmd_texts(texts_path, out_path, encoder, dim):
    """Embed a list of texts."""
    with open(texts_path, "r", encoding="utf-8") as fh:
        texts = [line.rstrip("\n") for line in fh if line.strip()]
    job = ExportJob(inputs=[(t, t) for t in texts],
                    encoder=make_text_encoder(encoder, dim),
                    out_path=out_path)
    export_text_embeddings(job)
    click.echo(f"exported text embeddings to {out_path}")


@cli.command("captions")
@click.option("--image-dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--url", default=None,
              help="Captioning endpoint (falls back to $CIR_CAPTION_URL).")
@click.option("--type-word", default="image", show_default=True)
@click.option("--k", type=int, default=10, show_default=True)
def cmd_captions(image_dir, out_path, url, type_word, k):
    """Caption a folder of images through the HTTP provider protocol."""
    url = url or os.environ.get("CIR_CAPTION_URL")
    if not url:
        raise click.UsageError("need --url or $CIR_CAPTION_URL")
    fresh = export_captions(image_list_from_dir(image_dir), url, type_word, k,
                            out_path)
    click.echo(f"captioned {fresh} new images into {out_path}")


@cli.command("import-fashioniq")
@click.option("--root", required=True, type=click.Path(exists=True))
@click.option("--phase", default="train", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--caption-mode", type=click.Choice(["concat", "separate"]),
              default="concat", show_default=True,
              help="Join the two human captions or emit one triplet each.")
@click.option("--splits", default="dress,shirt,toptee", show_default=True)
def cmd_import_fashioniq(root, phase, out_path, caption_mode, splits):
    """FashionIQ caption files -> annotated triplets jsonl."""
    count = import_fashioniq(root, phase, out_path, caption_mode=caption_mode,
                             splits=tuple(splits.split(",")))
    click.echo(f"imported {count} FashionIQ triplets into {out_path}")


@cli.command("import-cirr")
@click.option("--root", required=True, type=click.Path(exists=True))
@click.option("--phase", default="train", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--groups-out", required=True, type=click.Path())
def cmd_import_cirr(root, phase, out_path, groups_out):
    """CIRR caption file -> triplets jsonl + semantic groups jsonl."""
    n_trip, n_groups = import_cirr(root, phase, out_path, groups_out)
    click.echo(f"imported {n_trip} CIRR triplets and {n_groups} groups")


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
    except _ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
