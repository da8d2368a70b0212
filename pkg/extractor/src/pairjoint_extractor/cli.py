"""CLI for the extraction pipeline.

    pairjoint-extract extract --model M --corpus FILE --out DIR [...]
    pairjoint-extract annotate-syntax --records FILE --parses FILE --model M --out FILE
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .extraction import ExtractionError, ExtractionJob, extract, load_model, write_job_manifest
from .records import read_records, write_records
from .syntax import annotate_syntactic_distance, read_parses


@click.group()
def cli():
    """Extract pairwise conditional tables from a masked language model."""


@cli.command("extract")
@click.option("--model", required=True, help="Model label or local checkpoint path.")
@click.option("--corpus", required=True, type=click.Path(exists=True, path_type=Path),
              help="Plain text corpus, one sentence per line.")
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Output directory.")
@click.option("--scheme", type=click.Choice(["random_pairs", "contiguous_pairs"]),
              default="contiguous_pairs", show_default=True)
@click.option("--count", default=100, show_default=True, help="Records to extract.")
@click.option("--seed", default=0, show_default=True)
@click.option("--top-k", default=0, show_default=True,
              help="Truncate table rows to their K largest entries (0 = full).")
@click.option("--batch-size", default=16, show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--max-length", default=128, show_default=True)
@click.option("--dataset", default=None, help="Dataset label for the manifest.")
def cmd_extract(model, corpus, out, scheme, count, seed, top_k, batch_size, device,
                max_length, dataset):
    """Mask position pairs and serialize full conditional tables."""
    out.mkdir(parents=True, exist_ok=True)
    job = ExtractionJob(model=model, corpus=corpus, scheme=scheme, count=count,
                        seed=seed, top_k=top_k, batch_size=batch_size, device=device,
                        max_length=max_length, out=out / "records.pjr")
    extract(job)
    write_job_manifest(job, out / "manifest.txt", corpus_label=corpus.name,
                       dataset=dataset or f"{corpus.stem}-{scheme}-n{count}")
    click.echo(f"wrote {count} records to {job.out}")


@cli.command("annotate-syntax")
@click.option("--records", "records_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--parses", "parses_path", required=True,
              type=click.Path(exists=True, path_type=Path),
              help="JSON lines: {\"words\": [...], \"heads\": [...]} per sentence.")
@click.option("--model", required=True, help="Tokenizer source for word alignment.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
def cmd_annotate(records_path, parses_path, model, out):
    """Add dependency-tree distances to an existing record file."""
    _, tokenizer = load_model(model)
    records, top_k = read_records(records_path)
    annotated = annotate_syntactic_distance(records, read_parses(parses_path), tokenizer)
    if not annotated:
        raise ExtractionError("no record aligned with any parse")
    write_records(annotated, out, top_k=top_k)
    click.echo(f"annotated {len(annotated)}/{len(records)} records into {out}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 130
    except click.ClickException as exc:
        exc.show()
        return 2
    except (ExtractionError, ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
