"""Command-line entry points: ingest, stats, index, run, report."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .corpus import dataset_stats, load_conll, load_dataset, read_sentences, save_conll
from .errors import ConfigError, PromptNerError
from .retrieval import EngineKind, FallbackEmbedder, build_index, save_index
from .runner import (
    MANIFEST_VERSION,
    dry_run,
    manifest_from_dict,
    render_report,
    run_experiment,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3


@click.group()
@click.option("-v", "--verbose", is_flag=True, default=False,
              help="Log run progress and retry activity.")
def main(verbose):
    """Few-shot NER prompting experiments."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _load_any_dataset(manifest, train, test, scheme, name):
    if manifest:
        return load_dataset(manifest)
    if not train:
        raise ConfigError("provide --manifest or --train")
    if test:
        from .corpus import Dataset, collect_entity_types

        tr, rep_tr = read_sentences(train, scheme=scheme, split="train")
        te, rep_te = read_sentences(test, scheme=scheme, split="test")
        return Dataset(name=name or Path(train).stem, train=tuple(tr), test=tuple(te),
                       entity_types=collect_entity_types(tr + te),
                       label_repairs=rep_tr + rep_te)
    return load_conll(train, scheme=scheme, split="train", name=name)


@main.command()
@click.option("--manifest", type=click.Path(), default=None, help="Sidecar JSON manifest.")
@click.option("--train", type=click.Path(), default=None)
@click.option("--test", type=click.Path(), default=None)
@click.option("--scheme", type=click.Choice(["bio", "plain"]), default="bio")
@click.option("--name", default=None)
@click.option("--out", type=click.Path(), required=True, help="Output directory.")
def ingest(manifest, train, test, scheme, name, out):
    """Normalize a dataset to canonical BIO TSV plus sidecar manifest and stats."""
    try:
        d = _load_any_dataset(manifest, train, test, scheme, name)
    except PromptNerError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_conll(list(d.train), out_dir / "train.tsv")
    if d.test:
        save_conll(list(d.test), out_dir / "test.tsv")
    sidecar = {
        "name": d.name, "scheme": "bio", "train": "train.tsv",
        "test": "test.tsv" if d.test else None,
        "entity_types": list(d.entity_types),
    }
    (out_dir / "data.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    (out_dir / "stats.json").write_text(dataset_stats(d).to_json() + "\n")
    click.echo(dataset_stats(d).to_json())


@main.command()
@click.option("--manifest", type=click.Path(), default=None)
@click.option("--train", type=click.Path(), default=None)
@click.option("--test", type=click.Path(), default=None)
@click.option("--scheme", type=click.Choice(["bio", "plain"]), default="bio")
@click.option("--name", default=None)
def stats(manifest, train, test, scheme, name):
    """Print dataset statistics as JSON."""
    try:
        d = _load_any_dataset(manifest, train, test, scheme, name)
    except PromptNerError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(dataset_stats(d).to_json())


@main.command()
@click.option("--train", type=click.Path(exists=True), required=True)
@click.option("--scheme", type=click.Choice(["bio", "plain"]), default="bio")
@click.option("--engine", type=click.Choice([k.value for k in EngineKind]),
              default="tfidf")
@click.option("--out", type=click.Path(), required=True, help="Index snapshot path.")
def index(train, scheme, engine, out):
    """Build a retrieval index snapshot from a training file."""
    try:
        sentences, _ = read_sentences(train, scheme=scheme, split="train")
        kind = EngineKind(engine)
        embedder = None if kind is EngineKind.TFIDF else FallbackEmbedder()
        idx = build_index(sentences, kind, embedder=embedder)
    except PromptNerError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    save_index(idx, out)
    click.echo(f"indexed {len(idx)} sentences ({engine}) -> {out}")


def _apply_overrides(data: dict, overrides: tuple[str, ...]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return data


@main.command()
@click.argument("manifest_path", type=click.Path())
@click.option("--set", "overrides", multiple=True,
              help="Override any manifest field, e.g. --set shots=10 --set llm.mock.rate=0.5")
@click.option("--mode", type=click.Choice(["static", "dynamic"]), default=None)
@click.option("--engine", type=click.Choice([k.value for k in EngineKind]), default=None)
@click.option("--shots", type=int, default=None)
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--limit", type=int, default=None)
@click.option("--no-cache", is_flag=True, default=False)
@click.option("--dry-run", "dry", is_flag=True, default=False,
              help="Print the first assembled prompt and exit.")
def run(manifest_path, overrides, mode, engine, shots, output_dir, limit, no_cache, dry):
    """Execute an experiment manifest."""
    try:
        path = Path(manifest_path)
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}")
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version: {data.get('version')}")
        _apply_overrides(data, overrides)
        if mode:
            data["mode"] = mode
        if engine:
            data["engine"] = engine
        if shots is not None:
            data["shots"] = shots
        if output_dir:
            data["output_dir"] = output_dir
        if limit is not None:
            data["limit"] = limit
        if no_cache:
            data.setdefault("llm", {})["cache"] = False
        manifest = manifest_from_dict(data, base=path.parent)
        if dry:
            click.echo(dry_run(manifest))
            sys.exit(EXIT_OK)
        result = run_experiment(manifest)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except PromptNerError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    agg = result.aggregate
    click.echo(f"{result.experiment_id}: "
               f"P={agg.precision:.4f} R={agg.recall:.4f} F1={agg.f1:.4f} "
               f"({len(result.runs)} run(s), {result.failures} failed sentence(s))")
    if not result.ok:
        sys.exit(EXIT_PARTIAL)


@main.command()
@click.argument("output_dir", type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["csv", "json", "markdown"]),
              default="csv")
def report(output_dir, fmt):
    """Render the experiment grid as CSV, JSON, or a markdown table."""
    try:
        click.echo(render_report(output_dir, fmt), nl=False)
    except PromptNerError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


if __name__ == "__main__":
    main()
