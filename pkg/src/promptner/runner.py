"""Experiment orchestration: manifest -> prompts -> completions -> metrics.

Each (manifest, run seed) pair appends one JSONL record per test sentence;
records already on disk are skipped, so a killed run resumes where it stopped
and finishes with byte-identical reports. Completed runs are scored with
bootstrap intervals and averaged into an aggregate report.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import corpus as corpus_mod
from .corpus import Dataset, LabeledSentence, extract_spans, frequency_lexicon, load_dataset
from .errors import ConfigError, ReportError, TransportError
from .evaluation import (
    AggregateReport,
    MetricReport,
    SentenceCounts,
    aggregate_runs,
    bootstrap_ci,
    match_sentence,
    micro_prf,
)
from .llm import (
    PARAM_PRESETS,
    ChatClient,
    Completer,
    GenerationParams,
    MockBehavior,
    MockLLM,
    RetryPolicy,
    prompt_digest,
)
from .parsing import parse_response, to_spans
from .prompting import (
    ExampleBlockConfig,
    ExampleFormat,
    ExampleMode,
    PromptComponents,
    SamplingUnit,
    build_prompt,
    load_prompt_fixture,
    render_high_freq,
    sample_static_examples,
)
from .retrieval import EngineKind, FallbackEmbedder, HttpEmbedder, build_index, retrieve

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
DEFAULT_RUNS = 4


@dataclass
class ExperimentManifest:
    name: str
    dataset_manifest: Path | None = None
    train_path: Path | None = None
    test_path: Path | None = None
    scheme: str = "bio"
    prompts: Path | None = None
    components: tuple[str, ...] = ()
    high_freq_source: str = "fixture"  # or "computed"
    top_k: int = 6
    mode: str = "static"  # or "dynamic"
    engine: EngineKind | None = None
    example_format: ExampleFormat = ExampleFormat.TOKENS_IN_TOKENS_OUT
    sampling: SamplingUnit = SamplingUnit.PER_LABEL
    shots: int = 5
    runs: int = DEFAULT_RUNS
    seeds: tuple[int, ...] = ()
    llm_preset: str | None = None
    llm_params: GenerationParams | None = None
    mock: dict | None = None
    endpoint: str | None = None
    embedder_endpoint: str | None = None
    max_concurrency: int = 4
    use_cache: bool = True
    timeout: float = 60.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    n_boot: int = 1000
    bootstrap_seed: int = 42
    level: float = 0.95
    output_dir: Path = Path("out")
    limit: int | None = None

    def validate(self) -> None:
        if self.shots < 0:
            raise ConfigError("shots must be >= 0")
        if self.mode not in ("static", "dynamic"):
            raise ConfigError(f"unknown mode: {self.mode}")
        if self.mode == "dynamic" and self.engine is None:
            raise ConfigError("dynamic mode requires an engine kind")
        if self.runs != len(self.seeds):
            raise ConfigError(f"runs ({self.runs}) != number of seeds ({len(self.seeds)})")
        if self.dataset_manifest is None and self.train_path is None:
            raise ConfigError("manifest needs a dataset (manifest or train/test paths)")
        if self.prompts is None:
            raise ConfigError("manifest needs a prompt fixture path")
        if self.mock is None and self.endpoint is None:
            raise ConfigError("manifest needs either a mock block or an endpoint")
        if self.high_freq_source not in ("fixture", "computed"):
            raise ConfigError(f"unknown high_freq_source: {self.high_freq_source}")

    def params(self) -> GenerationParams:
        if self.llm_params is not None:
            return self.llm_params
        if self.llm_preset:
            if self.llm_preset not in PARAM_PRESETS:
                raise ConfigError(f"unknown preset: {self.llm_preset}")
            return PARAM_PRESETS[self.llm_preset]
        return PARAM_PRESETS["gpt-4"]

    def canonical_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "name": self.name,
            "dataset_manifest": str(self.dataset_manifest) if self.dataset_manifest else None,
            "train": str(self.train_path) if self.train_path else None,
            "test": str(self.test_path) if self.test_path else None,
            "scheme": self.scheme,
            "prompts": str(self.prompts),
            "components": list(self.components),
            "high_freq_source": self.high_freq_source,
            "top_k": self.top_k,
            "mode": self.mode,
            "engine": self.engine.value if self.engine else None,
            "format": self.example_format.value,
            "sampling": self.sampling.value,
            "shots": self.shots,
            "runs": self.runs,
            "seeds": list(self.seeds),
            "llm_preset": self.llm_preset,
            "llm_params": None if self.llm_params is None else {
                "model_id": self.llm_params.model_id,
                "temperature": self.llm_params.temperature,
                "top_p": self.llm_params.top_p,
                "frequency_penalty": self.llm_params.frequency_penalty,
                "presence_penalty": self.llm_params.presence_penalty,
                "max_output_tokens": self.llm_params.max_output_tokens,
            },
            "mock": self.mock,
            "endpoint": self.endpoint,
            "embedder_endpoint": self.embedder_endpoint,
            "n_boot": self.n_boot,
            "bootstrap_seed": self.bootstrap_seed,
            "level": self.level,
        }

    def experiment_hash(self) -> str:
        payload = json.dumps(self.canonical_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    @property
    def experiment_id(self) -> str:
        return f"{self.name}-{self.experiment_hash()[:12]}"


def manifest_from_dict(data: dict, base: Path | None = None) -> ExperimentManifest:
    base = base or Path.cwd()

    def respath(value):
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    dataset = data.get("dataset", {})
    llm = data.get("llm", {})
    boot = data.get("bootstrap", {})
    runs = int(data.get("runs", DEFAULT_RUNS))
    seeds = tuple(data.get("seeds", range(1, runs + 1)))
    params = None
    if "params" in llm:
        params = GenerationParams(**llm["params"])
    engine = data.get("engine")
    m = ExperimentManifest(
        name=data.get("name", "experiment"),
        dataset_manifest=respath(dataset.get("manifest")),
        train_path=respath(dataset.get("train")),
        test_path=respath(dataset.get("test")),
        scheme=dataset.get("scheme", "bio"),
        prompts=respath(data.get("prompts")),
        components=tuple(data.get("components", ())),
        high_freq_source=data.get("high_freq_source", "fixture"),
        top_k=int(data.get("top_k", 6)),
        mode=data.get("mode", "static"),
        engine=EngineKind(engine) if engine else None,
        example_format=ExampleFormat(data.get("format", "tokens_in_tokens_out")),
        sampling=SamplingUnit(data.get("sampling", "per_label")),
        shots=int(data.get("shots", 5)),
        runs=runs,
        seeds=seeds,
        llm_preset=llm.get("preset"),
        llm_params=params,
        mock=llm.get("mock"),
        endpoint=llm.get("endpoint"),
        timeout=float(llm.get("timeout", 60.0)),
        retry=RetryPolicy(**llm.get("retry", {})),
        embedder_endpoint=data.get("embedder", {}).get("endpoint"),
        max_concurrency=int(llm.get("max_concurrency", 4)),
        use_cache=bool(llm.get("cache", True)),
        n_boot=int(boot.get("n_boot", 1000)),
        bootstrap_seed=int(boot.get("seed", 42)),
        level=float(boot.get("level", 0.95)),
        output_dir=respath(data.get("output_dir", "out")),
        limit=data.get("limit"),
    )
    m.validate()
    return m


def load_manifest(path: str | Path) -> ExperimentManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest is not valid JSON: {exc}") from exc
    if data.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version: {data.get('version')}")
    return manifest_from_dict(data, base=path.parent)


@dataclass
class RunOutcome:
    run_seed: int
    report: MetricReport
    repairs: dict[str, int]
    failed_sentences: int
    n_sentences: int


@dataclass
class ExperimentResult:
    experiment_id: str
    directory: Path
    runs: list[RunOutcome]
    aggregate: AggregateReport
    failures: int = 0

    @property
    def ok(self) -> bool:
        return self.failures == 0


def _load_dataset(manifest: ExperimentManifest) -> Dataset:
    if manifest.dataset_manifest:
        return load_dataset(manifest.dataset_manifest)
    train, rep_train = corpus_mod.read_sentences(
        manifest.train_path, scheme=manifest.scheme, split="train")
    test, rep_test = ([], 0)
    if manifest.test_path:
        test, rep_test = corpus_mod.read_sentences(
            manifest.test_path, scheme=manifest.scheme, split="test")
    return Dataset(name=manifest.name, train=tuple(train), test=tuple(test),
                   entity_types=corpus_mod.collect_entity_types(list(train) + list(test)),
                   label_repairs=rep_train + rep_test)


def _build_components(manifest: ExperimentManifest, dataset: Dataset,
                      run_seed: int) -> PromptComponents:
    sections = load_prompt_fixture(manifest.prompts)
    high_freq_text = None
    if "high_freq" in manifest.components and manifest.high_freq_source == "computed":
        lexicon = frequency_lexicon(dataset, top_k=manifest.top_k)
        high_freq_text = render_high_freq(lexicon, top_k=manifest.top_k)
    cfg = ExampleBlockConfig(
        mode=(ExampleMode.DYNAMIC_RETRIEVED if manifest.mode == "dynamic"
              else ExampleMode.STATIC_RANDOM),
        k=manifest.shots,
        format=manifest.example_format,
        sampling=manifest.sampling,
        seed=run_seed if manifest.mode == "static" else None,
        engine=manifest.engine,
    )
    return PromptComponents.from_fixture(
        sections, enabled=manifest.components, high_freq_text=high_freq_text,
        example_config=cfg)


def _make_completer(manifest: ExperimentManifest, dataset: Dataset,
                    run_seed: int) -> Completer:
    if manifest.mock is not None:
        behavior = MockBehavior(manifest.mock.get("behavior", "gold_echo"))
        # effective corruption stream differs per run: mock seed + run seed
        mock = MockLLM(
            behavior=behavior,
            rate=float(manifest.mock.get("rate", 0.0)),
            seed=int(manifest.mock.get("seed", 0)) + run_seed,
            fixtures=manifest.mock.get("fixtures"),
            alphabet=dataset.bio_alphabet,
        )
        mock.register_sentences(dataset.train + dataset.test)
        return mock
    cache_dir = manifest.output_dir / "cache" if manifest.use_cache else None
    return ChatClient(endpoint=manifest.endpoint, cache_dir=cache_dir,
                      max_concurrency=manifest.max_concurrency,
                      timeout=manifest.timeout)


def _complete_batch(completer: Completer, prepared: list, params: GenerationParams,
                    policy: RetryPolicy, max_concurrency: int):
    """Yield one CompletionRecord or TransportError per prompt, in input order.

    Prompts in the window complete concurrently (the in-flight cap itself
    lives in the client); yielding in input order lets the caller persist each
    record as soon as its turn comes, so a crash loses at most the tail.
    """

    def one(item):
        _, bundle = item
        try:
            return completer.complete(bundle, params, policy)
        except TransportError as exc:
            return exc

    if max_concurrency > 1 and len(prepared) > 1:
        from concurrent.futures import ThreadPoolExecutor

        pool = ThreadPoolExecutor(max_workers=max_concurrency)
        futures = [pool.submit(one, item) for item in prepared]
        try:
            for future in futures:
                yield future.result()
        finally:
            pool.shutdown(wait=True, cancel_futures=True)
    else:
        for item in prepared:
            yield one(item)


def _make_record(s: LabeledSentence, bundle, params: GenerationParams,
                 completion, alphabet) -> dict:
    digest = prompt_digest(bundle, params)
    gold_spans = extract_spans(s)
    if isinstance(completion, TransportError):
        return {
            "sentence_id": s.id, "prompt_digest": digest,
            "response_ref": None, "labels": ["O"] * len(s),
            "repair": "failed", "dropped_items": 0,
            "filled_items": len(s), "failed": True,
            "error": str(completion),
            "tp": 0, "fp": 0, "fn": len(gold_spans),
        }
    pred = parse_response(completion.raw_text, s.texts, alphabet)
    tp, fp, fn = match_sentence(gold_spans, to_spans(pred))
    return {
        "sentence_id": s.id, "prompt_digest": digest,
        "response_ref": completion.prompt_digest,
        "example_ids": list(bundle.included_example_ids),
        "labels": list(pred.labels), "repair": pred.repair.value,
        "dropped_items": pred.dropped_items,
        "filled_items": pred.filled_items, "failed": False,
        "tp": tp, "fp": fp, "fn": fn,
    }


def _existing_record_ids(path: Path) -> set[str]:
    if not path.exists():
        return set()
    done = set()
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            done.add(json.loads(line)["sentence_id"])
        except (json.JSONDecodeError, KeyError):
            continue  # half-written trailing line from a crash
    return done


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def run_experiment(manifest: ExperimentManifest,
                   completer: Completer | None = None) -> ExperimentResult:
    """Execute every run of the manifest grid cell, resuming where possible."""
    manifest.validate()
    dataset = _load_dataset(manifest)
    if not dataset.test:
        raise ConfigError("dataset has no test split to evaluate")
    test_sentences = list(dataset.test)
    if manifest.limit:
        test_sentences = test_sentences[: manifest.limit]
    alphabet = dataset.bio_alphabet

    exp_dir = manifest.output_dir / manifest.experiment_id
    exp_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(exp_dir / "manifest.json", manifest.canonical_dict())

    index = None
    embedder = None
    if manifest.mode == "dynamic":
        embedder = (HttpEmbedder(manifest.embedder_endpoint)
                    if manifest.embedder_endpoint else FallbackEmbedder())
        index = build_index(dataset.train, manifest.engine, embedder=embedder)
    train_by_id = {s.id: s for s in dataset.train}

    outcomes: list[RunOutcome] = []
    failures_total = 0
    for run_seed in manifest.seeds:
        components = _build_components(manifest, dataset, run_seed)
        run_completer = completer or _make_completer(manifest, dataset, run_seed)
        params = manifest.params()
        policy = manifest.retry

        static_examples: list[LabeledSentence] = []
        if manifest.mode == "static" and manifest.shots > 0:
            static_examples = sample_static_examples(dataset, components.example_config)

        records_path = exp_dir / f"records_run{run_seed}.jsonl"
        done = _existing_record_ids(records_path)
        if records_path.exists() and records_path.stat().st_size \
                and not records_path.read_bytes().endswith(b"\n"):
            with open(records_path, "a", encoding="utf-8") as sink:
                sink.write("\n")  # hard kill tore the last line; start fresh
        pending = [s for s in test_sentences if s.id not in done]
        if done:
            logger.info("run %s: resuming, %d of %d sentences already done",
                        run_seed, len(done), len(test_sentences))
        window = max(1, manifest.max_concurrency) * 4
        with open(records_path, "a", encoding="utf-8") as sink:
            for start in range(0, len(pending), window):
                batch = pending[start:start + window]
                prepared = []
                for s in batch:
                    if manifest.mode == "dynamic" and manifest.shots > 0:
                        hits = retrieve(index, s.texts, manifest.shots,
                                        embedder=embedder)
                        examples = [train_by_id[h.sentence_id] for h in hits]
                    else:
                        examples = static_examples
                    bundle = build_prompt(components, examples, s.texts, query_id=s.id)
                    prepared.append((s, bundle))
                completions = _complete_batch(
                    run_completer, prepared, params, policy,
                    manifest.max_concurrency)
                # records go to disk in dataset order whatever the completion
                # order was, so outputs stay byte-stable
                for (s, bundle), completion in zip(prepared, completions):
                    sink.write(json.dumps(
                        _make_record(s, bundle, params, completion, alphabet),
                        sort_keys=True) + "\n")
                    sink.flush()

        outcome = _score_run(manifest, records_path, run_seed,
                             expected_ids=[s.id for s in test_sentences])
        failures_total += outcome.failed_sentences
        logger.info("run %s: P=%.4f R=%.4f F1=%.4f (%d sentences, %d failed)",
                    run_seed, outcome.report.precision, outcome.report.recall,
                    outcome.report.f1, outcome.n_sentences,
                    outcome.failed_sentences)
        outcomes.append(outcome)
        _dump_json(exp_dir / f"report_run{run_seed}.json", _run_payload(outcome))

    aggregate = aggregate_runs([o.report for o in outcomes])
    payload = aggregate.as_dict()
    payload.update({
        "experiment_id": manifest.experiment_id,
        "name": manifest.name,
        "mode": manifest.mode,
        "engine": manifest.engine.value if manifest.engine else None,
        "shots": manifest.shots,
        "run_seeds": list(manifest.seeds),
        "failed_sentences": failures_total,
        "repairs": {k: sum(o.repairs.get(k, 0) for o in outcomes)
                    for k in ("length_mismatch", "token_mismatch", "unparseable")},
    })
    _dump_json(exp_dir / "aggregate.json", payload)
    return ExperimentResult(
        experiment_id=manifest.experiment_id, directory=exp_dir,
        runs=outcomes, aggregate=aggregate, failures=failures_total)


def _score_run(manifest: ExperimentManifest, records_path: Path, run_seed: int,
               expected_ids: Sequence[str]) -> RunOutcome:
    by_id: dict[str, dict] = {}
    for line in records_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            continue  # torn trailing line from a hard kill; sentence was re-run
        by_id.setdefault(record["sentence_id"], record)
    missing = [sid for sid in expected_ids if sid not in by_id]
    if missing:
        raise ConfigError(f"run {run_seed} incomplete: {len(missing)} sentences missing")
    counts = [SentenceCounts(sid, by_id[sid]["tp"], by_id[sid]["fp"], by_id[sid]["fn"])
              for sid in sorted(expected_ids)]
    tp = sum(c.tp for c in counts)
    fp = sum(c.fp for c in counts)
    fn = sum(c.fn for c in counts)
    precision, recall, f1 = micro_prf(tp, fp, fn)
    ci = bootstrap_ci(counts, n_boot=manifest.n_boot, seed=manifest.bootstrap_seed,
                      level=manifest.level)
    report = MetricReport(precision=precision, recall=recall, f1=f1, ci=ci,
                          n_boot=manifest.n_boot, seed=manifest.bootstrap_seed,
                          level=manifest.level, support=tp + fn, predicted=tp + fp)
    repairs = {"length_mismatch": 0, "token_mismatch": 0, "unparseable": 0}
    failed = 0
    for record in by_id.values():
        if record.get("failed"):
            failed += 1
        elif record["repair"] in repairs:
            repairs[record["repair"]] += 1
    return RunOutcome(run_seed=run_seed, report=report, repairs=repairs,
                      failed_sentences=failed, n_sentences=len(expected_ids))


def _run_payload(outcome: RunOutcome) -> dict:
    return {
        "run_seed": outcome.run_seed,
        "metrics": outcome.report.as_dict(),
        "repairs": outcome.repairs,
        "failed_sentences": outcome.failed_sentences,
        "n_sentences": outcome.n_sentences,
    }


def dry_run(manifest: ExperimentManifest) -> str:
    """Assemble the first prompt of the first run without calling any LLM."""
    manifest.validate()
    dataset = _load_dataset(manifest)
    if not dataset.test:
        raise ConfigError("dataset has no test split")
    run_seed = manifest.seeds[0]
    components = _build_components(manifest, dataset, run_seed)
    query = dataset.test[0]
    if manifest.mode == "dynamic" and manifest.shots > 0:
        embedder = (HttpEmbedder(manifest.embedder_endpoint)
                    if manifest.embedder_endpoint else FallbackEmbedder())
        index = build_index(dataset.train, manifest.engine, embedder=embedder)
        hits = retrieve(index, query.texts, manifest.shots, embedder=embedder)
        by_id = {s.id: s for s in dataset.train}
        examples = [by_id[h.sentence_id] for h in hits]
    else:
        examples = sample_static_examples(dataset, components.example_config) \
            if manifest.shots > 0 else []
    bundle = build_prompt(components, examples, query.texts, query_id=query.id)
    return (f"# system\n{bundle.system_message}\n\n# user\n{bundle.user_message}\n"
            f"\n# included examples: {list(bundle.included_example_ids)}\n")


REPORT_COLUMNS = ("experiment", "mode", "engine", "shots", "run",
                  "precision", "recall", "f1",
                  "p_lo", "p_hi", "r_lo", "r_hi", "f1_lo", "f1_hi")


def collect_report_rows(output_dir: str | Path) -> list[dict]:
    """Gather per-run and AVG rows from every experiment under output_dir."""
    output_dir = Path(output_dir)
    aggregates = sorted(output_dir.glob("*/aggregate.json"))
    if not aggregates:
        raise ReportError(f"no completed experiments under {output_dir}")
    rows: list[dict] = []
    for agg_path in aggregates:
        agg = json.loads(agg_path.read_text(encoding="utf-8"))
        exp_dir = agg_path.parent
        head = {
            "experiment": agg.get("name", exp_dir.name),
            "mode": agg.get("mode", ""),
            "engine": agg.get("engine") or "",
            "shots": agg.get("shots", ""),
        }
        for seed in agg.get("run_seeds", []):
            run_path = exp_dir / f"report_run{seed}.json"
            if not run_path.exists():
                continue  # partial grid: render with explicit gaps
            run = json.loads(run_path.read_text(encoding="utf-8"))
            metrics = run["metrics"]
            ci = metrics.get("ci", {})
            rows.append({
                **head, "run": str(seed),
                "precision": metrics["precision"], "recall": metrics["recall"],
                "f1": metrics["f1"],
                "p_lo": ci.get("precision", ["", ""])[0],
                "p_hi": ci.get("precision", ["", ""])[1],
                "r_lo": ci.get("recall", ["", ""])[0],
                "r_hi": ci.get("recall", ["", ""])[1],
                "f1_lo": ci.get("f1", ["", ""])[0],
                "f1_hi": ci.get("f1", ["", ""])[1],
            })
        if len(agg.get("run_seeds", [])) > 1:
            rows.append({
                **head, "run": "AVG",
                "precision": agg["precision"], "recall": agg["recall"], "f1": agg["f1"],
                "p_lo": "", "p_hi": "", "r_lo": "", "r_hi": "", "f1_lo": "", "f1_hi": "",
            })
    return rows


def render_report(output_dir: str | Path, fmt: str = "csv") -> str:
    rows = collect_report_rows(output_dir)
    if fmt == "json":
        return json.dumps(rows, sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        def fmt_cell(v):
            return f"{v:.4f}" if isinstance(v, float) else str(v)

        lines = ["| " + " | ".join(REPORT_COLUMNS) + " |",
                 "|" + "|".join("---" for _ in REPORT_COLUMNS) + "|"]
        for row in rows:
            lines.append("| " + " | ".join(
                fmt_cell(row[c]) if row[c] != "" else "-" for c in REPORT_COLUMNS) + " |")
        return "\n".join(lines) + "\n"
    raise ReportError(f"unknown report format: {fmt}")
