"""Experiment orchestration: ingest, train, generate, screen, adapt, evaluate.

A run is driven by a flat key-path config file (``key = value`` lines with
JSON-typed values and ``include`` support). Every stage records its config
slice, input digests, and output digests in the run manifest; re-running a
finished workdir skips every stage whose digest chain is intact, so a
changed screening setting re-runs screening and everything downstream while
reusing the generation cache untouched.

Stage graph and artifact layout under the workdir:

  data/            canonicalized corpora (train/dev/target/raw)
  models/          one directory per model artifact
  synthetic/       generated candidates, screened data, screening reports
  pseudo/          pseudo-labeled data
  eval/            per-(variant, seed, domain) metric reports
  results.txt      formatted comparison table (stars mark significance)
  results.tsv      machine-readable companion
  run-manifest.json
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import shutil
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import fixtures
from .adaptation import (
    ConfigurationError,
    LossKind,
    LossSpec,
    Model,
    TrainingConfig,
    adapt_concat,
    adapt_invariance,
    adapt_prefix,
    batch_predict,
    domain_token_literal,
    load_model,
    prepend_domain_token,
    save_model,
    stratified_downsample,
    train_base,
)
from .evaluation import (
    EvalProtocol,
    MetricReport,
    PredictionRecord,
    RunSummary,
    SignificanceResult,
    VariantMeta,
    aggregate_runs,
    render_results_table,
    results_tsv,
    score,
    t_test,
)
from .generation import (
    Backend,
    BackendDescriptor,
    DecodingParams,
    GenerationCache,
    HTTPBackend,
    MockBackend,
    generate_batch,
)
from .prompts import PromptTemplateKind, load_definitions
from .pseudo_label import (
    pseudo_label_corpus,
    read_pseudo_records,
    write_pseudo_records,
)
from .records import (
    SplitSpec,
    gold_label_set,
    ingest_raw_corpus,
    ingest_source_corpus,
    ingest_target_corpus,
    majority_label,
    frequency_table_from_instances,
    write_records,
    source_record,
    target_record,
    write_raw_corpus,
)
from .reference_backend import ReferenceBackend
from .screening import (
    ScreenKind,
    read_synthetic_records,
    render_screening_report,
    report_to_json,
    screen_batch,
    write_synthetic_records,
)
from .taxonomy import (
    ConfusionMap,
    RelationLabel,
    derive_confusion_map,
    load_confusion_map,
    resolve_label,
)

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "DRSYNTH_LLM_ENDPOINT"

DEFAULTS: dict[str, object] = {
    "workdir": "runs/experiment",
    "domains": ["EP", "WK", "NV"],
    "data.source": "fixtures:tiny",
    "data.target": "fixtures:tiny",
    "data.raw": "fixtures:tiny",
    "data.split": "2-20:1-2",
    "data.fixture_seed": 11,
    "generation.backends": ["mock"],
    "generation.template": "DC",
    "generation.include_similarity": False,
    "generation.n_arg1": 12,
    "generation.seed": 0,
    "generation.connective_choice": None,
    "generation.mock_fidelity": 0.85,
    "base.epochs": 300,
    "base.learning_rate": 2.0,
    "screening.kind": "strict",
    "screening.cmap": "bundled",
    "screening.freq_scope": "inter-sentential-only",
    "adaptation.methods": ["prefix"],
    "adaptation.domain_modes": ["specific"],
    "adaptation.epochs": 3,
    "adaptation.learning_rate": 1e-4,
    "adaptation.lambda": 0.1,
    "adaptation.mixed_target_size": 10000,
    "pseudo.per_domain_n": 12000,
    "evaluation.protocol": "discard-alternatives",
    "evaluation.alpha": 0.05,
    "evaluation.vote_threshold": 0.4,
    "seeds": [1, 2, 3],
}

_VALID_METHODS = ("concat", "prefix", "invariance", "pseudo")
_VALID_MODES = ("specific", "mixed")


class PipelineError(RuntimeError):
    pass


def parse_config_file(path: str | Path) -> dict[str, object]:
    """Flat ``key = value`` config with JSON-typed values and includes."""
    path = Path(path)
    values: dict[str, object] = {}
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("include "):
            include = (path.parent / line.split(None, 1)[1]).resolve()
            values.update(parse_config_file(include))
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip()
        raw = raw.strip()
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    return values


@dataclass(frozen=True)
class PipelineConfig:
    """Validated, fully-defaulted run configuration."""

    values: Mapping[str, object]

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "PipelineConfig":
        unknown = sorted(set(mapping) - set(DEFAULTS))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        merged = {**DEFAULTS, **mapping}
        config = cls(values=merged)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_mapping(parse_config_file(path))

    def get(self, key: str):
        return self.values[key]

    def validate(self) -> None:
        seeds = self.get("seeds")
        if not isinstance(seeds, list) or not seeds:
            raise ConfigurationError("seeds must be a non-empty list")
        for method in self.get("adaptation.methods"):
            if method not in _VALID_METHODS:
                raise ConfigurationError(f"unknown adaptation method {method!r}")
        for mode in self.get("adaptation.domain_modes"):
            if mode not in _VALID_MODES:
                raise ConfigurationError(f"unknown domain mode {mode!r}")
        if self.get("generation.template") not in ("DC", "DR"):
            raise ConfigurationError("generation.template must be DC or DR")
        if self.get("screening.kind") not in ("strict", "confusion", "combi"):
            raise ConfigurationError("screening.kind must be strict, confusion, or combi")
        EvalProtocol(self.get("evaluation.protocol"))
        SplitSpec.parse(str(self.get("data.split")))

    def snapshot(self) -> dict[str, object]:
        return dict(sorted(self.values.items()))


def _digest_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def _write_text(path: Path, content: str) -> None:
    """Atomic text write (temp-then-rename), used for every pipeline artifact."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(content, "utf-8")
    os.replace(tmp, path)


def digest_path(path: Path) -> str:
    """Content digest of a file, or of a directory's sorted file table."""
    if path.is_file():
        return _digest_bytes(path.read_bytes())
    if path.is_dir():
        table = []
        for file in sorted(path.rglob("*")):
            if file.is_file():
                table.append(f"{file.relative_to(path)}:{_digest_bytes(file.read_bytes())}")
        return _digest_bytes("\n".join(table).encode())
    raise PipelineError(f"artifact missing: {path}")


class RunManifest:
    """Per-stage digests and outputs; wall-clock excluded from identity.

    Stage records survive config changes: every stage digest embeds its own
    config slice, so only the stages whose slice (or inputs) actually moved
    re-run. Stages that fall out of the plan are pruned at the end of a run.
    """

    def __init__(self, path: Path, config_snapshot: dict):
        self.path = path
        self.data: dict = {"config": config_snapshot, "stages": {}}
        if path.exists():
            stored = json.loads(path.read_text("utf-8"))
            if stored.get("config") != config_snapshot:
                logger.info("config changed; stale stages will re-run or be pruned")
            self.data["stages"] = stored.get("stages", {})

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, sort_keys=True, indent=2) + "\n", "utf-8")
        os.replace(tmp, self.path)

    def stage(self, name: str) -> dict | None:
        return self.data["stages"].get(name)

    def record_stage(
        self, name: str, digest: str, outputs: dict[str, str], wall_clock: float
    ) -> None:
        self.data["stages"][name] = {
            "digest": digest,
            "outputs": outputs,
            "wall_clock": round(wall_clock, 6),
        }
        self.save()

    def prune_except(self, touched: Sequence[str]) -> None:
        keep = set(touched)
        stale = [name for name in self.data["stages"] if name not in keep]
        for name in stale:
            del self.data["stages"][name]
        if stale:
            logger.info("pruned %d stage records no longer in the plan", len(stale))
            self.save()

    def identity_digest(self) -> str:
        """Digest over everything except timing and the workdir location."""
        stripped = {
            "config": {k: v for k, v in self.data["config"].items() if k != "workdir"},
            "stages": {
                name: {"digest": s["digest"], "outputs": s["outputs"]}
                for name, s in self.data["stages"].items()
            },
        }
        return _digest_bytes(json.dumps(stripped, sort_keys=True).encode())


class ExperimentRunner:
    """Execute (or resume) the full experiment graph in a workdir."""

    def __init__(self, config: PipelineConfig, workdir: str | Path | None = None):
        self.config = config
        self.workdir = Path(workdir if workdir is not None else str(config.get("workdir")))
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(self.workdir / "run-manifest.json", config.snapshot())
        self.domains: list[str] = list(config.get("domains"))
        self.seeds: list[int] = [int(s) for s in config.get("seeds")]
        self._dry_run_plan: list[str] | None = None
        self._touched: list[str] = []

    # --- stage engine -----------------------------------------------------

    def _stage(
        self,
        name: str,
        config_keys: Sequence[str],
        inputs: Mapping[str, Path],
        outputs: Mapping[str, Path],
        action: Callable[[], None],
    ) -> None:
        if self._dry_run_plan is not None:
            self._dry_run_plan.append(name)
            return
        self._touched.append(name)
        config_slice = {key: self.config.get(key) for key in config_keys}
        payload = json.dumps(
            {
                "name": name,
                "config": config_slice,
                "inputs": {key: digest_path(path) for key, path in sorted(inputs.items())},
            },
            sort_keys=True,
        )
        digest = _digest_bytes(payload.encode())
        existing = self.manifest.stage(name)
        if existing and existing["digest"] == digest:
            intact = True
            for key, path in outputs.items():
                recorded = existing["outputs"].get(key)
                full = self.workdir / path if not Path(path).is_absolute() else Path(path)
                if recorded is None or not full.exists() or digest_path(full) != recorded:
                    intact = False
                    logger.warning("stage %s output %s stale or corrupted; re-running", name, key)
                    break
            if intact:
                logger.info("stage %s: up to date, skipping", name)
                return
        logger.info("stage %s: running", name)
        started = time.perf_counter()
        action()
        recorded_outputs = {}
        for key, path in outputs.items():
            full = self.workdir / path if not Path(path).is_absolute() else Path(path)
            recorded_outputs[key] = digest_path(full)
        self.manifest.record_stage(name, digest, recorded_outputs, time.perf_counter() - started)

    def _path(self, relative: str) -> Path:
        return self.workdir / relative

    # --- data -------------------------------------------------------------

    def _materialize_fixtures(self) -> None:
        seed = int(self.config.get("data.fixture_seed"))
        spec = str(self.config.get("data.source"))
        data_dir = self._path("data")

        def build() -> None:
            data_dir.mkdir(parents=True, exist_ok=True)
            if spec == "fixtures:full":
                fixtures.build_source_corpus(data_dir / "source.jsonl", seed=seed)
                fixtures.build_target_corpus(data_dir / "target.jsonl", seed=seed + 1)
                fixtures.build_raw_corpus(
                    data_dir / "raw.jsonl",
                    domains=self.domains,
                    docs_per_domain=8,
                    sentences_per_doc=60,
                    seed=seed + 2,
                )
            else:
                fixtures.build_source_corpus(
                    data_dir / "source.jsonl", counts=fixtures.tiny_source_counts(), seed=seed
                )
                fixtures.build_target_corpus(
                    data_dir / "target.jsonl",
                    counts=fixtures.tiny_target_counts(per_domain=4),
                    domains=self.domains,
                    seed=seed + 1,
                    no_relation_extra=3,
                )
                fixtures.build_raw_corpus(
                    data_dir / "raw.jsonl",
                    domains=self.domains,
                    docs_per_domain=3,
                    sentences_per_doc=16,
                    seed=seed + 2,
                )

        self._stage(
            "fixtures",
            ("data.source", "data.fixture_seed", "domains"),
            inputs={},
            outputs={
                "source": Path("data/source.jsonl"),
                "target": Path("data/target.jsonl"),
                "raw": Path("data/raw.jsonl"),
            },
            action=build,
        )

    def _source_paths(self) -> dict[str, Path]:
        paths = {}
        for kind in ("source", "target", "raw"):
            configured = str(self.config.get(f"data.{kind}"))
            if configured.startswith("fixtures:"):
                paths[kind] = self._path(f"data/{kind}.jsonl")
            else:
                paths[kind] = Path(configured)
        return paths

    def _ingest(self) -> None:
        raw_paths = self._source_paths()
        split = SplitSpec.parse(str(self.config.get("data.split")))

        def action() -> None:
            ingest = ingest_source_corpus(raw_paths["source"], split)
            # canonicalized copies; sections riding along for round-trips
            write_records(
                (source_record(inst, section=0) for inst in ingest.train),
                self._path("data/train.jsonl"),
            )
            write_records(
                (source_record(inst, section=1) for inst in ingest.dev),
                self._path("data/dev.jsonl"),
            )
            target = ingest_target_corpus(raw_paths["target"])
            write_records((target_record(i) for i in target), self._path("data/eval.jsonl"))
            docs = ingest_raw_corpus(raw_paths["raw"])
            write_raw_corpus(docs, self._path("data/raw-canonical.jsonl"))

        self._stage(
            "ingest",
            ("data.split", "domains"),
            inputs=raw_paths,
            outputs={
                "train": Path("data/train.jsonl"),
                "dev": Path("data/dev.jsonl"),
                "eval": Path("data/eval.jsonl"),
                "raw": Path("data/raw-canonical.jsonl"),
            },
            action=action,
        )

    # --- models -------------------------------------------------------------

    def _backend(self) -> ReferenceBackend:
        return ReferenceBackend()

    def _base_config(self, seed: int) -> TrainingConfig:
        return TrainingConfig(
            epochs=int(self.config.get("base.epochs")),
            learning_rate=float(self.config.get("base.learning_rate")),
            seed=seed,
        )

    def _train_base(self, seed: int) -> None:
        model_dir = Path(f"models/base-seed{seed}")

        def action() -> None:
            train = ingest_source_corpus(self._path("data/train.jsonl"), _ALL_TRAIN).train
            dev_set = ingest_source_corpus(self._path("data/dev.jsonl"), _ALL_DEV).dev
            model, confusion = train_base(
                train, dev_set, self._base_config(seed), self._backend()
            )
            save_model(model, self.workdir / model_dir)
            confusion_payload = {
                true.level2: {pred.level2: n for pred, n in sorted(row.items(), key=lambda kv: kv[0].level2)}
                for true, row in sorted(confusion.items(), key=lambda kv: kv[0].level2)
            }
            _write_text(
                self.workdir / model_dir / "dev-confusion.json",
                json.dumps(confusion_payload, sort_keys=True, indent=2) + "\n",
            )

        self._stage(
            f"train-base:seed{seed}",
            ("base.epochs", "base.learning_rate"),
            inputs={"train": self._path("data/train.jsonl"), "dev": self._path("data/dev.jsonl")},
            outputs={"model": model_dir},
            action=action,
        )

    def _load_base(self, seed: int) -> Model:
        return load_model(self._path(f"models/base-seed{seed}"), self._backend())

    # --- generation and screening -------------------------------------------

    def _generation_backends(self) -> list[Backend]:
        backends: list[Backend] = []
        decoding = DecodingParams(seed=int(self.config.get("generation.seed")))
        for name in self.config.get("generation.backends"):
            if str(name).startswith("mock"):
                backends.append(
                    MockBackend(
                        name=str(name),
                        decoding=decoding,
                        fidelity=float(self.config.get("generation.mock_fidelity")),
                    )
                )
            else:
                endpoint = os.environ.get(ENDPOINT_ENV, "")
                if not endpoint:
                    raise ConfigurationError(
                        f"backend {name!r} needs {ENDPOINT_ENV} set to an endpoint URL"
                    )
                backends.append(
                    HTTPBackend(
                        BackendDescriptor(name=str(name), endpoint=endpoint, decoding=decoding)
                    )
                )
        return backends

    def _generate(self) -> None:
        def action() -> None:
            docs = ingest_raw_corpus(self._path("data/raw-canonical.jsonl"))
            seed = int(self.config.get("generation.seed"))
            n_arg1 = int(self.config.get("generation.n_arg1"))
            sentences_by_domain: dict[str, list[str]] = {}
            for domain in self.domains:
                pool = [s for d in docs if d.domain == domain for s in d.sentences]
                if not pool:
                    raise PipelineError(f"no raw sentences for domain {domain}")
                rng = random.Random(seed + hash_domain(domain))
                take = min(n_arg1, len(pool))
                sentences_by_domain[domain] = rng.sample(pool, take)
            labels = _generation_labels(self.config)
            template = PromptTemplateKind(self.config.get("generation.template"))
            choice = self.config.get("generation.connective_choice")
            cache = GenerationCache(self._path("synthetic/cache.jsonl"))
            result = generate_batch(
                sentences_by_domain,
                labels,
                self._generation_backends(),
                template,
                fixtures.example_pool(self.domains),
                seed=seed,
                cache=cache,
                definitions=load_definitions(),
                connective_choice=None if choice in (None, "") else int(choice),
            )
            write_synthetic_records(result.instances, self._path("synthetic/candidates.jsonl"))
            _write_text(
                self._path("synthetic/failures.json"),
                json.dumps([f._asdict() for f in result.failures], indent=2) + "\n",
            )

        self._stage(
            "generate",
            (
                "generation.backends",
                "generation.template",
                "generation.include_similarity",
                "generation.n_arg1",
                "generation.seed",
                "generation.connective_choice",
                "generation.mock_fidelity",
            ),
            inputs={"raw": self._path("data/raw-canonical.jsonl")},
            outputs={"candidates": Path("synthetic/candidates.jsonl")},
            action=action,
        )

    def _confusion_map(self, base_seed: int) -> ConfusionMap:
        choice = str(self.config.get("screening.cmap"))
        if choice == "bundled":
            return load_confusion_map()
        if choice == "derived":
            payload = json.loads(
                (self._path(f"models/base-seed{base_seed}/dev-confusion.json")).read_text("utf-8")
            )
            matrix = {
                resolve_label(true): {resolve_label(p): n for p, n in row.items()}
                for true, row in payload.items()
            }
            return derive_confusion_map(matrix)
        return load_confusion_map(choice)

    def _screen(self) -> None:
        base_seed = self.seeds[0]

        def action() -> None:
            candidates = read_synthetic_records(self._path("synthetic/candidates.jsonl"))
            base = self._load_base(base_seed)
            predictions, _ = batch_predict(base, [c.pair for c in candidates])
            for candidate, label in zip(candidates, predictions):
                candidate.set_predicted(label)
            kind = ScreenKind(self.config.get("screening.kind"))
            cmap = freq = None
            if kind in (ScreenKind.CONFUSION, ScreenKind.COMBI):
                cmap = self._confusion_map(base_seed)
            if kind is ScreenKind.COMBI:
                train = ingest_source_corpus(self._path("data/train.jsonl"), _ALL_TRAIN).train
                freq = frequency_table_from_instances(
                    train, scope=str(self.config.get("screening.freq_scope"))
                )
            kept, report = screen_batch(candidates, kind, cmap, freq)
            write_synthetic_records(kept, self._path("synthetic/screened.jsonl"))
            _write_text(self._path("synthetic/screening-report.json"), report_to_json(report) + "\n")
            _write_text(
                self._path("synthetic/screening-report.txt"),
                render_screening_report([report], self.domains),
            )
            meta = {"base_artifact_id": base.artifact_id, "screen": kind.value}
            _write_text(
                self._path("synthetic/screening-meta.json"),
                json.dumps(meta, sort_keys=True, indent=2) + "\n",
            )

        self._stage(
            "screen",
            ("screening.kind", "screening.cmap", "screening.freq_scope"),
            inputs={
                "candidates": self._path("synthetic/candidates.jsonl"),
                "base": self._path(f"models/base-seed{base_seed}"),
            },
            outputs={
                "screened": Path("synthetic/screened.jsonl"),
                "report": Path("synthetic/screening-report.json"),
            },
            action=action,
        )

    def _pseudo_label(self) -> None:
        base_seed = self.seeds[0]

        def action() -> None:
            docs = ingest_raw_corpus(self._path("data/raw-canonical.jsonl"))
            base = self._load_base(base_seed)
            instances = pseudo_label_corpus(
                docs,
                base,
                per_domain_n=int(self.config.get("pseudo.per_domain_n")),
                seed=int(self.config.get("generation.seed")),
                domains=self.domains,
            )
            write_pseudo_records(instances, self._path("pseudo/labeled.jsonl"))

        self._stage(
            "pseudo-label",
            ("pseudo.per_domain_n", "generation.seed"),
            inputs={
                "raw": self._path("data/raw-canonical.jsonl"),
                "base": self._path(f"models/base-seed{base_seed}"),
            },
            outputs={"labeled": Path("pseudo/labeled.jsonl")},
            action=action,
        )

    # --- adaptation and evaluation -------------------------------------------

    def _adapt_config(self, seed: int, method: str) -> TrainingConfig:
        loss = LossSpec(
            kind=LossKind.CE_MINUS_IV if method == "invariance" else LossKind.CE,
            lam=float(self.config.get("adaptation.lambda")),
        )
        groups = ("prefix",) if method == "prefix" else ("encoder", "head")
        if method in ("concat", "pseudo"):
            # from-scratch trainings on the combined pool use base-scale settings;
            # the adaptation epochs/rate apply to continued training only
            epochs = int(self.config.get("base.epochs"))
            rate = float(self.config.get("base.learning_rate"))
        else:
            epochs = int(self.config.get("adaptation.epochs"))
            rate = float(self.config.get("adaptation.learning_rate"))
        return TrainingConfig(
            epochs=epochs,
            learning_rate=rate,
            seed=seed,
            loss=loss,
            trainable_groups=groups,
        )

    def _variant_id(self, method: str, mode: str) -> str:
        data = "pseudo" if method == "pseudo" else "syn"
        return f"{method}-{mode}-{data}"

    def _adaptation_data(self, method: str) -> dict[str, list]:
        """Per-domain target-side training pools for one method."""
        if method == "pseudo":
            pool = read_pseudo_records(self._path("pseudo/labeled.jsonl"))
        else:
            pool = read_synthetic_records(self._path("synthetic/screened.jsonl"))
        by_domain: dict[str, list] = {domain: [] for domain in self.domains}
        for inst in pool:
            if inst.domain in by_domain:
                by_domain[inst.domain].append(inst)
        return by_domain

    def _adapt_and_evaluate(self, method: str, mode: str, seed: int) -> None:
        variant = self._variant_id(method, mode)
        name = f"adapt:{variant}:seed{seed}"
        data_input = (
            self._path("pseudo/labeled.jsonl")
            if method == "pseudo"
            else self._path("synthetic/screened.jsonl")
        )
        model_out = Path(f"models/{variant}-seed{seed}")
        eval_out = Path(f"eval/{variant}-seed{seed}.json")
        predictions_out = Path(f"eval/{variant}-seed{seed}-predictions.jsonl")

        def action() -> None:
            shutil.rmtree(self.workdir / model_out, ignore_errors=True)
            by_domain = self._adaptation_data(method)
            config = self._adapt_config(seed, method)
            base = self._load_base(seed)
            train = ingest_source_corpus(self._path("data/train.jsonl"), _ALL_TRAIN).train
            eval_instances = ingest_target_corpus(self._path("data/eval.jsonl"))
            sizes: dict[str, int] = {}
            reports: dict[str, dict] = {}
            prediction_rows: list[dict] = []

            def evaluate(model: Model, domain: str, tagged: bool) -> None:
                items = [inst for inst in eval_instances if inst.domain == domain]
                if not items:
                    raise PipelineError(f"no evaluation items for domain {domain}")
                tokens = [domain_token_literal(domain) if tagged else None] * len(items)
                predicted, _ = batch_predict(model, [i.pair for i in items], tokens)
                prediction_rows.extend(
                    {**target_record(inst), "predicted": label.level2}
                    for inst, label in zip(items, predicted)
                )
                records = _prediction_records(items, predicted, self.config)
                report = score(
                    records,
                    EvalProtocol(self.config.get("evaluation.protocol")),
                    run_id=f"seed{seed}",
                )
                reports[domain] = _report_payload(report)

            if mode == "specific":
                for domain in self.domains:
                    domain_data = by_domain[domain]
                    if not domain_data:
                        raise PipelineError(f"no {method} data for domain {domain}")
                    model = self._adapt_one(method, base, domain_data, train, config)
                    save_model(model, self.workdir / model_out / domain)
                    sizes[domain] = len(domain_data)
                    evaluate(model, domain, tagged=False)
            else:
                tagged_pool = [
                    prepend_domain_token(inst)
                    for domain in self.domains
                    for inst in by_domain[domain]
                ]
                target_size = min(
                    int(self.config.get("adaptation.mixed_target_size")), len(tagged_pool)
                )
                mixed = stratified_downsample(tagged_pool, target_size, seed=seed)
                model = self._adapt_one(method, base, mixed, train, config)
                save_model(model, self.workdir / model_out / "mixed")
                for domain in self.domains:
                    sizes[domain] = len(mixed)
                    evaluate(model, domain, tagged=True)

            payload = {"variant": variant, "seed": seed, "sizes": sizes, "reports": reports}
            _write_text(
                self.workdir / eval_out,
                json.dumps(payload, sort_keys=True, indent=2) + "\n",
            )
            write_records(prediction_rows, self.workdir / predictions_out)

        self._stage(
            name,
            (
                "adaptation.epochs",
                "adaptation.learning_rate",
                "adaptation.lambda",
                "adaptation.mixed_target_size",
                "base.epochs",
                "base.learning_rate",
                "evaluation.protocol",
                "evaluation.vote_threshold",
            ),
            inputs={
                "data": data_input,
                "base": self._path(f"models/base-seed{seed}"),
                "train": self._path("data/train.jsonl"),
                "eval": self._path("data/eval.jsonl"),
            },
            outputs={"model": model_out, "eval": eval_out, "predictions": predictions_out},
            action=action,
        )

    def _adapt_one(
        self,
        method: str,
        base: Model,
        target_data: list,
        train: list,
        config: TrainingConfig,
    ) -> Model:
        if method == "concat":
            return adapt_concat(train, target_data, config, base.backend)
        if method == "prefix":
            return adapt_prefix(base, target_data, config)
        if method == "invariance":
            return adapt_invariance(base, target_data, train, config)
        if method == "pseudo":
            return adapt_concat(train, target_data, config, base.backend)
        raise ConfigurationError(f"unknown adaptation method {method!r}")

    def _evaluate_baseline(self, seed: int) -> None:
        eval_out = Path(f"eval/baseline-seed{seed}.json")
        predictions_out = Path(f"eval/baseline-seed{seed}-predictions.jsonl")

        def action() -> None:
            base = self._load_base(seed)
            eval_instances = ingest_target_corpus(self._path("data/eval.jsonl"))
            reports = {}
            prediction_rows: list[dict] = []
            for domain in self.domains:
                items = [inst for inst in eval_instances if inst.domain == domain]
                if not items:
                    raise PipelineError(f"no evaluation items for domain {domain}")
                predicted, _ = batch_predict(base, [i.pair for i in items])
                prediction_rows.extend(
                    {**target_record(inst), "predicted": label.level2}
                    for inst, label in zip(items, predicted)
                )
                records = _prediction_records(items, predicted, self.config)
                report = score(
                    records,
                    EvalProtocol(self.config.get("evaluation.protocol")),
                    run_id=f"seed{seed}",
                )
                reports[domain] = _report_payload(report)
            payload = {
                "variant": "baseline",
                "seed": seed,
                "sizes": {domain: 0 for domain in self.domains},
                "reports": reports,
            }
            _write_text(
                self.workdir / eval_out,
                json.dumps(payload, sort_keys=True, indent=2) + "\n",
            )
            write_records(prediction_rows, self.workdir / predictions_out)

        self._stage(
            f"evaluate:baseline:seed{seed}",
            ("evaluation.protocol", "evaluation.vote_threshold"),
            inputs={
                "base": self._path(f"models/base-seed{seed}"),
                "eval": self._path("data/eval.jsonl"),
            },
            outputs={"eval": eval_out, "predictions": predictions_out},
            action=action,
        )

    # --- reporting -------------------------------------------------------------

    def _variants(self) -> list[tuple[str, str]]:
        return [
            (method, mode)
            for method in self.config.get("adaptation.methods")
            for mode in self.config.get("adaptation.domain_modes")
        ]

    def _report(self) -> None:
        variant_ids = ["baseline"] + [
            self._variant_id(method, mode) for method, mode in self._variants()
        ]
        eval_inputs = {
            f"{variant}-seed{seed}": self._path(f"eval/{variant}-seed{seed}.json")
            for variant in variant_ids
            for seed in self.seeds
        }

        def action() -> None:
            alpha = float(self.config.get("evaluation.alpha"))
            template = str(self.config.get("generation.template"))
            screen = ScreenKind(self.config.get("screening.kind")).short_name
            llm = ",".join(str(b) for b in self.config.get("generation.backends"))

            variants = [
                VariantMeta(variant_id="baseline", model="baseline", baseline=True)
            ]
            for method, mode in self._variants():
                variant_id = self._variant_id(method, mode)
                if method == "pseudo":
                    meta = VariantMeta(variant_id, model="base+pseudo", config=mode)
                else:
                    model_name = {
                        "concat": "base+syn",
                        "prefix": "base>syn",
                        "invariance": "base>IV>syn",
                    }[method]
                    meta = VariantMeta(
                        variant_id, model=model_name, llm=llm, template=template,
                        screen=screen, config=mode,
                    )
                variants.append(meta)

            summaries: dict[tuple[str, str], RunSummary] = {}
            significance: dict[tuple[str, str, str], SignificanceResult] = {}
            sizes: dict[tuple[str, str], int] = {}
            for meta in variants:
                runs: dict[str, list[MetricReport]] = {d: [] for d in self.domains}
                for seed in self.seeds:
                    payload = json.loads(
                        (self._path(f"eval/{meta.variant_id}-seed{seed}.json")).read_text("utf-8")
                    )
                    for domain in self.domains:
                        runs[domain].append(_report_from_payload(payload["reports"][domain]))
                        sizes[(meta.variant_id, domain)] = payload["sizes"][domain]
                for domain in self.domains:
                    summaries[(meta.variant_id, domain)] = aggregate_runs(runs[domain])

            if len(self.seeds) >= 2:
                for meta in variants:
                    if meta.baseline:
                        continue
                    for domain in self.domains:
                        for metric in ("macro_f1", "accuracy"):
                            significance[(meta.variant_id, domain, metric)] = t_test(
                                summaries[(meta.variant_id, domain)].runs(metric),
                                summaries[("baseline", domain)].runs(metric),
                                alpha=alpha,
                                metric=metric,
                            )

            table = render_results_table(variants, summaries, significance, sizes, self.domains)
            _write_text(self._path("results.txt"), table)
            _write_text(
                self._path("results.tsv"),
                results_tsv(variants, summaries, significance, sizes, self.domains),
            )

        self._stage(
            "report",
            ("evaluation.alpha",),
            inputs=eval_inputs,
            outputs={"table": Path("results.txt"), "tsv": Path("results.tsv")},
            action=action,
        )

    # --- top level ---------------------------------------------------------------

    def run(self, dry_run: bool = False) -> RunManifest:
        if dry_run:
            self._dry_run_plan = []
        else:
            self.manifest.save()
        needs_fixtures = any(
            str(self.config.get(f"data.{kind}")).startswith("fixtures:")
            for kind in ("source", "target", "raw")
        )
        if needs_fixtures:
            self._materialize_fixtures()
        self._ingest()
        for seed in self.seeds:
            self._train_base(seed)
        methods = list(self.config.get("adaptation.methods"))
        if any(m != "pseudo" for m in methods):
            self._generate()
            self._screen()
        if "pseudo" in methods:
            self._pseudo_label()
        for seed in self.seeds:
            self._evaluate_baseline(seed)
        for method, mode in self._variants():
            for seed in self.seeds:
                self._adapt_and_evaluate(method, mode, seed)
        self._report()
        if dry_run:
            plan, self._dry_run_plan = self._dry_run_plan, None
            logger.info("dry run plan: %s", plan)
            self.manifest.data["plan"] = plan
        else:
            self.manifest.prune_except(self._touched)
        return self.manifest


# split specs that route every section to one bucket, for canonical re-reads
_ALL_TRAIN = SplitSpec(frozenset(range(0, 100)), frozenset())
_ALL_DEV = SplitSpec(frozenset(), frozenset(range(0, 100)))


def hash_domain(domain: str) -> int:
    return int.from_bytes(hashlib.sha256(domain.encode()).digest()[:4], "big")


def _generation_labels(config: PipelineConfig) -> list[RelationLabel]:
    from .taxonomy import generation_label_set

    return generation_label_set(bool(config.get("generation.include_similarity")))


def _prediction_records(items, predicted, config: PipelineConfig) -> list[PredictionRecord]:
    threshold = float(config.get("evaluation.vote_threshold"))
    records = []
    for index, (inst, label) in enumerate(zip(items, predicted)):
        records.append(
            PredictionRecord(
                item_id=f"{inst.pair.doc_id}#{index}",
                predicted=label,
                gold=frozenset(gold_label_set(inst, threshold)),
                majority=majority_label(inst),
                domain=inst.domain,
            )
        )
    return records


def _report_payload(report: MetricReport) -> dict:
    return {
        "accuracy": [report.accuracy.numerator, report.accuracy.denominator],
        "macro_f1": [report.macro_f1.numerator, report.macro_f1.denominator],
        "n_items": report.n_items,
        "protocol": report.protocol.value,
        "run_id": report.run_id,
        "per_class": {
            label.level2: [cs.tp, cs.fp, cs.fn] for label, cs in report.per_class.items()
        },
    }


def _report_from_payload(payload: dict) -> MetricReport:
    from .evaluation import ClassScores

    per_class = {
        resolve_label(name): ClassScores(*counts)
        for name, counts in payload["per_class"].items()
    }
    return MetricReport(
        accuracy=Fraction(*payload["accuracy"]),
        per_class=per_class,
        macro_f1=Fraction(*payload["macro_f1"]),
        n_items=int(payload["n_items"]),
        protocol=EvalProtocol(payload["protocol"]),
        run_id=payload.get("run_id", ""),
    )


def run_experiment(
    config: PipelineConfig, workdir: str | Path | None = None, dry_run: bool = False
) -> RunManifest:
    """Execute one full experiment; returns the manifest."""
    return ExperimentRunner(config, workdir).run(dry_run=dry_run)


def resume(manifest_path: str | Path) -> RunManifest:
    """Re-run a workdir; stages with intact digests are skipped."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "run-manifest.json"
    stored = json.loads(manifest_path.read_text("utf-8"))
    config = PipelineConfig.from_mapping(stored["config"])
    return ExperimentRunner(config, manifest_path.parent).run()
