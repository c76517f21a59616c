import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional, Sequence, TypeVar

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from featdesc import __version__
from featdesc.controllers.describe_controller import DescribeController
from featdesc.controllers.eval_controller import EvalController, aggregate
from featdesc.controllers.index_controller import ActivationIndex, IndexController, is_dead
from featdesc.controllers.revival_controller import RevivalController, revival_report
from featdesc.db_utility.jsonl_store import RunManifest, config_hash
from featdesc.engine.fixtures import build_toy_fixture
from featdesc.exceptions import FeatDescError, GuardError, PreconditionError
from featdesc.models import (
    BaseMethod,
    CostModel,
    Description,
    EvalRecord,
    FeatureRef,
    MethodSpec,
    VocabProjVariant,
    VocabSource,
    VocabTarget,
)
from featdesc.state import PipelineState, load_config
from featdesc.utility.flops import estimate_flops
from featdesc.utility.stats import bootstrap_ci

logger = logging.getLogger(__name__)
console = Console()

app = typer.Typer(add_completion=False, help="Generate and evaluate natural-language descriptions of model features.")

DEFAULT_METHODS = "maxact,vocabproj,tokenchange,ensemble_raw:all,ensemble_concat:all"

T = TypeVar("T")

ConfigOpt = typer.Option(Path("config.toml"), "--config", "-c", help="Pipeline TOML config")
FeaturesOpt = typer.Option(None, "--features", "-f", help="Comma-separated feature refs/ranges, or a file with one per line")
MethodsOpt = typer.Option(DEFAULT_METHODS, "--methods", "-m", help="Comma-separated methods")
SeedOpt = typer.Option(None, "--seed", help="Override the config seed")
BackendOpt = typer.Option(None, "--backend", help="LLM backend: mock or http")
WorkersOpt = typer.Option(None, "--workers", help="Parallel workers across features")
OutputOpt = typer.Option(None, "--output-dir", help="Override the config output directory")
ForceOpt = typer.Option(False, "--force", help="Overwrite existing results")


@app.callback()
def main(log_level: str = typer.Option("INFO", "--log-level", help="Logging level")):
    logging.basicConfig(
        level=log_level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


# ── helpers ─────────────────────────────────────────────────────────────────────

def read_feature_list(value: Optional[str], default_model: str) -> list[FeatureRef]:
    if not value:
        return []
    path = Path(value)
    entries = path.read_text(encoding="utf-8").splitlines() if path.is_file() else value.split(",")
    features: dict[str, FeatureRef] = {}
    for entry in entries:
        entry = entry.strip()
        if not entry or entry.startswith("#"):
            continue
        try:
            for feature in FeatureRef.parse_many(entry, default_model):
                features[feature.key] = feature
        except ValueError as e:
            raise GuardError(str(e)) from e
    return sorted(features.values(), key=FeatureRef.sort_key)


def parse_methods(value: str) -> list[MethodSpec]:
    try:
        specs = {MethodSpec.parse(item) for item in value.split(",") if item.strip()}
    except ValueError as e:
        raise GuardError(f"Invalid --methods '{value}': {e}") from e
    if not specs:
        raise GuardError("No methods selected")
    return sorted(specs, key=MethodSpec.sort_key)


def open_state(config: Path, seed, backend, workers, output_dir) -> PipelineState:
    if output_dir is not None:
        output_dir = output_dir.resolve()
    cfg = load_config(config, seed=seed, backend=backend, workers=workers, output_dir=output_dir)
    return PipelineState(cfg)


def write_manifest(state: PipelineState, command: str) -> None:
    cfg = state.config
    state.store.write_manifest(RunManifest(
        command=command,
        config_hash=config_hash(cfg.model_dump(mode="json")),
        seed=cfg.seed,
        template_versions=state.prompts.versions(),
        package_version=__version__,
        backend=cfg.gateway.backend,
        created_at=state.clock.now(),
    ))


def load_index(state: PipelineState, required: bool) -> Optional[ActivationIndex]:
    if not state.store.index.exists():
        if required:
            raise PreconditionError(f"No activation index at {state.store.index.path}; run `featdesc index` first")
        return None
    return ActivationIndex.load(state.store.index)


def select_features(state: PipelineState, value: Optional[str], fallback: Sequence[FeatureRef]) -> list[FeatureRef]:
    features = read_feature_list(value, state.config.model.model_id)
    return features or sorted(fallback, key=FeatureRef.sort_key)


def run_per_feature(
    features: Sequence[FeatureRef],
    work: Callable[[FeatureRef], T],
    workers: int,
) -> tuple[dict[str, T], list[str]]:
    """Runs `work` for each feature on a bounded pool; failures are logged and collected."""
    results: dict[str, T] = {}
    failed: list[str] = []

    def guarded(feature: FeatureRef):
        try:
            return feature, work(feature), None
        except FeatDescError as e:
            return feature, None, e

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for feature, result, error in pool.map(guarded, features):
            if error is not None:
                logger.error(f"{feature.key}: {type(error).__name__}: {error}")
                failed.append(feature.key)
            else:
                results[feature.key] = result
    return results, failed


def finish(failed: Sequence[str]) -> None:
    if failed:
        logger.error(f"{len(failed)} feature(s) failed: {', '.join(failed[:10])}")
        raise typer.Exit(code=1)


def fail(error: FeatDescError) -> typer.Exit:
    logger.error(f"{type(error).__name__}: {error}")
    return typer.Exit(code=error.exit_code)


def description_sort_key(d: Description) -> tuple:
    return d.sort_key()


def eval_sort_key(r: EvalRecord) -> tuple:
    return (r.feature.sort_key(), MethodSpec.parse(r.description_method).sort_key(), r.metric)


# ── commands ────────────────────────────────────────────────────────────────────

@app.command()
def index(
    config: Path = ConfigOpt,
    features: Optional[str] = FeaturesOpt,
    seed: Optional[int] = SeedOpt,
    workers: Optional[int] = WorkersOpt,
    output_dir: Optional[Path] = OutputOpt,
    force: bool = ForceOpt,
):
    """Build the activation index over the corpus."""
    try:
        state = open_state(config, seed, None, workers, output_dir)
        if state.store.index.exists() and not force:
            raise GuardError(f"{state.store.index.path} exists; pass --force to rebuild")
        selected = read_feature_list(features, state.config.model.model_id)
        if not selected:
            raise GuardError("index needs --features")
        controller = IndexController(state.model, state.registry, state.config.index, state.config.seed)
        built = controller.build(selected, state.sequences, workers=state.config.workers, progress=True)
        n = built.save(state.store.index)
        write_manifest(state, "index")
    except FeatDescError as e:
        raise fail(e)
    dead = sum(is_dead(built, f, state.config.index.dead_threshold) for f in built.features())
    logger.info(f"Indexed {n} features ({dead} dead) into {state.store.index.path}")


@app.command()
def describe(
    config: Path = ConfigOpt,
    features: Optional[str] = FeaturesOpt,
    methods: str = MethodsOpt,
    seed: Optional[int] = SeedOpt,
    backend: Optional[str] = BackendOpt,
    workers: Optional[int] = WorkersOpt,
    output_dir: Optional[Path] = OutputOpt,
    force: bool = ForceOpt,
):
    """Describe features with every requested method."""
    try:
        state = open_state(config, seed, backend, workers, output_dir)
        specs = parse_methods(methods)
        activation_index = load_index(state, required=any(
            BaseMethod.MAXACT in (s.members if s.kind.is_ensemble else (s.base,)) for s in specs
        ))
        selected = select_features(state, features, activation_index.features() if activation_index else [])
        if not selected:
            raise GuardError("No features selected; pass --features or build an index")
        existing = state.store.descriptions.read()
        labels = {s.label for s in specs}
        done = {(d.feature.key, d.method.label) for d in existing}
        if not force:
            skipped = [f for f in selected if all((f.key, label) in done for label in labels)]
            for f in skipped:
                logger.info(f"{f.key}: already described, skipping (use --force to redo)")
            selected = [f for f in selected if f not in skipped]

        controller = DescribeController(
            state.model, state.tokenizer, state.registry, state.gateway,
            state.config.methods, state.config.eval,
            sequences=state.sequences, index=activation_index,
            prompts=state.prompts, clock=state.clock, seed=state.config.seed,
        )
        results, failed = run_per_feature(
            selected, lambda f: controller.describe(f, specs, existing), state.config.workers,
        )
        new = [d for f in selected for d in results.get(f.key, [])]
        replaced = {(d.feature.key, d.method.label) for d in new}
        merged = [d for d in existing if (d.feature.key, d.method.label) not in replaced] + new
        state.store.descriptions.write_all(sorted(merged, key=description_sort_key))
        write_manifest(state, "describe")
    except FeatDescError as e:
        raise fail(e)
    logger.info(
        f"Wrote {len(new)} descriptions ({state.gateway.cache_hits} cache hits, "
        f"{state.gateway.network_calls} network calls)"
    )
    finish(failed)


def print_summary(title: str, summaries) -> None:
    table = Table(title=title)
    for column in ("method", "metric", "group", "n", "pass rate", "95% CI"):
        table.add_column(column)
    for s in summaries:
        table.add_row(
            s.method, s.metric, s.group, str(s.n), f"{s.pass_rate:.3f}", f"[{s.ci_low:.3f}, {s.ci_high:.3f}]",
        )
    console.print(table)


@app.command(name="eval")
def evaluate(
    config: Path = ConfigOpt,
    features: Optional[str] = FeaturesOpt,
    methods: Optional[str] = typer.Option(None, "--methods", "-m", help="Restrict to these methods"),
    metric: str = typer.Option("both", "--metric", help="input, output or both"),
    seed: Optional[int] = SeedOpt,
    backend: Optional[str] = BackendOpt,
    workers: Optional[int] = WorkersOpt,
    output_dir: Optional[Path] = OutputOpt,
    bootstrap: bool = typer.Option(False, "--bootstrap", help="Add bootstrap CIs to the summary"),
):
    """Evaluate stored descriptions with the input and/or output metric."""
    if metric not in ("input", "output", "both"):
        raise fail(GuardError(f"--metric must be input, output or both, not '{metric}'"))
    metrics = ["input", "output"] if metric == "both" else [metric]
    try:
        state = open_state(config, seed, backend, workers, output_dir)
        descriptions = state.store.descriptions.read()
        if not descriptions:
            raise PreconditionError(f"No descriptions in {state.store.descriptions.path}; run `featdesc describe` first")
        wanted = read_feature_list(features, state.config.model.model_id)
        if wanted:
            keys = {f.key for f in wanted}
            descriptions = [d for d in descriptions if d.feature.key in keys]
        if methods:
            labels = {s.label for s in parse_methods(methods)}
            descriptions = [d for d in descriptions if d.method.label in labels]
        if not descriptions:
            logger.warning("No descriptions matched the selection; nothing to evaluate")
            print_summary("pass rates", [])
            return

        eval_config = state.config.eval.model_copy(update={"seed": state.config.seed})
        controller = EvalController(
            state.model, state.tokenizer, state.registry, state.gateway, eval_config,
            prompts=state.prompts, index=load_index(state, required=False), clock=state.clock,
        )
        by_feature: dict[str, list[Description]] = {}
        for d in descriptions:
            by_feature.setdefault(d.feature.key, []).append(d)
        selected = sorted({d.feature.key: d.feature for d in descriptions}.values(), key=FeatureRef.sort_key)

        def work(feature: FeatureRef) -> list[EvalRecord]:
            records = []
            for d in by_feature[feature.key]:
                if "input" in metrics:
                    records.append(controller.evaluate_input(feature, d.method.label, d.text))
                if "output" in metrics:
                    records.append(controller.evaluate_output(feature, d.method.label, d.text))
            return records

        results, failed = run_per_feature(selected, work, state.config.workers)
        new = [r for f in selected for r in results.get(f.key, [])]
        replaced = {(r.feature.key, r.description_method, r.metric) for r in new}
        merged = [
            r for r in state.store.evals.read() if (r.feature.key, r.description_method, r.metric) not in replaced
        ] + new
        state.store.evals.write_all(sorted(merged, key=eval_sort_key))
        summaries = aggregate(merged, bootstrap=bootstrap, seed=state.config.seed)
        with open(state.store.root / "summary.json", "w", encoding="utf-8") as f:
            json.dump([s.model_dump() for s in summaries], f, indent=2)
        write_manifest(state, "eval")
    except FeatDescError as e:
        raise fail(e)
    print_summary("pass rates", summaries)
    finish(failed)


@app.command()
def revive(
    config: Path = ConfigOpt,
    features: Optional[str] = FeaturesOpt,
    seed: Optional[int] = SeedOpt,
    backend: Optional[str] = BackendOpt,
    workers: Optional[int] = WorkersOpt,
    output_dir: Optional[Path] = OutputOpt,
):
    """Try to activate features that never fired on the index corpus."""
    try:
        state = open_state(config, seed, backend, workers, output_dir)
        activation_index = load_index(state, required=True)
        selected = select_features(state, features, activation_index.features())
        threshold = state.config.index.dead_threshold
        dead = []
        for f in selected:
            if f not in activation_index:
                logger.warning(f"{f.key}: not in the activation index, skipping")
            elif not is_dead(activation_index, f, threshold):
                logger.info(f"{f.key}: active on the corpus, skipping")
            else:
                dead.append(f)
        describer = DescribeController(
            state.model, state.tokenizer, state.registry, state.gateway,
            state.config.methods, state.config.eval,
            sequences=state.sequences, prompts=state.prompts, clock=state.clock, seed=state.config.seed,
        )
        controller = RevivalController(describer, state.config.revival, state.config.seed)
        results, failed = run_per_feature(dead, controller.revive, state.config.workers)
        ordered = [results[f.key] for f in dead if f.key in results]
        state.store.revival.write_all(ordered)
        report = revival_report(ordered)
        with open(state.store.root / "revival_summary.json", "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        write_manifest(state, "revive")
    except FeatDescError as e:
        raise fail(e)
    revived = sum(r.activated for r in ordered)
    logger.info(f"Revived {revived} of {len(ordered)} dead features")
    console.print_json(json.dumps(report, sort_keys=True))
    finish(failed)


@app.command()
def flops(
    n_params: Optional[float] = typer.Option(None, "--n-params", help="Non-embedding parameter count"),
    corpus_tokens: Optional[float] = typer.Option(None, "--corpus-tokens"),
    feature_count: float = typer.Option(1.0, "--feature-count"),
    d_model: Optional[int] = typer.Option(None, "--d-model"),
    vocab_size: Optional[int] = typer.Option(None, "--vocab-size"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Take model sizes and corpus tokens from a config"),
    methods: str = MethodsOpt,
    k_prompts: Optional[int] = typer.Option(None, "--k-prompts"),
    prompt_len: Optional[int] = typer.Option(None, "--prompt-len"),
):
    """Estimate the compute cost of each description method."""
    try:
        if config is not None:
            state = PipelineState(load_config(config))
            cost = CostModel.from_model_config(
                state.config.model.config,
                corpus_tokens=corpus_tokens if corpus_tokens is not None else sum(len(s.tokens) for s in state.sequences),
                feature_count=feature_count,
            )
            k_prompts = k_prompts or state.config.methods.k_prompts
            prompt_len = prompt_len or state.config.methods.prompt_len
        else:
            if None in (n_params, corpus_tokens, d_model, vocab_size):
                raise GuardError("Pass --config or all of --n-params, --corpus-tokens, --d-model, --vocab-size")
            cost = CostModel(
                n_nonembed_params=n_params, corpus_tokens=corpus_tokens, feature_count=feature_count,
                d_model=d_model, vocab_size=vocab_size,
            )
        estimates = [
            estimate_flops(cost, spec, k_prompts or 32, prompt_len or 32) for spec in parse_methods(methods)
        ]
    except FeatDescError as e:
        raise fail(e)
    table = Table(title="estimated FLOPs")
    table.add_column("method")
    table.add_column("FLOPs", justify="right")
    for estimate in estimates:
        table.add_row(estimate.method, f"{estimate.flops:.3e}")
    console.print(table)
    for note in sorted({e.note for e in estimates if e.note}):
        console.print(f"note: {note}")


@app.command()
def variants(
    config: Path = ConfigOpt,
    features: Optional[str] = FeaturesOpt,
    seed: Optional[int] = SeedOpt,
    backend: Optional[str] = BackendOpt,
    output_dir: Optional[Path] = OutputOpt,
):
    """Compare vocabulary-projection variants with the input metric."""
    try:
        state = open_state(config, seed, backend, None, output_dir)
        selected = read_feature_list(features, state.config.model.model_id)
        if not selected:
            raise GuardError("variants needs --features")
        rows = []
        for source in VocabSource:
            for target in VocabTarget:
                variant = VocabProjVariant(source=source, target=target)
                params = state.config.methods.model_copy(update={"vocabproj_variant": variant})
                describer = DescribeController(
                    state.model, state.tokenizer, state.registry, state.gateway, params, state.config.eval,
                    prompts=state.prompts, clock=state.clock, seed=state.config.seed,
                )
                evaluator = EvalController(
                    state.model, state.tokenizer, state.registry, state.gateway, state.config.eval,
                    prompts=state.prompts, clock=state.clock,
                )
                outcomes = []
                for feature in selected:
                    try:
                        description = describer.describe_base(feature, BaseMethod.VOCABPROJ)
                        record = evaluator.evaluate_input(feature, f"vocabproj[{variant.label}]", description.text)
                        outcomes.append(float(record.passed))
                    except FeatDescError as e:
                        logger.error(f"{feature.key} [{variant.label}]: {e}")
                low, high = bootstrap_ci(outcomes, seed=state.config.seed)
                mean = sum(outcomes) / len(outcomes) if outcomes else float("nan")
                rows.append((variant.label, len(outcomes), mean, low, high))
    except FeatDescError as e:
        raise fail(e)
    table = Table(title="vocabulary projection variants (input metric)")
    for column in ("variant", "n", "mean pass", "bootstrap 95% CI"):
        table.add_column(column)
    for label, n, mean, low, high in rows:
        ci = f"[{low:.3f}, {high:.3f}]" if low is not None else "n/a"
        table.add_row(label, str(n), f"{mean:.3f}", ci)
    console.print(table)


@app.command(name="toy-fixture")
def toy_fixture(
    out_dir: Path = typer.Argument(..., help="Directory to write the fixture into"),
    seed: int = typer.Option(0, "--seed"),
):
    """Write the pinned toy model, SAEs, corpus and config."""
    fixture = build_toy_fixture(out_dir, seed)
    console.print(f"toy fixture in {fixture.root} (probe checksum {fixture.probe_checksum})")


if __name__ == "__main__":
    app()
