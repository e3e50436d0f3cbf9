"""Command-line pipeline: ingest, embed, cluster, generate, analyze,
simulate, pipeline, plus a batch text-metric scorer.

Every command resolves config as defaults <- config file <- flags, writes
the resolved copy into the artifact directory, and holds an advisory lock
on that directory while it runs. Exit codes: 0 success, 1 user error,
2 upstream-API failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analyze as analyze_mod
from . import artifacts as art
from . import extractsim as sim
from ._http import ApiError
from ._seeds import rng_from
from .cluster import ClusteringConfig, EmptyClusteringError, filter_small_clusters, minibatch_kmeans
from .config import ConfigError, RunConfig, load_config_file, resolve_config, write_resolved_config
from .corpus import (
    DatasetFormatError,
    Query,
    QueryPool,
    build_query_pool,
    join_instruction_input,
    load_instruction_dataset,
)
from .embed import (
    BACKEND_LOCAL,
    EmbeddingBackendConfig,
    EmbeddingMatrix,
    embed_texts,
    load_matrix,
    save_matrix,
)
from .genquery import GenerationFailedError, TeacherEndpointConfig, generate_query_set
from .textmetrics import score_pairs_jsonl

logger = logging.getLogger("cliq")

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_API_ERROR = 2


class PartialGenerationError(RuntimeError):
    """Some clusters failed during generation; artifacts were still written."""


def _backend_config(cfg: RunConfig) -> EmbeddingBackendConfig:
    return EmbeddingBackendConfig(
        kind=cfg.embed_backend,
        dim=cfg.embed_dim,
        endpoint=cfg.embed_endpoint,
        model_name=cfg.embed_model,
        batch_size=cfg.embed_batch_size,
        max_text_length=cfg.embed_max_text_length,
        max_concurrency=cfg.embed_concurrency,
    )


def _teacher_config(cfg: RunConfig) -> TeacherEndpointConfig:
    if not cfg.gen_base_url:
        raise ConfigError("gen_base_url must be set to run generation")
    return TeacherEndpointConfig(
        base_url=cfg.gen_base_url,
        model_name=cfg.gen_model,
        temperature=cfg.gen_temperature,
        max_tokens=cfg.gen_max_tokens,
        timeout=cfg.gen_timeout,
        max_attempts=cfg.gen_retries,
        backoff_base=cfg.gen_backoff_base,
        retry_jitter=cfg.gen_jitter,
        max_concurrency=cfg.gen_concurrency,
    )


def cmd_ingest(cfg: RunConfig, artifact_dir: Path) -> None:
    if not cfg.dataset_path:
        raise ConfigError("dataset_path must be set for ingest")
    dataset = Path(cfg.dataset_path)
    if not dataset.exists():
        raise art.ArtifactMissingError(f"dataset file not found: {dataset}")
    records = load_instruction_dataset(dataset.read_bytes())
    pool = build_query_pool(records)
    art.write_jsonl(artifact_dir / art.POOL, art.pool_to_rows(pool))
    logger.info("ingested %d records -> %s", len(pool), artifact_dir / art.POOL)


def cmd_embed(cfg: RunConfig, artifact_dir: Path) -> None:
    pool = art.rows_to_pool(art.read_jsonl(art.require_artifact(artifact_dir, art.POOL)))
    matrix = embed_texts(pool.texts(), _backend_config(cfg), cfg.seed)
    seed = cfg.seed if cfg.embed_backend == BACKEND_LOCAL else None
    save_matrix(
        matrix,
        artifact_dir / art.EMBEDDINGS_BIN,
        artifact_dir / art.EMBEDDINGS_META,
        seed=seed,
        backend=cfg.embed_backend,
    )
    logger.info("embedded %d queries into %d dims", matrix.rows, matrix.dim)


def cmd_cluster(cfg: RunConfig, artifact_dir: Path) -> None:
    pool = art.rows_to_pool(art.read_jsonl(art.require_artifact(artifact_dir, art.POOL)))
    matrix, _ = load_matrix(
        art.require_artifact(artifact_dir, art.EMBEDDINGS_BIN),
        art.require_artifact(artifact_dir, art.EMBEDDINGS_META),
    )
    config = ClusteringConfig(
        k=cfg.cluster_k,
        seed=cfg.seed,
        minibatch_size=cfg.cluster_minibatch_size or None,
        max_iterations=cfg.cluster_max_iterations,
        min_cluster_size=cfg.cluster_min_size,
    )
    model = minibatch_kmeans(matrix, config)
    retained = filter_small_clusters(model, pool, cfg.cluster_min_size)
    art.write_clustering(artifact_dir, model, retained)
    logger.info(
        "clustered %d queries into %d clusters; %d retained (min size %d), %d queries kept",
        len(pool), model.k, retained.num_clusters, cfg.cluster_min_size,
        len(retained.pool),
    )


def _report_to_dict(report) -> dict:
    return {
        "model_name": report.model_name,
        "base_url": report.base_url,
        "template_version": report.template_version,
        "examples_per_cluster": report.examples_per_cluster,
        "queries_per_cluster": report.queries_per_cluster,
        "seed": report.seed,
        "temperature": report.temperature,
        "max_tokens": report.max_tokens,
        "total_kept": report.total_kept,
        "failed_clusters": report.failed_clusters,
        "reproducibility": "depends on teacher endpoint determinism",
        "clusters": [
            {
                "cluster_id": c.cluster_id,
                "requested": c.requested,
                "received": c.received,
                "kept": c.kept,
                "shortfall": c.shortfall,
                "error": c.error,
            }
            for c in report.clusters
        ],
    }


def cmd_generate(cfg: RunConfig, artifact_dir: Path) -> None:
    pool = art.rows_to_pool(art.read_jsonl(art.require_artifact(artifact_dir, art.POOL)))
    retained = art.load_retained(artifact_dir, pool)
    try:
        result = generate_query_set(
            retained,
            _teacher_config(cfg),
            max_examples=cfg.gen_examples_per_cluster,
            count=cfg.gen_queries_per_cluster,
            seed=cfg.seed,
        )
    except GenerationFailedError as exc:
        art.write_json(artifact_dir / art.GENERATION_REPORT, _report_to_dict(exc.report))
        raise
    rows = [
        {
            "id": q.id,
            "cluster_id": rec.cluster_id,
            "instruction": rec.instruction,
            "input": rec.input,
            "source": "generated",
        }
        for q, rec in zip(result.pool.queries, result.records)
    ]
    art.write_jsonl(artifact_dir / art.GENERATED, rows)
    report = result.report
    art.write_json(artifact_dir / art.GENERATION_REPORT, _report_to_dict(report))
    logger.info(
        "generated %d queries over %d clusters (%d failed)",
        report.total_kept, len(report.clusters), len(report.failed_clusters),
    )
    if report.failed_clusters:
        raise PartialGenerationError(
            f"generation failed for clusters {report.failed_clusters}; "
            f"see {artifact_dir / art.GENERATION_REPORT}"
        )


def cmd_analyze(cfg: RunConfig, artifact_dir: Path) -> None:
    pool = art.rows_to_pool(art.read_jsonl(art.require_artifact(artifact_dir, art.POOL)))
    matrix, _ = load_matrix(
        art.require_artifact(artifact_dir, art.EMBEDDINGS_BIN),
        art.require_artifact(artifact_dir, art.EMBEDDINGS_META),
    )
    retained = art.load_retained(artifact_dir, pool)
    generated_rows = art.read_jsonl(art.require_artifact(artifact_dir, art.GENERATED))

    metrics_dir = artifact_dir / art.METRICS_DIR
    metrics_dir.mkdir(exist_ok=True)

    original = EmbeddingMatrix(matrix.data[retained.positions])
    labels = retained.assignments
    n_retained = original.rows

    budgets = [b for b in cfg.analyze_budgets if b <= n_retained]
    dropped = [b for b in cfg.analyze_budgets if b > n_retained]
    if dropped:
        logger.warning("dropping budgets %s > retained pool size %d", dropped, n_retained)
    if not budgets:
        budgets = [n_retained]

    curves = {}
    for strategy, filename in (
        (analyze_mod.STRATEGY_RANDOM, "hit_rate_random.csv"),
        (analyze_mod.STRATEGY_ROUND_ROBIN, "hit_rate_cliq.csv"),
    ):
        curve = analyze_mod.hit_rate_curve(
            labels, strategy, budgets, cfg.analyze_trials, cfg.seed
        )
        art.write_csv(
            metrics_dir / filename,
            ["budget", "mean_covered", "std_covered"],
            list(zip(curve.budgets, curve.mean_covered, curve.std_covered)),
        )
        curves[strategy] = curve

    redundancy_original = analyze_mod.intra_cluster_redundancy(original, labels, seed=cfg.seed)
    art.write_csv(
        metrics_dir / "redundancy_original.csv",
        ["cluster_id", "redundancy"],
        sorted(redundancy_original.per_cluster.items()),
    )

    gen_texts, gen_labels, gen_ids = [], [], []
    for row in generated_rows:
        gen_texts.append(join_instruction_input(str(row["instruction"]), str(row.get("input", ""))))
        gen_labels.append(int(row["cluster_id"]))
        gen_ids.append(int(row["id"]))
    gen_labels_arr = np.array(gen_labels, dtype=np.int64)
    gen_matrix = embed_texts(gen_texts, _backend_config(cfg), cfg.seed)

    redundancy_generated = analyze_mod.intra_cluster_redundancy(
        gen_matrix, gen_labels_arr, seed=cfg.seed
    )
    art.write_csv(
        metrics_dir / "redundancy_generated.csv",
        ["cluster_id", "redundancy"],
        sorted(redundancy_generated.per_cluster.items()),
    )

    art.write_csv(
        metrics_dir / "centroid_distance_original.csv",
        ["cluster_id", "distance"],
        analyze_mod.centroid_distance_distribution(original, labels, retained.centroids),
    )
    art.write_csv(
        metrics_dir / "centroid_distance_generated.csv",
        ["cluster_id", "distance"],
        analyze_mod.centroid_distance_distribution(
            gen_matrix, gen_labels_arr, retained.centroids
        ),
    )

    generated_pool = QueryPool(
        [
            Query(id=qid, text=text, source="generated", cluster_id=int(lab))
            for qid, text, lab in zip(gen_ids, gen_texts, gen_labels)
        ]
    )
    allocation_generated = analyze_mod.allocation_histogram(generated_pool)
    art.write_csv(
        metrics_dir / "allocation_generated.csv",
        ["cluster_id", "count"],
        sorted(allocation_generated.counts.items()),
    )

    sample_size = min(len(generated_pool), n_retained)
    rng = rng_from(cfg.seed, "allocation-random-baseline")
    baseline_idx = rng.choice(n_retained, size=sample_size, replace=False)
    baseline_pool = QueryPool([retained.pool.queries[int(i)] for i in baseline_idx])
    allocation_random = analyze_mod.allocation_histogram(baseline_pool)
    art.write_csv(
        metrics_dir / "allocation_random.csv",
        ["cluster_id", "count"],
        sorted(allocation_random.counts.items()),
    )

    stacked = EmbeddingMatrix(np.vstack([original.data, gen_matrix.data]))
    coords = analyze_mod.pca_project_2d(stacked, seed=cfg.seed)
    projection_rows = []
    for i in range(n_retained):
        projection_rows.append(
            (int(retained.query_ids[i]), coords[i, 0], coords[i, 1], int(labels[i]), "original")
        )
    for j in range(gen_matrix.rows):
        projection_rows.append(
            (gen_ids[j], coords[n_retained + j, 0], coords[n_retained + j, 1],
             int(gen_labels_arr[j]), "generated")
        )
    art.write_csv(
        metrics_dir / "projection.csv",
        ["query_id", "x", "y", "cluster_id", "source"],
        projection_rows,
    )

    bundle = {
        "total_clusters": int(retained.num_clusters),
        "retained_pool_size": int(n_retained),
        "generated_pool_size": len(generated_pool),
        "budgets": budgets,
        "hit_rate": {
            strategy: {
                "budgets": curve.budgets,
                "mean_covered": curve.mean_covered,
                "std_covered": curve.std_covered,
                "trials": curve.trials,
            }
            for strategy, curve in curves.items()
        },
        "redundancy": {
            "original_pooled_mean": redundancy_original.pooled_mean,
            "generated_pooled_mean": redundancy_generated.pooled_mean,
            "original_excluded_clusters": redundancy_original.excluded,
            "generated_excluded_clusters": redundancy_generated.excluded,
        },
        "allocation": {
            "generated_cv": allocation_generated.cv,
            "random_cv": allocation_random.cv,
            "random_sample_size": int(sample_size),
        },
    }
    art.write_json(metrics_dir / "metrics.json", bundle)
    logger.info("analysis written to %s", metrics_dir)


def cmd_simulate(cfg: RunConfig, artifact_dir: Path) -> None:
    world = sim.make_world(
        cfg.sim_k_true, cfg.sim_dim, cfg.sim_pool_size, cfg.sim_zipf_s, cfg.seed
    )
    teacher = sim.QuantizedTeacher(
        world, noise_sigma=cfg.sim_noise_sigma, quant_step=cfg.sim_quant_step
    )
    table = sim.run_budget_experiment(
        world,
        teacher,
        [sim.STRATEGY_RANDOM, sim.STRATEGY_CLIQ],
        list(cfg.sim_budgets),
        cfg.sim_m_per_cluster,
        cfg.sim_trials,
        cfg.seed,
    )
    sim.save_fidelity_csv(table, artifact_dir / art.FIDELITY)
    art.write_json(
        artifact_dir / art.SIMULATION_REPORT,
        {
            "k_true": cfg.sim_k_true,
            "dim": cfg.sim_dim,
            "pool_size": cfg.sim_pool_size,
            "zipf_s": cfg.sim_zipf_s,
            "noise_sigma": cfg.sim_noise_sigma,
            "quant_step": cfg.sim_quant_step,
            "m_per_cluster": cfg.sim_m_per_cluster,
            "trials": cfg.sim_trials,
            "budgets": list(cfg.sim_budgets),
            "cliq_budget": table.cliq_budget,
            "mismatches": table.mismatches,
            "max_prototype_cos": world.max_prototype_cos,
        },
    )
    for mismatch in table.mismatches:
        logger.warning("simulation budget mismatch: %s", mismatch)
    logger.info("fidelity table written to %s", artifact_dir / art.FIDELITY)


def cmd_pipeline(cfg: RunConfig, artifact_dir: Path) -> None:
    cmd_ingest(cfg, artifact_dir)
    cmd_embed(cfg, artifact_dir)
    cmd_cluster(cfg, artifact_dir)
    partial: PartialGenerationError | None = None
    try:
        cmd_generate(cfg, artifact_dir)
    except PartialGenerationError as exc:
        partial = exc  # artifacts written; finish remaining stages, then surface it
    cmd_analyze(cfg, artifact_dir)
    cmd_simulate(cfg, artifact_dir)
    if partial is not None:
        raise partial


COMMANDS = {
    "ingest": cmd_ingest,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "generate": cmd_generate,
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "pipeline": cmd_pipeline,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a JSON config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cliq",
        description="Clustered instruction querying pipeline with staged artifacts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd_parser = sub.add_parser(name, help=f"run the {name} stage")
        _add_config_flags(cmd_parser)
    score = sub.add_parser("score", help="batch-score candidate/reference pairs")
    score.add_argument("--pairs", required=True, help="JSONL of {candidate, reference}")
    score.add_argument("--out", required=True, help="output CSV path")
    score.add_argument("--percent", action="store_true", help="report scores as percentages")
    return parser


def _resolve_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(RunConfig)
        if getattr(args, f.name, None) is not None
    }
    return resolve_config(file_values, overrides)


def _error_record(exc: Exception, exit_code: int) -> str:
    return json.dumps(
        {"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code},
        sort_keys=True,
    )


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    if args.command == "score":
        try:
            means = score_pairs_jsonl(args.pairs, args.out, percent=args.percent)
        except (OSError, ValueError) as exc:
            print(_error_record(exc, EXIT_USER_ERROR), file=sys.stderr)
            return EXIT_USER_ERROR
        logger.info("corpus means: %s", {k: round(v, 6) for k, v in means.items()})
        return EXIT_OK

    try:
        cfg = _resolve_from_args(args)
        artifact_dir = Path(cfg.artifact_dir)
        artifact_dir.mkdir(parents=True, exist_ok=True)
        lock = art.acquire_lock(artifact_dir)
        try:
            write_resolved_config(cfg, artifact_dir / art.RESOLVED_CONFIG)
            COMMANDS[args.command](cfg, artifact_dir)
        finally:
            lock.release()
    except (ApiError, GenerationFailedError, PartialGenerationError) as exc:
        logger.error("%s", exc)
        print(_error_record(exc, EXIT_API_ERROR), file=sys.stderr)
        return EXIT_API_ERROR
    except (
        ConfigError,
        DatasetFormatError,
        EmptyClusteringError,
        art.ArtifactMissingError,
        art.ArtifactDirBusyError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        logger.error("%s", exc)
        print(_error_record(exc, EXIT_USER_ERROR), file=sys.stderr)
        return EXIT_USER_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
