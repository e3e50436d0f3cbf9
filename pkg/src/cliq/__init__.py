"""Clustered instruction querying: semantic clustering of instruction
pools, cluster-conditioned query generation against an LLM API, coverage
and redundancy analytics, text metrics, and a budgeted-extraction
simulator."""

from .corpus import InstructionRecord, Query, QueryPool, build_query_pool, load_instruction_dataset
from .embed import EmbeddingBackendConfig, EmbeddingMatrix, cosine_similarity, embed_local
from .cluster import ClusteringConfig, ClusterModel, RetainedClustering, filter_small_clusters, minibatch_kmeans
from .genquery import (
    GeneratedQuery,
    TeacherEndpointConfig,
    build_cluster_prompt,
    chat_complete,
    generate_query_set,
    parse_generated_queries,
)
from .analyze import (
    allocation_histogram,
    centroid_distance_distribution,
    hit_rate_curve,
    intra_cluster_redundancy,
    pca_project_2d,
)
from .textmetrics import ScoreTriple, bleu, rouge_l, rouge_lsum, rouge_n, tokenize
from .extractsim import QuantizedTeacher, SimWorld, StudentModel, make_world, run_budget_experiment

__version__ = "0.1.0"
