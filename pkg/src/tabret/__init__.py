"""tabret: dense table retrieval with cluster-guided partial tables.

Pipeline stages: corpus ingestion, instance embedding, per-table K-means,
partial-table construction, synthetic query generation, hard-negative
mining, contrastive adapter training, and recall@k evaluation.
"""

__version__ = "0.1.0"
