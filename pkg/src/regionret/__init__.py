"""Region-based contrastive embeddings with anatomy-partitioned retrieval."""

from .dataset import (AnnotatedImage, BoundingBox, DatasetManifest,
                      gen_synthetic, load_dataset, resize, save_dataset,
                      split_folds)
from .encoder import EncoderConfig, FeatureMap
from .estimators import AnatomyRetriever, RegionEmbedder
from .losses import (ContrastiveBatch, cotrain_loss, cross_entropy_loss,
                     region_contrastive_loss)
from .numerics import make_rng
from .region_head import RegionEmbedding, embed_regions
from .retrieval import (AnatomyIndex, EmbeddingDB, KMeansModel, QueryResult,
                        build_db, build_index, kmeans_fit, load_db, load_index,
                        precision_at_k, query_bruteforce, query_hierarchical,
                        save_db, save_index, similarity_matrix)
from .trainer import (Checkpoint, TrainConfig, cotrain, eval_classification,
                      finetune, load_checkpoint, pretrain, run_training,
                      save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "BoundingBox", "DatasetManifest", "gen_synthetic",
    "load_dataset", "save_dataset", "split_folds", "resize",
    "EncoderConfig", "FeatureMap", "RegionEmbedding", "embed_regions",
    "ContrastiveBatch", "region_contrastive_loss", "cross_entropy_loss",
    "cotrain_loss", "make_rng",
    "TrainConfig", "Checkpoint", "pretrain", "finetune", "cotrain",
    "run_training", "eval_classification", "save_checkpoint", "load_checkpoint",
    "EmbeddingDB", "AnatomyIndex", "KMeansModel", "QueryResult", "build_db",
    "build_index", "kmeans_fit", "query_hierarchical", "query_bruteforce",
    "similarity_matrix", "precision_at_k", "save_db", "load_db", "save_index",
    "load_index",
    "RegionEmbedder", "AnatomyRetriever",
]
