"""Scikit-learn style wrappers around the training and retrieval pipeline.

``RegionEmbedder`` is a fit/transform/predict estimator over lists of
``AnnotatedImage``; ``AnatomyRetriever`` fits a per-anatomy clustered index
on top of a fitted embedder.  Both expose ``get_params``/``set_params`` so
they compose with sklearn tooling (clone, pipelines, grid search).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .dataset import AnnotatedImage, DatasetManifest
from .encoder import DEFAULT_LAYERS
from .errors import ParameterError
from .region_head import classify, embed_regions, predict_label
from .retrieval import (build_db, build_index, query_bruteforce,
                        query_hierarchical)
from .trainer import (TrainConfig, eval_classification, finetune, pretrain,
                      cotrain)


def as_manifest(X, num_classes: int, image_size) -> DatasetManifest:
    """Coerce a list of AnnotatedImage (or a manifest) into a validated manifest."""
    if isinstance(X, DatasetManifest):
        X.validate()
        return X
    samples = list(X)
    if not samples:
        raise ParameterError("empty sample list")
    if not all(isinstance(s, AnnotatedImage) for s in samples):
        raise ParameterError("X must be AnnotatedImage instances or a DatasetManifest")
    manifest = DatasetManifest(
        num_classes=num_classes,
        class_names=[f"class{i}" for i in range(num_classes)],
        image_size=tuple(samples[0].pixels.shape),
        samples=samples)
    manifest.validate()
    return manifest


class RegionEmbedder(BaseEstimator, TransformerMixin):
    """Trainable region embedding model with a built-in anatomy classifier.

    regime: "pretrain_finetune" (two stage), "scratch" (classification only)
    or "cotrain" (joint single stage).
    """

    def __init__(self, num_classes=6, regime="pretrain_finetune",
                 pretrain_epochs=20, finetune_epochs=20, batch_size=8,
                 lr_pretrain=3e-4, lr_finetune=1e-4, weight_decay=1e-4,
                 tau=0.1, lambda_cotrain=1.0, positive_mode="all_pairs",
                 image_size=(64, 64), encoder_layers=DEFAULT_LAYERS,
                 embed_dim=64, hidden_dim=128, seed=0):
        self.num_classes = num_classes
        self.regime = regime
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.lr_pretrain = lr_pretrain
        self.lr_finetune = lr_finetune
        self.weight_decay = weight_decay
        self.tau = tau
        self.lambda_cotrain = lambda_cotrain
        self.positive_mode = positive_mode
        self.image_size = image_size
        self.encoder_layers = encoder_layers
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.seed = seed

    def _config(self, stage, epochs, lr):
        return TrainConfig(stage=stage, epochs=epochs, batch_size=self.batch_size,
                           lr=lr, weight_decay=self.weight_decay, tau=self.tau,
                           lambda_cotrain=self.lambda_cotrain,
                           image_size=tuple(self.image_size), seed=self.seed,
                           positive_mode=self.positive_mode,
                           clusters_per_anatomy=min(4, self.batch_size - 1),
                           encoder_layers=tuple(tuple(l) for l in self.encoder_layers),
                           embed_dim=self.embed_dim, hidden_dim=self.hidden_dim)

    def fit(self, X, y=None):
        manifest = as_manifest(X, self.num_classes, self.image_size)
        if self.regime == "pretrain_finetune":
            pre = pretrain(self._config("pretrain", self.pretrain_epochs,
                                        self.lr_pretrain), manifest)
            self.checkpoint_ = finetune(self._config("finetune", self.finetune_epochs,
                                                     self.lr_finetune), manifest, pre)
        elif self.regime == "scratch":
            self.checkpoint_ = finetune(self._config("scratch", self.finetune_epochs,
                                                     self.lr_finetune), manifest)
        elif self.regime == "cotrain":
            self.checkpoint_ = cotrain(self._config("cotrain", self.pretrain_epochs,
                                                    self.lr_pretrain), manifest)
        else:
            raise ParameterError(f"unknown regime {self.regime!r}")
        return self

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise ParameterError("estimator is not fitted; call fit first")

    def embed(self, X):
        """Region embeddings for every box, one list per image."""
        self._check_fitted()
        manifest = as_manifest(X, self.num_classes, self.image_size)
        ckpt = self.checkpoint_
        return [embed_regions(ckpt.params, ckpt.encoder_config, s)
                for s in manifest.samples]

    def transform(self, X):
        """(n_regions, embed_dim) array of unit-norm embeddings."""
        embs = [e for group in self.embed(X) for e in group]
        return np.stack([e.z_norm for e in embs])

    def predict(self, X):
        """Predicted anatomy label per region, flattened across images."""
        self._check_fitted()
        ckpt = self.checkpoint_
        out = []
        for group in self.embed(X):
            for e in group:
                out.append(predict_label(classify(ckpt.params, e.z_norm)))
        return np.asarray(out)

    def score(self, X, y=None):
        """Region classification accuracy against the box labels."""
        self._check_fitted()
        manifest = as_manifest(X, self.num_classes, self.image_size)
        acc, _ = eval_classification(self.checkpoint_, manifest)
        return acc


class AnatomyRetriever(BaseEstimator):
    """Per-anatomy clustered retrieval index over a fitted RegionEmbedder."""

    def __init__(self, embedder=None, clusters_per_anatomy=4, top_k=5, seed=0):
        self.embedder = embedder
        self.clusters_per_anatomy = clusters_per_anatomy
        self.top_k = top_k
        self.seed = seed

    def fit(self, X, y=None):
        if self.embedder is None or not hasattr(self.embedder, "checkpoint_"):
            raise ParameterError("AnatomyRetriever needs a fitted RegionEmbedder")
        from .numerics import make_rng
        ckpt = self.embedder.checkpoint_
        manifest = as_manifest(X, self.embedder.num_classes, self.embedder.image_size)
        self.db_ = build_db(ckpt, manifest)
        self.index_ = build_index(self.db_, self.clusters_per_anatomy,
                                  make_rng(self.seed))
        return self

    def query(self, image, box, k=None, label_source="classifier",
              brute_force=False):
        if not hasattr(self, "index_"):
            raise ParameterError("retriever is not fitted; call fit first")
        k = self.top_k if k is None else k
        ckpt = self.embedder.checkpoint_
        if brute_force:
            restrict = box.label if label_source == "given" else None
            return query_bruteforce(self.db_, ckpt, image, box, k,
                                    restrict_label=restrict)
        return query_hierarchical(self.index_, self.db_, ckpt, image, box, k,
                                  label_source=label_source)
