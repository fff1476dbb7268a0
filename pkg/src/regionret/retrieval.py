"""Anchor embedding database, per-anatomy K-means, hierarchical search.

The database stores unit-norm region embeddings from training samples as
float32.  For each anatomy label present, a K-means model (default K=4,
k-means++ seeding, Lloyd iterations to an assignment fixpoint) partitions
that label's records.  A query is embedded, assigned a pseudo label (the
classifier's argmax, or the ground-truth box label), and ranked first
against the chosen model's centroids and then within the best cluster(s) by
cosine similarity, spilling into next-nearest clusters while they can still
contribute to the top k (see ``query_hierarchical``).

Binary formats:
  DB file:    magic ``RMDB``, u32 version, u32 d, u32 count, then per record
              u32 id length + UTF-8 id, u16 label, d little-endian f32.
  Index file: magic ``RMIX``, u32 version, u32 d, u32 block count, then per
              anatomy: u16 label, u32 K, u8 reduced-flag, u32 member count,
              K*d f32 centroids, member record indices (u32) and their
              centroid assignments (u32), f64 inertia.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import AnnotatedImage, BoundingBox, DatasetManifest
from .encoder import encoder_forward
from .errors import (FormatError, ParameterError, UnknownAnatomyError,
                     VersionError)
from .region_head import classify, embed_regions, predict_label, project, roi_pool
from .trainer import Checkpoint, prepare_samples

DB_MAGIC = b"RMDB"
INDEX_MAGIC = b"RMIX"
DB_VERSION = 1
INDEX_VERSION = 1


@dataclass
class DBRecord:
    image_id: str
    label: int
    vec: np.ndarray  # float32, unit norm within f32 rounding


@dataclass
class EmbeddingDB:
    dim: int
    records: list = field(default_factory=list)

    def label_index(self) -> dict:
        idx: dict[int, list[int]] = {}
        for i, r in enumerate(self.records):
            idx.setdefault(r.label, []).append(i)
        return idx


@dataclass
class KMeansModel:
    label: int
    centroids: np.ndarray  # (K, d) float32
    assignments: np.ndarray  # centroid id per member point
    inertia: float
    reduced: bool = False
    inertia_history: list = field(default_factory=list)


@dataclass
class AnatomyIndex:
    dim: int
    models: dict = field(default_factory=dict)  # label -> KMeansModel
    members: dict = field(default_factory=dict)  # label -> record indices (np.ndarray u32)


@dataclass
class QueryResult:
    hits: list  # (image_id, similarity, label), scores non-increasing
    candidates_evaluated: int
    pseudo_label: int


# Embedding the query / building the DB ----------------------------------

def embed_query_region(ckpt: Checkpoint, image: AnnotatedImage,
                       box: BoundingBox):
    """(z_norm float64, pseudo label from the classifier)."""
    fmap, _ = encoder_forward(ckpt.params, ckpt.encoder_config,
                              image.pixels[None, :, :])
    pooled = roi_pool(fmap, box)
    _, z_norm, _ = project(ckpt.params, pooled)
    pseudo = predict_label(classify(ckpt.params, z_norm))
    return z_norm, pseudo


def build_db(ckpt: Checkpoint, manifest: DatasetManifest,
             indices=None) -> EmbeddingDB:
    """Embed every region of the split; stored as f32 in sample order then label order."""
    samples = prepare_samples(manifest, ckpt.train_config.image_size)
    if indices is not None:
        samples = [samples[i] for i in indices]
    if not samples:
        raise ParameterError("cannot build a database from an empty split")
    db = EmbeddingDB(dim=ckpt.train_config.embed_dim)
    for sample in samples:
        for emb in embed_regions(ckpt.params, ckpt.encoder_config, sample):
            db.records.append(DBRecord(emb.image_id, emb.label,
                                       emb.z_norm.astype(np.float32)))
    return db


# K-means ----------------------------------------------------------------

def kmeans_fit(points: np.ndarray, k: int, rng: np.random.Generator,
               max_iters: int = 100, label: int = -1) -> KMeansModel:
    """Seeded k-means++ init and Lloyd iterations to an assignment fixpoint.

    K is reduced to the point count when there are fewer points than
    requested clusters; ties in nearest-centroid go to the lowest id.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ParameterError("kmeans_fit needs a nonempty (n, d) point set")
    n = len(pts)
    reduced = k > n
    k = min(k, n)
    if k < 1:
        raise ParameterError(f"cluster count must be >= 1, got {k}")

    # k-means++ seeding
    centroids = np.empty((k, pts.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = pts[first]
    d2 = np.sum((pts - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            choice = int(rng.integers(n))
        else:
            choice = int(rng.choice(n, p=d2 / total))
        centroids[j] = pts[choice]
        d2 = np.minimum(d2, np.sum((pts - centroids[j]) ** 2, axis=1))

    assign = np.full(n, -1)
    history = []
    prev_inertia = np.inf
    for _ in range(max_iters):
        dist = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dist, axis=1)  # lowest id on ties
        inertia = float(dist[np.arange(n), new_assign].sum())
        if inertia > prev_inertia + 1e-9:
            raise AssertionError("Lloyd inertia increased")
        history.append(inertia)
        prev_inertia = inertia
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = pts[assign == j]
            if len(members):  # empty clusters keep their previous centroid
                centroids[j] = members.mean(axis=0)

    cent32 = centroids.astype(np.float32)
    # final assignment against the stored f32 centroids keeps the
    # nearest-centroid invariant exact for what is persisted
    dist = np.sum((pts[:, None, :] - cent32[None, :, :].astype(np.float64)) ** 2, axis=2)
    assign = np.argmin(dist, axis=1)
    inertia = float(dist[np.arange(n), assign].sum())
    return KMeansModel(label=label, centroids=cent32,
                       assignments=assign.astype(np.uint32),
                       inertia=inertia, reduced=reduced,
                       inertia_history=history)


def build_index(db: EmbeddingDB, k: int, rng: np.random.Generator) -> AnatomyIndex:
    if not db.records:
        raise ParameterError("cannot index an empty database")
    index = AnatomyIndex(dim=db.dim)
    for label, rec_ids in sorted(db.label_index().items()):
        pts = np.stack([db.records[i].vec for i in rec_ids]).astype(np.float64)
        model = kmeans_fit(pts, k, rng, label=label)
        index.models[label] = model
        index.members[label] = np.asarray(rec_ids, dtype=np.uint32)
    return index


# Queries ----------------------------------------------------------------

def _cosine_to_many(q: np.ndarray, mat: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(q)
    norms = np.linalg.norm(mat, axis=1)
    return np.clip((mat @ q) / (norms * qn), -1.0, 1.0)


def query_hierarchical(index: AnatomyIndex, db: EmbeddingDB, ckpt: Checkpoint,
                       image: AnnotatedImage, box: BoundingBox, k: int,
                       label_source: str = "classifier",
                       refine_margin: float = 0.005) -> QueryResult:
    """Centroid ranking, then within-cluster ranking with bounded spill.

    Clusters are visited in decreasing centroid similarity.  Once k results
    are collected, the scan continues only while the next centroid's
    similarity is within ``refine_margin`` of the current k-th best member
    similarity, and only while the running candidate count stays strictly
    below a flat scan of the anatomy; this recovers near-boundary neighbors
    without ever matching the brute-force cost.
    """
    if label_source not in ("classifier", "given"):
        raise ParameterError(f"unknown label_source {label_source!r}")
    z_norm, classifier_label = embed_query_region(ckpt, image, box)
    pseudo = box.label if label_source == "given" else classifier_label
    if pseudo not in index.models:
        raise UnknownAnatomyError(pseudo)
    q = z_norm.astype(np.float32).astype(np.float64)
    model = index.models[pseudo]
    members = index.members[pseudo]

    cent_sims = _cosine_to_many(q, model.centroids.astype(np.float64))
    candidates = len(cent_sims)
    order = np.argsort(-cent_sims, kind="stable")
    collected = []  # (similarity, record_index)
    for cid in order:
        rec_ids = members[model.assignments == cid]
        if len(collected) >= k:
            kth = sorted(collected, key=lambda t: -t[0])[k - 1][0]
            if cent_sims[cid] < kth - refine_margin:
                break
            # spilling must stay cheaper than a flat scan of the anatomy
            if candidates + len(rec_ids) >= len(members):
                break
        if len(rec_ids) == 0:
            continue
        vecs = np.stack([db.records[i].vec for i in rec_ids]).astype(np.float64)
        sims = _cosine_to_many(q, vecs)
        candidates += len(rec_ids)
        collected.extend(zip(sims.tolist(), rec_ids.tolist()))
    collected.sort(key=lambda t: (-t[0], t[1]))
    hits = [(db.records[i].image_id, float(s), db.records[i].label)
            for s, i in collected[:k]]
    return QueryResult(hits=hits, candidates_evaluated=candidates,
                       pseudo_label=pseudo)


def query_bruteforce(db: EmbeddingDB, ckpt: Checkpoint, image: AnnotatedImage,
                     box: BoundingBox, k: int,
                     restrict_label=None) -> QueryResult:
    """Exact O(n) scan; the oracle the hierarchical path is checked against."""
    z_norm, classifier_label = embed_query_region(ckpt, image, box)
    q = z_norm.astype(np.float32).astype(np.float64)
    if restrict_label is None:
        rec_ids = list(range(len(db.records)))
    else:
        rec_ids = db.label_index().get(restrict_label, [])
    scored = []
    for i in rec_ids:
        vec = db.records[i].vec.astype(np.float64)
        sim = float((vec @ q) / (np.linalg.norm(vec) * np.linalg.norm(q)))
        scored.append((min(1.0, max(-1.0, sim)), i))
    scored.sort(key=lambda t: (-t[0], t[1]))
    hits = [(db.records[i].image_id, s, db.records[i].label)
            for s, i in scored[:k]]
    pseudo = restrict_label if restrict_label is not None else classifier_label
    return QueryResult(hits=hits, candidates_evaluated=len(rec_ids),
                       pseudo_label=pseudo)


# Diagnostics ------------------------------------------------------------

def similarity_matrix(embeddings, labels, num_classes: int) -> np.ndarray:
    """Mean pairwise cosine similarity between anatomy groups.

    Entry (i, j) averages all cross pairs for i != j and all distinct
    unordered pairs on the diagonal; diagonal entries for classes with
    fewer than 2 embeddings are NaN.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(z) == 0:
        raise ParameterError("similarity_matrix needs at least one embedding")
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    sims = zn @ zn.T
    out = np.full((num_classes, num_classes), np.nan)
    for i in range(num_classes):
        gi = np.where(labels == i)[0]
        for j in range(i, num_classes):
            gj = np.where(labels == j)[0]
            if i == j:
                if len(gi) >= 2:
                    block = sims[np.ix_(gi, gi)]
                    npairs = len(gi) * (len(gi) - 1) / 2
                    out[i, i] = (block.sum() - len(gi)) / 2 / npairs
            elif len(gi) and len(gj):
                out[i, j] = out[j, i] = sims[np.ix_(gi, gj)].mean()
    return out


def precision_at_k(result: QueryResult, true_label: int) -> float:
    if not result.hits:
        raise ParameterError("precision_at_k over an empty result")
    return sum(1 for _, _, lab in result.hits if lab == true_label) / len(result.hits)


# Persistence ------------------------------------------------------------

def save_db(db: EmbeddingDB, path) -> None:
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC)
        fh.write(struct.pack("<III", DB_VERSION, db.dim, len(db.records)))
        for r in db.records:
            idb = r.image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(idb)))
            fh.write(idb)
            fh.write(struct.pack("<H", r.label))
            fh.write(np.ascontiguousarray(r.vec, dtype="<f4").tobytes())


def load_db(path) -> EmbeddingDB:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != DB_MAGIC:
        raise FormatError(f"{path}: not an embedding database")
    version, dim, count = struct.unpack("<III", raw[4:16])
    if version != DB_VERSION:
        raise VersionError(f"{path}: unsupported DB version {version}")
    db = EmbeddingDB(dim=dim)
    off = 16
    try:
        for _ in range(count):
            (idlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            image_id = raw[off:off + idlen].decode("utf-8")
            off += idlen
            (label,) = struct.unpack_from("<H", raw, off)
            off += 2
            vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off).copy()
            off += dim * 4
            db.records.append(DBRecord(image_id, label, vec))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated database") from exc
    return db


def save_index(index: AnatomyIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<III", INDEX_VERSION, index.dim, len(index.models)))
        for label in sorted(index.models):
            m = index.models[label]
            members = index.members[label]
            fh.write(struct.pack("<HIBI", label, len(m.centroids),
                                 1 if m.reduced else 0, len(members)))
            fh.write(np.ascontiguousarray(m.centroids, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(members, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(m.assignments, dtype="<u4").tobytes())
            fh.write(struct.pack("<d", m.inertia))


def load_index(path) -> AnatomyIndex:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != INDEX_MAGIC:
        raise FormatError(f"{path}: not an index file")
    version, dim, nblocks = struct.unpack("<III", raw[4:16])
    if version != INDEX_VERSION:
        raise VersionError(f"{path}: unsupported index version {version}")
    index = AnatomyIndex(dim=dim)
    off = 16
    try:
        for _ in range(nblocks):
            label, k, reduced, nmembers = struct.unpack_from("<HIBI", raw, off)
            off += struct.calcsize("<HIBI")
            cents = np.frombuffer(raw, dtype="<f4", count=k * dim,
                                  offset=off).reshape(k, dim).copy()
            off += k * dim * 4
            members = np.frombuffer(raw, dtype="<u4", count=nmembers, offset=off).copy()
            off += nmembers * 4
            assigns = np.frombuffer(raw, dtype="<u4", count=nmembers, offset=off).copy()
            off += nmembers * 4
            (inertia,) = struct.unpack_from("<d", raw, off)
            off += 8
            index.models[label] = KMeansModel(label=label, centroids=cents,
                                              assignments=assigns,
                                              inertia=inertia,
                                              reduced=bool(reduced))
            index.members[label] = members
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated index") from exc
    return index
