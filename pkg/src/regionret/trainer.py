"""Training regimes, checkpoint persistence, and classification evaluation.

Regimes mirror the experiment grid: contrastive pretraining, classification
fine-tuning (optionally from scratch), and single-stage co-training.  All
randomness flows from the config seed through one PCG64 stream, so a
(seed, config, dataset) triple fully determines every checkpoint byte.

Checkpoint file: magic ``RMIR``, u32 version, u32 header length, UTF-8 JSON
header (configs, epoch, rng state, tensor manifest with name/shape/offset),
then raw little-endian float64 payloads in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import AnnotatedImage, DatasetManifest, resize
from .encoder import (DEFAULT_LAYERS, EncoderConfig, encoder_backward,
                      encoder_forward, encoder_init)
from .errors import (ConfigValidationError, FormatError, InsufficientDataError,
                     ParameterError, ShapeConsistencyError, VersionError)
from .losses import (ContrastiveBatch, cotrain_loss, cross_entropy_loss,
                     region_contrastive_loss)
from .numerics import AdamState, adam_step, make_rng
from .region_head import (RegionEmbedding, classifier_init, classify,
                          classify_backward, predict_label, project,
                          project_backward, projection_init, roi_pool,
                          roi_pool_backward)

CHECKPOINT_MAGIC = b"RMIR"
CHECKPOINT_VERSION = 1

STAGES = ("pretrain", "finetune", "scratch", "cotrain")
_DEFAULT_LR = {"pretrain": 3e-4, "cotrain": 3e-4, "finetune": 1e-4, "scratch": 1e-4}


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 50
    batch_size: int = 8
    lr: float | None = None  # stage default when None
    weight_decay: float = 1e-4
    tau: float = 0.1
    lambda_cotrain: float = 1.0
    image_size: tuple = (64, 64)
    seed: int = 0
    clusters_per_anatomy: int = 4
    positive_mode: str = "all_pairs"
    include_self: bool = False
    encoder_layers: tuple = DEFAULT_LAYERS
    embed_dim: int = 64
    hidden_dim: int = 128

    @property
    def resolved_lr(self) -> float:
        return self.lr if self.lr is not None else _DEFAULT_LR[self.stage]

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigValidationError(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ConfigValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size <= self.clusters_per_anatomy:
            raise ConfigValidationError(
                f"batch_size ({self.batch_size}) must exceed the per-anatomy "
                f"cluster count ({self.clusters_per_anatomy})")
        if self.resolved_lr <= 0:
            raise ConfigValidationError(f"lr must be positive, got {self.resolved_lr}")
        if self.tau <= 0:
            raise ConfigValidationError(f"tau must be positive, got {self.tau}")
        if self.lambda_cotrain < 0:
            raise ConfigValidationError("lambda_cotrain must be >= 0")
        if self.positive_mode not in ("all_pairs", "paired"):
            raise ConfigValidationError(f"unknown positive_mode {self.positive_mode!r}")


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    train_config: TrainConfig
    num_classes: int
    epoch: int
    rng_state: dict
    params: dict  # name -> float64 ndarray
    loss_history: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION


def init_model(config: TrainConfig, num_classes: int,
               rng: np.random.Generator) -> tuple[EncoderConfig, dict]:
    enc_cfg = EncoderConfig(layers=tuple(tuple(l) for l in config.encoder_layers))
    params = encoder_init(enc_cfg, rng)
    params.update(projection_init(rng, enc_cfg.out_channels,
                                  d_hid=config.hidden_dim, d_out=config.embed_dim))
    params.update(classifier_init(config.embed_dim, num_classes))
    return enc_cfg, params


def prepare_samples(manifest: DatasetManifest,
                    image_size: tuple) -> list[AnnotatedImage]:
    if tuple(manifest.image_size) == tuple(image_size):
        return list(manifest.samples)
    return [resize(s, tuple(image_size)) for s in manifest.samples]


# Per-sample forward/backward --------------------------------------------

class _SamplePass:
    """Forward state for one image: feature map plus per-region caches."""

    def __init__(self, params, enc_cfg, sample: AnnotatedImage):
        self.sample = sample
        self.fmap, self.enc_cache = encoder_forward(
            params, enc_cfg, sample.pixels[None, :, :])
        self.regions = []  # (box, proj_cache, z, z_norm)
        for box in sorted(sample.boxes, key=lambda b: b.label):
            pooled = roi_pool(self.fmap, box)
            z, z_norm, cache = project(params, pooled)
            self.regions.append((box, cache, z, z_norm))

    def embeddings(self) -> list[RegionEmbedding]:
        return [RegionEmbedding(self.sample.id, box.label, z, z_norm)
                for box, _, z, z_norm in self.regions]

    def backward(self, params, enc_cfg, dz_norms, grads) -> None:
        """Accumulate parameter gradients given one dz_norm per region."""
        dfmap = np.zeros_like(self.fmap.data)
        s = self.fmap.downsample_factor
        for (box, cache, _, _), dzn in zip(self.regions, dz_norms):
            pgrads, dr = project_backward(params, cache, dz_norm=dzn)
            for k, g in pgrads.items():
                grads[k] += g
            dfmap += roi_pool_backward(self.fmap.data.shape, s, box, dr)
        egrads, _ = encoder_backward(params, enc_cfg, self.enc_cache, dfmap)
        for k, g in egrads.items():
            grads[k] += g


def _zero_grads(params: dict, keys) -> dict:
    return {k: np.zeros_like(params[k]) for k in keys}


def _copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


# Regimes ----------------------------------------------------------------

def _check_size(n: int, m: int) -> None:
    if n < 2 * m:
        raise InsufficientDataError(
            f"dataset of {n} images is smaller than twice the batch size ({m})")


def _resolve_init(config, num_classes, rng, init):
    if init is None:
        return init_model(config, num_classes, rng)
    if isinstance(init, Checkpoint):
        return init.encoder_config, _copy_params(init.params)
    enc_cfg = EncoderConfig(layers=tuple(tuple(l) for l in config.encoder_layers))
    return enc_cfg, _copy_params(init)


def _contrastive_step(params, enc_cfg, config, samples, qidx, aidx, grads,
                      with_classifier_loss: bool):
    """One optimization step's losses and accumulated gradients.

    Returns (contrastive_loss, ce_loss).  CE terms are scaled by
    lambda_cotrain inside the gradient accumulation when requested.
    """
    qpass = [_SamplePass(params, enc_cfg, samples[i]) for i in qidx]
    apass = [_SamplePass(params, enc_cfg, samples[i]) for i in aidx]
    batch = ContrastiveBatch(
        query_groups=[p.embeddings() for p in qpass],
        anchor_groups=[p.embeddings() for p in apass],
        tau=config.tau, positive_mode=config.positive_mode,
        include_self=config.include_self)
    closs, zgrads = region_contrastive_loss(batch)

    ce = 0.0
    if with_classifier_loss:
        lam = config.lambda_cotrain
        flat_regions = [(p, ri) for p in qpass + apass
                        for ri in range(len(p.regions))]
        items = []
        for p, ri in flat_regions:
            box, _, _, z_norm = p.regions[ri]
            items.append((classify(params, z_norm), box.label))
        ce, ce_grads = cross_entropy_loss(items)
        idx = 0
        for (p, ri), dlog in zip(flat_regions, ce_grads):
            _, _, _, z_norm = p.regions[ri]
            cgrads, dzn = classify_backward(params, z_norm, lam * dlog)
            grads["cls_w"] += cgrads["cls_w"]
            grads["cls_b"] += cgrads["cls_b"]
            zgrads[idx] = zgrads[idx] + dzn
            idx += 1
    pos = 0
    for p in qpass + apass:
        k = len(p.regions)
        p.backward(params, enc_cfg, zgrads[pos:pos + k], grads)
        pos += k
    return closs, ce


def pretrain(config: TrainConfig, manifest: DatasetManifest,
             init=None) -> Checkpoint:
    return _contrastive_regime(config, manifest, init, cotraining=False)


def cotrain(config: TrainConfig, manifest: DatasetManifest,
            init=None) -> Checkpoint:
    return _contrastive_regime(config, manifest, init, cotraining=True)


def _contrastive_regime(config, manifest, init, cotraining: bool) -> Checkpoint:
    config.validate()
    expected = "cotrain" if cotraining else "pretrain"
    if config.stage != expected:
        raise ConfigValidationError(f"config stage {config.stage!r}, expected {expected!r}")
    samples = prepare_samples(manifest, config.image_size)
    n = len(samples)
    m = config.batch_size
    _check_size(n, m)
    rng = make_rng(config.seed)
    enc_cfg, params = _resolve_init(config, manifest.num_classes, rng, init)
    trainable = [k for k in params if k.startswith(("enc", "proj"))]
    if cotraining:
        trainable += [k for k in params if k.startswith("cls")]
    opt_params = {k: params[k] for k in trainable}
    opt = AdamState.init(opt_params, weight_decay=config.weight_decay)
    lr = config.resolved_lr
    history = []
    steps = n // m
    for _epoch in range(config.epochs):
        qperm = rng.permutation(n)
        aperm = rng.permutation(n)
        epoch_losses = []
        for t in range(steps):
            qidx = qperm[t * m:(t + 1) * m]
            aidx = aperm[t * m:(t + 1) * m]
            grads = _zero_grads(params, trainable)
            closs, ce = _contrastive_step(params, enc_cfg, config, samples,
                                          qidx, aidx, grads,
                                          with_classifier_loss=cotraining)
            total = cotrain_loss(closs, ce, config.lambda_cotrain) if cotraining else closs
            epoch_losses.append(total)
            adam_step(opt_params, grads, opt, lr)
        history.append(float(np.mean(epoch_losses)))
    return Checkpoint(encoder_config=enc_cfg, train_config=config,
                      num_classes=manifest.num_classes, epoch=config.epochs,
                      rng_state=rng.bit_generator.state, params=params,
                      loss_history=history)


def finetune(config: TrainConfig, manifest: DatasetManifest,
             init=None) -> Checkpoint:
    """Classification fine-tuning; ``init=None`` is the from-scratch regime."""
    config.validate()
    if config.stage not in ("finetune", "scratch"):
        raise ConfigValidationError(f"config stage {config.stage!r}, expected finetune/scratch")
    samples = prepare_samples(manifest, config.image_size)
    n = len(samples)
    m = config.batch_size
    _check_size(n, m)
    rng = make_rng(config.seed)
    enc_cfg, params = _resolve_init(config, manifest.num_classes, rng, init)
    opt = AdamState.init(params, weight_decay=config.weight_decay)
    lr = config.resolved_lr
    history = []
    steps = n // m
    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_losses = []
        for t in range(steps):
            idx = perm[t * m:(t + 1) * m]
            passes = [_SamplePass(params, enc_cfg, samples[i]) for i in idx]
            flat = [(p, ri) for p in passes for ri in range(len(p.regions))]
            items = [(classify(params, p.regions[ri][3]), p.regions[ri][0].label)
                     for p, ri in flat]
            loss, dlogits = cross_entropy_loss(items)
            grads = _zero_grads(params, params.keys())
            dz_by_pass = {id(p): [np.zeros(config.embed_dim) for _ in p.regions]
                          for p in passes}
            for (p, ri), dlog in zip(flat, dlogits):
                cgrads, dzn = classify_backward(params, p.regions[ri][3], dlog)
                grads["cls_w"] += cgrads["cls_w"]
                grads["cls_b"] += cgrads["cls_b"]
                dz_by_pass[id(p)][ri] += dzn
            for p in passes:
                p.backward(params, enc_cfg, dz_by_pass[id(p)], grads)
            epoch_losses.append(loss)
            adam_step(params, grads, opt, lr)
        history.append(float(np.mean(epoch_losses)))
    return Checkpoint(encoder_config=enc_cfg, train_config=config,
                      num_classes=manifest.num_classes, epoch=config.epochs,
                      rng_state=rng.bit_generator.state, params=params,
                      loss_history=history)


def run_training(config: TrainConfig, manifest: DatasetManifest,
                 init=None) -> Checkpoint:
    """Stage dispatch used by the CLI."""
    if config.stage == "pretrain":
        return pretrain(config, manifest, init)
    if config.stage == "cotrain":
        return cotrain(config, manifest, init)
    return finetune(config, manifest, init)


# Evaluation -------------------------------------------------------------

def eval_classification(ckpt: Checkpoint, manifest: DatasetManifest,
                        indices=None):
    """Region classification accuracy plus a (true, predicted) confusion matrix."""
    samples = prepare_samples(manifest, ckpt.train_config.image_size)
    if indices is not None:
        samples = [samples[i] for i in indices]
    if not samples:
        raise ParameterError("evaluation split is empty")
    c = ckpt.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    correct = 0
    total = 0
    for sample in samples:
        sp = _SamplePass(ckpt.params, ckpt.encoder_config, sample)
        for box, _, _, z_norm in sp.regions:
            pred = predict_label(classify(ckpt.params, z_norm))
            confusion[box.label, pred] += 1
            correct += int(pred == box.label)
            total += 1
    if total == 0:
        raise ParameterError("evaluation split holds no annotated regions")
    return correct / total, confusion


# Checkpoint persistence -------------------------------------------------

def _config_to_json(config: TrainConfig) -> dict:
    doc = asdict(config)
    doc["image_size"] = list(config.image_size)
    doc["encoder_layers"] = [list(l) for l in config.encoder_layers]
    return doc


def _config_from_json(doc: dict) -> TrainConfig:
    doc = dict(doc)
    doc["image_size"] = tuple(doc["image_size"])
    doc["encoder_layers"] = tuple(tuple(l) for l in doc["encoder_layers"])
    return TrainConfig(**doc)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.params.keys())
    manifest = []
    offset = 0
    for name in names:
        arr = ckpt.params[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "encoder_config": {"layers": [list(l) for l in ckpt.encoder_config.layers],
                           "in_channels": ckpt.encoder_config.in_channels},
        "train_config": _config_to_json(ckpt.train_config),
        "num_classes": ckpt.num_classes,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "loss_history": ckpt.loss_history,
        "tensors": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from exc
    payload = raw[12 + hlen:]
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise FormatError(f"{path}: truncated tensor payload for {entry['name']}")
        params[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f8").reshape(shape).copy()
    enc = header["encoder_config"]
    enc_cfg = EncoderConfig(layers=tuple(tuple(l) for l in enc["layers"]),
                            in_channels=enc["in_channels"])
    ckpt = Checkpoint(encoder_config=enc_cfg,
                      train_config=_config_from_json(header["train_config"]),
                      num_classes=header["num_classes"],
                      epoch=header["epoch"],
                      rng_state=header["rng_state"],
                      params=params,
                      loss_history=header["loss_history"],
                      version=version)
    _check_shapes(ckpt)
    return ckpt


def _check_shapes(ckpt: Checkpoint) -> None:
    cfg = ckpt.train_config
    expect = {}
    cin = ckpt.encoder_config.in_channels
    for i, (cout, _) in enumerate(ckpt.encoder_config.layers):
        expect[f"enc{i}_w"] = (cout, cin, 3, 3)
        expect[f"enc{i}_b"] = (cout,)
        cin = cout
    expect["proj_w1"] = (cfg.hidden_dim, ckpt.encoder_config.out_channels)
    expect["proj_b1"] = (cfg.hidden_dim,)
    expect["proj_w2"] = (cfg.embed_dim, cfg.hidden_dim)
    expect["proj_b2"] = (cfg.embed_dim,)
    expect["cls_w"] = (ckpt.num_classes, cfg.embed_dim)
    expect["cls_b"] = (ckpt.num_classes,)
    for name, shape in expect.items():
        if name not in ckpt.params:
            raise ShapeConsistencyError(f"missing tensor {name}")
        if ckpt.params[name].shape != shape:
            raise ShapeConsistencyError(
                f"tensor {name}: shape {ckpt.params[name].shape}, expected {shape}")
