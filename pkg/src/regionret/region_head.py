"""Region machinery: ROI average pooling, projection MLP, linear classifier.

A bounding box in image coordinates is mapped to feature-map cells by
dividing by the encoder's downsample factor, rounding the mins down and the
maxes up, clamping, and forcing at least one cell.  The pooled per-channel
mean feeds a two-layer MLP whose output is L2-normalized; the classifier is
an affine map on the normalized embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import AnnotatedImage, BoundingBox
from .encoder import EncoderConfig, FeatureMap, encoder_forward
from .errors import DimensionError
from .numerics import l2_normalize


@dataclass
class RegionEmbedding:
    image_id: str
    label: int
    z: np.ndarray       # raw projection output, float64
    z_norm: np.ndarray  # unit-norm, float64


def feature_cells(box: BoundingBox, s: int, fh: int, fw: int):
    """(i0, i1, j0, j1) cell range covered by a box, always nonempty."""
    i0 = min(max(box.y0 // s, 0), fh - 1)
    j0 = min(max(box.x0 // s, 0), fw - 1)
    i1 = min(max(math.ceil(box.y1 / s), i0 + 1), fh)
    j1 = min(max(math.ceil(box.x1 / s), j0 + 1), fw)
    return i0, i1, j0, j1


def roi_pool(fmap: FeatureMap, box: BoundingBox) -> np.ndarray:
    c, fh, fw = fmap.data.shape
    i0, i1, j0, j1 = feature_cells(box, fmap.downsample_factor, fh, fw)
    return fmap.data[:, i0:i1, j0:j1].mean(axis=(1, 2))


def roi_pool_backward(fmap_shape, downsample_factor: int, box: BoundingBox,
                      grad_out: np.ndarray) -> np.ndarray:
    c, fh, fw = fmap_shape
    i0, i1, j0, j1 = feature_cells(box, downsample_factor, fh, fw)
    ncells = (i1 - i0) * (j1 - j0)
    grad = np.zeros(fmap_shape, dtype=np.float64)
    grad[:, i0:i1, j0:j1] = (grad_out / ncells)[:, None, None]
    return grad


# Projection MLP ---------------------------------------------------------

def projection_init(rng: np.random.Generator, d_in: int,
                    d_hid: int = 128, d_out: int = 64) -> dict:
    return {
        "proj_w1": rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_hid, d_in)),
        "proj_b1": np.zeros(d_hid),
        "proj_w2": rng.normal(0.0, np.sqrt(1.0 / d_hid), size=(d_out, d_hid)),
        "proj_b2": np.zeros(d_out),
    }


def classifier_init(d: int, num_classes: int) -> dict:
    # zero init: gradients break symmetry through the input features
    return {"cls_w": np.zeros((num_classes, d)), "cls_b": np.zeros(num_classes)}


def project(params: dict, r: np.ndarray):
    """Two-layer MLP then L2 normalization; returns (z, z_norm, cache)."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (params["proj_w1"].shape[1],):
        raise DimensionError(f"projection input {r.shape} != ({params['proj_w1'].shape[1]},)")
    pre = params["proj_w1"] @ r + params["proj_b1"]
    hid = np.maximum(pre, 0.0)
    z = params["proj_w2"] @ hid + params["proj_b2"]
    z_norm = l2_normalize(z)
    cache = (r, pre > 0.0, hid, z, float(np.linalg.norm(z)))
    return z, z_norm, cache


def project_backward(params: dict, cache, dz_norm=None, dz=None):
    """Backward through (optionally) the normalization and the MLP.

    Returns (param grads, grad w.r.t. the pooled input).
    """
    r, relu_mask, hid, z, znorm_len = cache
    total_dz = np.zeros_like(z)
    if dz is not None:
        total_dz += dz
    if dz_norm is not None:
        zn = z / znorm_len
        total_dz += (dz_norm - zn * float(zn @ dz_norm)) / znorm_len
    dhid = params["proj_w2"].T @ total_dz
    dpre = dhid * relu_mask
    grads = {
        "proj_w2": np.outer(total_dz, hid),
        "proj_b2": total_dz,
        "proj_w1": np.outer(dpre, r),
        "proj_b1": dpre,
    }
    dr = params["proj_w1"].T @ dpre
    return grads, dr


# Classifier -------------------------------------------------------------

def classify(params: dict, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (params["cls_w"].shape[1],):
        raise DimensionError(f"classifier input {z.shape} != ({params['cls_w'].shape[1]},)")
    return params["cls_w"] @ z + params["cls_b"]


def classify_backward(params: dict, z: np.ndarray, dlogits: np.ndarray):
    grads = {"cls_w": np.outer(dlogits, z), "cls_b": dlogits.copy()}
    dzin = params["cls_w"].T @ dlogits
    return grads, dzin


def predict_label(logits: np.ndarray) -> int:
    # argmax with lowest-id tie break
    return int(np.argmax(logits))


# Composition ------------------------------------------------------------

def embed_regions(params: dict, config: EncoderConfig,
                  sample: AnnotatedImage) -> list[RegionEmbedding]:
    """encoder -> ROI pool -> projection for every box, in ascending label order."""
    fmap, _ = encoder_forward(params, config, sample.pixels[None, :, :])
    out = []
    for box in sorted(sample.boxes, key=lambda b: b.label):
        pooled = roi_pool(fmap, box)
        z, z_norm, _ = project(params, pooled)
        out.append(RegionEmbedding(image_id=sample.id, label=box.label,
                                   z=z, z_norm=z_norm))
    return out
