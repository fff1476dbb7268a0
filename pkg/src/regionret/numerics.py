"""Dense float64 kernels, the Adam optimizer, and a finite-difference oracle.

Everything here is a pure function of its inputs (except ``adam_step``,
which mutates the optimizer state it is handed).  All computation is in
64-bit floats with fixed, reproducible reduction orders: identical inputs
give bitwise-identical outputs on every run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVectorError, DimensionError, ParameterError

NORM_EPS = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the stream is stable across platforms."""
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def conv2d(inp: np.ndarray, kernels: np.ndarray, stride: int = 1, pad: int = 1) -> np.ndarray:
    """3x3 cross-correlation (no kernel flip) with zero padding."""
    out, _ = conv2d_forward(inp, kernels, stride, pad)
    return out


def _conv_out_size(h: int, w: int, stride: int, pad: int) -> tuple[int, int]:
    ho = (h + 2 * pad - 3) // stride + 1
    wo = (w + 2 * pad - 3) // stride + 1
    return ho, wo


def im2col3(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    """Unfold 3x3 patches of a padded (C, Hp, Wp) input into (C*9, ho*wo)."""
    c = xp.shape[0]
    cols = np.empty((c, 3, 3, ho, wo), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            cols[:, di, dj] = xp[:, di:di + stride * (ho - 1) + 1:stride,
                                 dj:dj + stride * (wo - 1) + 1:stride]
    return cols.reshape(c * 9, ho * wo)


def conv2d_forward(inp, kernels, stride=1, pad=1):
    """Returns (output, cols); cols are kept so the backward pass can reuse them."""
    inp = np.asarray(inp, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if inp.ndim != 3 or kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects (C,H,W) and (F,C,3,3), got {inp.shape}, {kernels.shape}")
    if kernels.shape[1] != inp.shape[0]:
        raise DimensionError(f"channel mismatch: input {inp.shape[0]}, kernels {kernels.shape[1]}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    c, h, w = inp.shape
    if h + 2 * pad < 3 or w + 2 * pad < 3:
        raise DimensionError(f"kernel larger than padded input ({h}x{w}, pad={pad})")
    ho, wo = _conv_out_size(h, w, stride, pad)
    xp = np.pad(inp, ((0, 0), (pad, pad), (pad, pad)))
    cols = im2col3(xp, stride, ho, wo)
    f = kernels.shape[0]
    out = (kernels.reshape(f, c * 9) @ cols).reshape(f, ho, wo)
    return out, cols


def conv2d_backward(grad_out, cols, kernels, input_shape, stride=1, pad=1):
    """Gradients of conv2d_forward w.r.t. kernels and input."""
    c, h, w = input_shape
    f = kernels.shape[0]
    ho, wo = grad_out.shape[1:]
    g = grad_out.reshape(f, ho * wo)
    grad_k = (g @ cols.T).reshape(f, c, 3, 3)
    dcols = (kernels.reshape(f, c * 9).T @ g).reshape(c, 3, 3, ho, wo)
    gxp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            gxp[:, di:di + stride * (ho - 1) + 1:stride,
                dj:dj + stride * (wo - 1) + 1:stride] += dcols[:, di, dj]
    grad_in = gxp[:, pad:pad + h, pad:pad + w]
    return grad_k, grad_in


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax; output sums to 1 within 1e-12."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n <= NORM_EPS:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n}")
    return v / n


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateVectorError("cosine similarity of a (near-)zero vector")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


@dataclass
class AdamState:
    """Moment buffers for a named collection of parameter tensors."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update over every named tensor, in place.

    Weight decay is coupled: g <- g + wd * theta before the moment updates.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max-norm relative error between two gradients, guarded against zero."""
    num = float(np.max(np.abs(analytic - numeric)))
    den = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return num / den
