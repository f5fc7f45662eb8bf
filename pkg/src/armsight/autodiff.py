"""Minimal float64 tensor layers with hand-derived backward passes.

Conventions:
  - feature maps are channels-last (B, H, W, C) float64 arrays
  - conv kernels are (kh, kw, in_ch, out_ch); biases are (out_ch,)
  - every `*_forward` returns (output, cache); the matching `*_backward`
    takes the upstream gradient plus that cache and is exact for the forward
    definition (finite-difference checked in the test suite)

All math stays in 64-bit so training runs are bit-reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

MOMENTUM = 0.9
SIGMOID_CLAMP = 1e-7
_CKPT_MAGIC = b"MOCNN-CKPT v1\n"


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested layer."""


class EpochOutOfRange(ValueError):
    """Epoch index outside the schedule length."""


class FormatError(ValueError):
    """Checkpoint file is corrupt or truncated."""


def assert_all_finite(x: np.ndarray, where: str = "tensor") -> None:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {where}")


# Per-layer finite checks are expensive on big activations; step-level checks
# always run in the trainer, and this flag turns on the paranoid version.
DEBUG_FINITE = bool(os.environ.get("ARMSIGHT_DEBUG_FINITE"))


def _debug_check(x: np.ndarray, where: str) -> None:
    if DEBUG_FINITE:
        assert_all_finite(x, where)


@dataclass
class Parameter:
    """A trainable tensor with its gradient and momentum buffers.

    When `trainable` is False the optimizer leaves `value` bit-identical;
    gradients may still be computed into `grad`.
    """

    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(default=None, repr=False)
    velocity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def uniform_init(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Weights drawn from U(-sqrt(1/fan_in), +sqrt(1/fan_in))."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Convolution. im2col built channels-last with k*k contiguous slice copies,
# then a single GEMM; the column matrix stays in the cache for the backward
# GEMMs. dx is only assembled when something below still needs gradients.
# ---------------------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   stride: int = 1, pad: int = 0):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d wants 4-d input/kernels, got {x.shape} and {w.shape}")
    B, H, W, C = x.shape
    kh, kw, ci, co = w.shape
    if ci != C:
        raise ShapeMismatch(f"kernel expects {ci} input channels, image has {C}")
    if b.shape != (co,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({co},)")
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {H}x{W}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(B * oh * ow, C)
    else:
        cols = np.empty((B, oh, ow, kh, kw, C))
        for u in range(kh):
            for v in range(kw):
                cols[:, :, :, u, v, :] = xp[:, u:u + stride * (oh - 1) + 1:stride,
                                            v:v + stride * (ow - 1) + 1:stride, :]
        cols = cols.reshape(B * oh * ow, kh * kw * C)
    out = cols @ w.reshape(kh * kw * ci, co)
    out += b
    out = out.reshape(B, oh, ow, co)
    _debug_check(out, "conv2d output")
    return out, (cols, x.shape, w, stride, pad)


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    cols, xshape, w, stride, pad = cache
    kh, kw, ci, co = w.shape
    B, H, W, C = xshape
    oh, ow = dout.shape[1], dout.shape[2]
    df = dout.reshape(-1, co)
    dw = (cols.T @ df).reshape(w.shape)
    db = df.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = df @ w.reshape(kh * kw * ci, co).T
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return dcols.reshape(xshape), dw, db
    dcols = dcols.reshape(B, oh, ow, kh, kw, ci)
    dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, C))
    for u in range(kh):
        for v in range(kw):
            dxp[:, u:u + stride * (oh - 1) + 1:stride,
                v:v + stride * (ow - 1) + 1:stride, :] += dcols[:, :, :, u, v, :]
    dx = dxp[:, pad:pad + H, pad:pad + W, :] if pad else dxp
    return dx, dw, db


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2, ceil mode: odd edges are padded with -inf so the
# output is ceil(H/2) x ceil(W/2). Ties route the gradient to the first
# maximum in window order.
# ---------------------------------------------------------------------------

def maxpool2_forward(x: np.ndarray):
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2 wants (B,H,W,C), got {x.shape}")
    B, H, W, C = x.shape
    oh, ow = (H + 1) // 2, (W + 1) // 2
    if H % 2 or W % 2:
        xq = np.full((B, 2 * oh, 2 * ow, C), -np.inf)
        xq[:, :H, :W, :] = x
    else:
        xq = x
    windows = xq.reshape(B, oh, 2, ow, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, oh, ow, C, 4)
    idx = windows.argmax(axis=-1).astype(np.int8)
    out = windows.max(axis=-1)
    return out, (x.shape, idx)


def maxpool2_backward(dout: np.ndarray, cache):
    (B, H, W, C), idx = cache
    oh, ow = dout.shape[1], dout.shape[2]
    dwin = np.zeros((B, oh, ow, C, 4))
    np.put_along_axis(dwin, idx[..., None].astype(np.intp), dout[..., None], axis=-1)
    dxq = dwin.reshape(B, oh, ow, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * oh, 2 * ow, C)
    return np.ascontiguousarray(dxq[:, :H, :W, :])


def relu_forward(x: np.ndarray):
    out = np.maximum(x, 0.0)
    return out, out


def relu_backward(dout: np.ndarray, cache):
    return dout * (cache > 0.0)


def fully_connected_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"fc input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeMismatch(f"fc bias {b.shape} != ({w.shape[1]},)")
    out = x @ w
    out += b
    _debug_check(out, "fc output")
    return out, (x, w)


def fully_connected_backward(dout: np.ndarray, cache, need_dx: bool = True):
    x, w = cache
    dw = x.T @ dout
    db = dout.sum(axis=0)
    dx = dout @ w.T if need_dx else None
    return dx, dw, db


def upsample2_forward(x: np.ndarray):
    """Nearest-neighbor 2x upsampling along H and W."""
    if x.ndim != 4:
        raise ShapeMismatch(f"upsample2 wants (B,H,W,C), got {x.shape}")
    B, H, W, C = x.shape
    out = np.broadcast_to(x[:, :, None, :, None, :], (B, H, 2, W, 2, C)).reshape(B, 2 * H, 2 * W, C)
    return out, x.shape


def upsample2_backward(dout: np.ndarray, cache):
    B, H, W, C = cache
    return dout.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4))


def crop2d_forward(x: np.ndarray, out_h: int, out_w: int):
    """Keep the top-left out_h x out_w window (undoes ceil-mode growth)."""
    if x.shape[1] < out_h or x.shape[2] < out_w:
        raise ShapeMismatch(f"cannot crop {x.shape} to {out_h}x{out_w}")
    return np.ascontiguousarray(x[:, :out_h, :out_w, :]), x.shape


def crop2d_backward(dout: np.ndarray, cache):
    dx = np.zeros(cache)
    dx[:, :dout.shape[1], :dout.shape[2], :] = dout
    return dx


def sigmoid_forward(x: np.ndarray, clamp: float = SIGMOID_CLAMP):
    """Logistic sigmoid with outputs clamped into [clamp, 1-clamp].

    The clamp keeps downstream logs finite; its derivative is zero where it
    is active.
    """
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = np.clip(s, clamp, 1.0 - clamp)
    return out, (s, clamp)


def sigmoid_backward(dout: np.ndarray, cache):
    s, clamp = cache
    inside = (s > clamp) & (s < 1.0 - clamp)
    return dout * s * (1.0 - s) * inside


def softmax_forward(x: np.ndarray):
    """Row-wise softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_backward(dout: np.ndarray, cache):
    p = cache
    return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

def sgd_step(params, lr: float) -> None:
    """SGD with momentum 0.9 over trainable parameters; frozen ones untouched."""
    for p in params:
        if not p.trainable:
            continue
        p.velocity *= MOMENTUM
        p.velocity += p.grad
        p.value -= lr * p.velocity


@dataclass(frozen=True)
class LrSchedule:
    """Geometric interpolation from lr_start at epoch 0 to lr_end at the last epoch."""

    total_epochs: int
    lr_start: float = 1e-3
    lr_end: float = 1e-6

    def __post_init__(self):
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        if self.total_epochs < 1:
            raise ValueError("schedule needs at least one epoch")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if schedule.total_epochs == 1:
        return schedule.lr_start
    frac = epoch / (schedule.total_epochs - 1)
    return float(schedule.lr_start * (schedule.lr_end / schedule.lr_start) ** frac)


# ---------------------------------------------------------------------------
# Checkpoints: magic line, then per tensor one ASCII header line
# "<name> <trainable> <ndim> <dims...>" followed by raw little-endian float64
# data. Written atomically (temp file + rename) so failures never leave a
# half-written file at the target path.
# ---------------------------------------------------------------------------

def save_checkpoint(params, path) -> None:
    path = os.fspath(path)
    blob = bytearray(_CKPT_MAGIC)
    for p in params:
        dims = " ".join(str(d) for d in p.value.shape)
        header = f"{p.name} {int(p.trainable)} {p.value.ndim}"
        blob += (header + (" " + dims if dims else "") + "\n").encode("ascii")
        blob += np.ascontiguousarray(p.value, dtype="<f8").tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    data = open(os.fspath(path), "rb").read()
    if not data.startswith(_CKPT_MAGIC):
        raise FormatError("bad checkpoint magic")
    pos = len(_CKPT_MAGIC)
    params = []
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError("truncated tensor header")
        fields = data[pos:nl].decode("ascii", errors="replace").split()
        pos = nl + 1
        if len(fields) < 3:
            raise FormatError(f"malformed tensor header: {fields}")
        name, trainable, ndim = fields[0], fields[1], int(fields[2])
        if len(fields) != 3 + ndim:
            raise FormatError(f"header dim count mismatch: {fields}")
        shape = tuple(int(d) for d in fields[3:])
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        if pos + nbytes > len(data):
            raise FormatError(f"truncated data for tensor {name!r}")
        value = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
        params.append(Parameter(name, value, trainable=bool(int(trainable))))
    return params
