"""Dense-array layers and the heat-map CNN, with hand-written backward passes.

Arrays are numpy ``ndarray`` objects laid out NCHW. Every layer function
returns its output together with a cache consumed by the matching
``*_backward`` function. Single samples (``C x H x W``) are accepted and
treated as a batch of one.

Network layout (default sizes)::

    1x6x300 -conv 64@2x20-> 64x6x300 -pool 1x20/5-> 64x6x60
            -conv 64@2x10-> 64x6x60  -pool 1x4/2->  64x6x30
            -flatten-> 11520 -fc-> 1024 -fc-> 512 -fc-> 2 -softmax

ReLU follows both convolutions and both hidden dense layers; dropout
follows the two hidden dense activations.
"""

from __future__ import annotations

import dataclasses
import enum
import io
import json
import math
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, ShapeError, TraceError
from .features import NormalizationStats


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


def _batched(x, rank=4):
    x = np.asarray(x)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) padding; the odd cell goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


# convolution

def _im2col_nhwc(xp, kh, kw, h, w):
    """Rows are output pixels, columns run over (kh, kw, channel)."""
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, :h, :w]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * c)


def _correlate(x_nhwc, kmat, kh, kw, pads):
    """Stride-1 correlation of an NHWC array with a ``(kh*kw*c) x c_out`` kernel matrix."""
    (pt, pb), (pl, pr) = pads
    n, h, w, _ = x_nhwc.shape
    xp = np.pad(x_nhwc, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    y = _im2col_nhwc(xp, kh, kw, h, w) @ kmat
    return y.reshape(n, h, w, -1)


def conv2d(x, kernels, bias):
    """Stride-1 cross-correlation with zero same-padding.

    ``x`` is ``N x C_in x H x W`` (or unbatched), ``kernels`` is
    ``C_out x C_in x kh x kw``. Output has the input's spatial size; for
    even kernel extents the extra padding row/column is at the bottom/right.
    """
    x, squeezed = _batched(x)
    kernels = np.asarray(kernels)
    bias = np.asarray(bias)
    if kernels.ndim != 4 or kernels.shape[1] != x.shape[1] or bias.shape != (kernels.shape[0],):
        raise ShapeError(f"conv2d: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    n, c, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    _, pt, pb = same_padding(h, kh, 1)
    _, pl, pr = same_padding(w, kw, 1)
    x_nhwc = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    kmat = kernels.transpose(2, 3, 1, 0).reshape(kh * kw * c, c_out)
    y = _correlate(x_nhwc, kmat, kh, kw, ((pt, pb), (pl, pr))) + bias
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    cache = (x_nhwc, (pt, pb, pl, pr), kernels, squeezed)
    return (y[0] if squeezed else y), cache


def conv2d_backward(cache, dy, input_grad: bool = True):
    """Gradients ``(dx, dkernels, dbias)`` for :func:`conv2d`.

    The input gradient is the correlation of the upstream gradient with the
    spatially flipped, channel-transposed kernels. With ``input_grad=False``
    it is skipped and ``dx`` is None.
    """
    x_nhwc, (pt, pb, pl, pr), kernels, squeezed = cache
    dy = np.asarray(dy)
    if squeezed and dy.ndim == 3:
        dy = dy[None]
    n, h, w, c = x_nhwc.shape
    c_out, _, kh, kw = kernels.shape
    if dy.shape != (n, c_out, h, w):
        raise ShapeError(f"conv2d_backward: upstream {dy.shape}, expected {(n, c_out, h, w)}")
    dy_nhwc = np.ascontiguousarray(dy.transpose(0, 2, 3, 1))
    dbias = dy_nhwc.sum(axis=(0, 1, 2))

    xp = np.pad(x_nhwc, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _im2col_nhwc(xp, kh, kw, h, w)
    dk = dy_nhwc.reshape(-1, c_out).T @ cols
    dkernels = dk.reshape(c_out, kh, kw, c).transpose(0, 3, 1, 2)
    del cols
    if not input_grad:
        return None, np.ascontiguousarray(dkernels), dbias

    flipped = kernels[:, :, ::-1, ::-1]
    kmat = flipped.transpose(2, 3, 0, 1).reshape(kh * kw * c_out, c)
    dx = _correlate(dy_nhwc, kmat, kh, kw, ((kh - 1 - pt, pt), (kw - 1 - pl, pl)))
    dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
    return (dx[0] if squeezed else dx), np.ascontiguousarray(dkernels), dbias


# pooling

def maxpool2d(x, pool, stride):
    """Max pooling with same-padding; padded cells hold ``-inf``.

    Output extent per axis is ``ceil(size / stride)``. The argmax of every
    window is kept for the backward pass, ties going to the lowest index.
    """
    x, squeezed = _batched(x)
    ph, pw = pool
    sh, sw = stride
    if min(ph, pw, sh, sw) < 1:
        raise ShapeError("pool and stride extents must be positive")
    n, c, h, w = x.shape
    ho, pt, pb = same_padding(h, ph, sh)
    wo, pl, pr = same_padding(w, pw, sw)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    best = None
    arg = np.zeros((n, c, ho, wo), dtype=np.intp)
    for i in range(ph):
        for j in range(pw):
            cand = xp[:, :, i:i + (ho - 1) * sh + 1:sh, j:j + (wo - 1) * sw + 1:sw]
            if best is None:
                best = cand.copy()
                continue
            better = cand > best  # strict: earlier offsets win ties
            np.copyto(best, cand, where=better)
            np.copyto(arg, i * pw + j, where=better)
    # flat index of each argmax in the padded plane
    rows = np.arange(ho)[:, None] * sh + arg // pw
    cols = np.arange(wo)[None, :] * sw + arg % pw
    plane = rows * xp.shape[3] + cols
    cache = (x.shape, xp.shape, (pt, pl), plane, squeezed)
    return (best[0] if squeezed else best), cache


def maxpool2d_backward(cache, dy):
    x_shape, xp_shape, (pt, pl), plane, squeezed = cache
    dy = np.asarray(dy)
    if squeezed and dy.ndim == 3:
        dy = dy[None]
    if dy.shape != plane.shape:
        raise ShapeError(f"maxpool2d_backward: upstream {dy.shape}, expected {plane.shape}")
    n, c, hp, wp = xp_shape
    offsets = (np.arange(n * c) * (hp * wp)).reshape(n, c, 1, 1)
    dxp = np.bincount((plane + offsets).ravel(), weights=dy.ravel().astype(np.float64),
                      minlength=n * c * hp * wp)
    dxp = dxp.reshape(xp_shape).astype(dy.dtype, copy=False)
    h, w = x_shape[2], x_shape[3]
    dx = np.ascontiguousarray(dxp[:, :, pt:pt + h, pl:pl + w])
    return dx[0] if squeezed else dx


# dense / activations

def dense(x, weights, bias):
    """``y = x W + b`` with ``W`` stored as ``in x out``."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.shape[-1] != weights.shape[0] or np.shape(bias) != (weights.shape[1],):
        raise ShapeError(f"dense: input {x.shape}, weights {weights.shape}, bias {np.shape(bias)}")
    return x @ weights + bias, (x, weights)


def dense_backward(cache, dy):
    x, weights = cache
    dy = np.asarray(dy)
    if x.ndim == 1:
        dw = np.outer(x, dy)
        db = dy
    else:
        dw = x.T @ dy
        db = dy.sum(axis=0)
    return dy @ weights.T, dw, db


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, 0), x > 0


def relu_backward(mask, dy):
    return np.where(mask, dy, 0).astype(np.asarray(dy).dtype, copy=False)


def dropout(x, keep_prob: float, mode: Mode, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, mask)``; mask is ``None`` in eval mode."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in (0, 1]")
    x = np.asarray(x)
    if mode is Mode.EVAL or keep_prob == 1.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    return x * mask, mask


def dropout_backward(mask, dy):
    return dy if mask is None else dy * mask


def softmax(logits):
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# network

@dataclasses.dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, int, int] = (1, 6, 300)
    conv1: tuple[int, int, int] = (64, 2, 20)  # channels, kh, kw
    pool1: tuple[int, int, int, int] = (1, 20, 1, 5)  # ph, pw, sh, sw
    conv2: tuple[int, int, int] = (64, 2, 10)
    pool2: tuple[int, int, int, int] = (1, 4, 1, 2)
    hidden: tuple[int, int] = (1024, 512)
    classes: int = 2

    def stage_shapes(self) -> list[tuple[int, ...]]:
        """Activation shapes from input to logits."""
        c, h, w = self.input_shape
        shapes = [(c, h, w)]
        c = self.conv1[0]
        shapes.append((c, h, w))
        h, w = same_padding(h, self.pool1[0], self.pool1[2])[0], same_padding(w, self.pool1[1], self.pool1[3])[0]
        shapes.append((c, h, w))
        c = self.conv2[0]
        shapes.append((c, h, w))
        h, w = same_padding(h, self.pool2[0], self.pool2[2])[0], same_padding(w, self.pool2[1], self.pool2[3])[0]
        shapes.append((c, h, w))
        shapes.append((c * h * w,))
        shapes.extend((n,) for n in self.hidden)
        shapes.append((self.classes,))
        return shapes

    @property
    def flat_size(self) -> int:
        return self.stage_shapes()[5][0]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c_in = self.input_shape[0]
        c1, kh1, kw1 = self.conv1
        c2, kh2, kw2 = self.conv2
        h1, h2 = self.hidden
        return {
            "conv1.w": (c1, c_in, kh1, kw1), "conv1.b": (c1,),
            "conv2.w": (c2, c1, kh2, kw2), "conv2.b": (c2,),
            "fc1.w": (self.flat_size, h1), "fc1.b": (h1,),
            "fc2.w": (h1, h2), "fc2.b": (h2,),
            "out.w": (h2, self.classes), "out.b": (self.classes,),
        }

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


PARAM_NAMES = ("conv1.w", "conv1.b", "conv2.w", "conv2.b",
               "fc1.w", "fc1.b", "fc2.w", "fc2.b", "out.w", "out.b")
REGULARIZED = ("fc1.w", "fc1.b", "fc2.w", "fc2.b", "out.w", "out.b")


@dataclasses.dataclass
class NetworkParams:
    tensors: dict[str, np.ndarray]
    arch: Architecture = Architecture()
    norm_stats: NormalizationStats | None = None
    hyper: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if set(self.tensors) != set(expected):
            raise ShapeError(f"parameter names {sorted(self.tensors)} != {sorted(expected)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["fc1.w"].dtype

    def copy(self) -> "NetworkParams":
        return dataclasses.replace(
            self, tensors={k: v.copy() for k, v in self.tensors.items()}, hyper=dict(self.hyper))


def init_params(arch: Architecture = Architecture(), seed: int = 0, dtype=np.float32) -> NetworkParams:
    """He-uniform weights (limit ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            limit = math.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return NetworkParams(tensors=tensors, arch=arch)


def zero_params(arch: Architecture = Architecture(), dtype=np.float32) -> NetworkParams:
    return NetworkParams({n: np.zeros(s, dtype=dtype) for n, s in arch.param_shapes().items()}, arch=arch)


@dataclasses.dataclass
class ForwardTrace:
    mode: Mode
    caches: dict
    masks: dict
    shapes: list
    logits: np.ndarray
    squeezed: bool


def network_forward(x, params: NetworkParams, mode: Mode = Mode.EVAL,
                    rng: np.random.Generator | None = None, keep_prob: float | None = None):
    """Run the CNN on standardised heat maps.

    ``x`` is ``N x C x H x W``, ``C x H x W`` or ``H x W`` (single channel).
    Returns ``(probabilities, trace)``; probabilities are ``N x classes``
    (or a single row for unbatched input).
    """
    arch = params.arch
    values = getattr(x, "values", x)
    x = np.asarray(values, dtype=params.dtype)
    squeezed = False
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[None]
        squeezed = True
    if x.ndim != 4 or x.shape[1:] != arch.input_shape:
        raise ShapeError(f"network input shape {x.shape[1:] if x.ndim == 4 else x.shape}, "
                         f"expected {arch.input_shape}")
    if keep_prob is None:
        keep_prob = float(params.hyper.get("keep_prob", 1.0))
    p = params.tensors
    caches, masks, shapes = {}, {}, [x.shape[1:]]

    h, caches["conv1"] = conv2d(x, p["conv1.w"], p["conv1.b"])
    h, caches["relu1"] = relu(h)
    shapes.append(h.shape[1:])
    h, caches["pool1"] = maxpool2d(h, arch.pool1[:2], arch.pool1[2:])
    shapes.append(h.shape[1:])
    h, caches["conv2"] = conv2d(h, p["conv2.w"], p["conv2.b"])
    h, caches["relu2"] = relu(h)
    shapes.append(h.shape[1:])
    h, caches["pool2"] = maxpool2d(h, arch.pool2[:2], arch.pool2[2:])
    shapes.append(h.shape[1:])
    caches["flatten"] = h.shape
    h = h.reshape(h.shape[0], -1)
    shapes.append(h.shape[1:])
    h, caches["fc1"] = dense(h, p["fc1.w"], p["fc1.b"])
    h, caches["relu3"] = relu(h)
    h, masks["drop1"] = dropout(h, keep_prob, mode, rng)
    shapes.append(h.shape[1:])
    h, caches["fc2"] = dense(h, p["fc2.w"], p["fc2.b"])
    h, caches["relu4"] = relu(h)
    h, masks["drop2"] = dropout(h, keep_prob, mode, rng)
    shapes.append(h.shape[1:])
    logits, caches["out"] = dense(h, p["out.w"], p["out.b"])
    shapes.append(logits.shape[1:])
    probs = softmax(logits)
    if mode is Mode.EVAL:
        masks = {}
    trace = ForwardTrace(mode=mode, caches=caches, masks=masks, shapes=shapes,
                         logits=logits, squeezed=squeezed)
    return (probs[0] if squeezed else probs), trace


def network_backward(trace: ForwardTrace, dlogits) -> dict[str, np.ndarray]:
    """Parameter gradients given ``dLoss/dlogits`` from a train-mode trace."""
    if trace.mode is not Mode.TRAIN:
        raise TraceError("backward pass needs a train-mode forward trace")
    c = trace.caches
    g = {}
    d = np.asarray(dlogits, dtype=trace.logits.dtype)
    if trace.squeezed and d.ndim == 1:
        d = d[None]
    if d.shape != trace.logits.shape:
        raise ShapeError(f"logit gradient shape {d.shape}, expected {trace.logits.shape}")
    d, g["out.w"], g["out.b"] = dense_backward(c["out"], d)
    d = dropout_backward(trace.masks.get("drop2"), d)
    d = relu_backward(c["relu4"], d)
    d, g["fc2.w"], g["fc2.b"] = dense_backward(c["fc2"], d)
    d = dropout_backward(trace.masks.get("drop1"), d)
    d = relu_backward(c["relu3"], d)
    d, g["fc1.w"], g["fc1.b"] = dense_backward(c["fc1"], d)
    d = d.reshape(c["flatten"])
    d = maxpool2d_backward(c["pool2"], d)
    d = relu_backward(c["relu2"], d)
    d, g["conv2.w"], g["conv2.b"] = conv2d_backward(c["conv2"], d)
    d = maxpool2d_backward(c["pool1"], d)
    d = relu_backward(c["relu1"], d)
    _, g["conv1.w"], g["conv1.b"] = conv2d_backward(c["conv1"], d, input_grad=False)
    return g


# checkpoints

_CKPT_MAGIC = b"AUSC"
_CKPT_VERSION = 1


def checkpoint_bytes(params: NetworkParams) -> bytes:
    """Serialise parameters, normalisation statistics and hyper-parameters.

    Layout: magic ``AUSC``, u16 version, u16 tensor count, then per tensor
    u16 name length, name, u8 rank, u32 extents, float32 data; then a u8
    flag and (if set) u32 rows plus float64 mean and std; finally a u32
    length-prefixed UTF-8 JSON block with the hyper-parameters and
    architecture. All integers little-endian.
    """
    buf = io.BytesIO()
    buf.write(struct.pack("<4sHH", _CKPT_MAGIC, _CKPT_VERSION, len(PARAM_NAMES)))
    for name in PARAM_NAMES:
        t = params.tensors[name]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    stats = params.norm_stats
    if stats is None:
        buf.write(b"\x00")
    else:
        mean = np.asarray(stats.mean, dtype="<f8")
        std = np.asarray(stats.std, dtype="<f8")
        buf.write(b"\x01" + struct.pack("<I", len(mean)) + mean.tobytes() + std.tobytes())
    meta = json.dumps({"hyper": params.hyper, "arch": params.arch.to_dict()}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)) + meta)
    return buf.getvalue()


def params_from_bytes(data: bytes) -> NetworkParams:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        out = view[pos:pos + n]
        pos += n
        return bytes(out)

    magic, version, count = struct.unpack("<4sHH", take(8))
    if magic != _CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    stats = None
    if take(1) == b"\x01":
        (rows,) = struct.unpack("<I", take(4))
        mean = np.frombuffer(take(8 * rows), dtype="<f8").copy()
        std = np.frombuffer(take(8 * rows), dtype="<f8").copy()
        stats = NormalizationStats(mean=mean, std=std)
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return NetworkParams(tensors=tensors, arch=Architecture.from_dict(meta["arch"]),
                         norm_stats=stats, hyper=meta["hyper"])


def save_checkpoint(params: NetworkParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> NetworkParams:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return params_from_bytes(path.read_bytes())
