"""Small dense-tensor network engine with exact reverse-mode gradients.

Tensors are plain numpy arrays laid out as ``(batch, channels, *spatial)``.
All trainable parameters of a model live in one flat vector ``theta``; each
layer reads its weights through views into that vector, and ``backward``
writes into a flat gradient vector of the same layout.  This is what the
optimizer, the SI bookkeeping and the checkpoint format operate on.

A model is a list of :class:`LayerSpec`.  Layers tagged ``low-res`` form a
parallel pathway that sees the same input as the normal-resolution layers;
the two pathways are joined by a ``concat`` layer, after which layers run
sequentially up to the terminal sigmoid.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LAYER_KINDS = (
    "dense",
    "conv2d",
    "conv3d",
    "relu",
    "sigmoid",
    "downsample-avg",
    "upsample-nearest",
    "concat",
)
PATHWAYS = ("normal-res", "low-res")


class NumericalError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a model.

    ``dims`` depends on ``kind``: ``(in, out)`` for dense, ``(in, out, k)``
    for convolutions (odd cubic kernel, zero "same" padding), ``(factor,)``
    for resampling layers and ``()`` for activations and concat.
    """

    kind: str
    dims: tuple[int, ...] = ()
    pathway: str = "normal-res"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.pathway not in PATHWAYS:
            raise ShapeError(f"unknown pathway {self.pathway!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        expected = {"dense": 2, "conv2d": 3, "conv3d": 3, "downsample-avg": 1,
                    "upsample-nearest": 1}.get(self.kind, 0)
        if len(self.dims) != expected:
            raise ShapeError(f"{self.kind} takes {expected} dims, got {self.dims}")
        if any(d < 1 for d in self.dims):
            raise ShapeError(f"{self.kind} dims must be positive: {self.dims}")
        if self.kind in ("conv2d", "conv3d") and self.dims[2] % 2 == 0:
            raise ShapeError("convolution kernels must have odd size")

    @property
    def spatial_ndim(self) -> int | None:
        return {"conv2d": 2, "conv3d": 3}.get(self.kind)

    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "dense":
            n_in, n_out = self.dims
            return [(n_out, n_in), (n_out,)]
        if self.kind in ("conv2d", "conv3d"):
            n_in, n_out, k = self.dims
            return [(n_out, n_in) + (k,) * self.spatial_ndim, (n_out,)]
        return []

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes())


def _split_layers(layers: Sequence[LayerSpec]):
    """Layer indices of (normal-res branch, low-res branch, post-concat tail)."""
    kinds = [l.kind for l in layers]
    if kinds.count("concat") > 1:
        raise ShapeError("at most one concat layer is supported")
    if "concat" not in kinds:
        if any(l.pathway == "low-res" for l in layers):
            raise ShapeError("low-res layers need a concat layer to join them")
        return list(range(len(layers))), [], None
    at = kinds.index("concat")
    tail = list(range(at + 1, len(layers)))
    if any(layers[i].pathway == "low-res" for i in tail):
        raise ShapeError("low-res layers must come before the concat layer")
    nr = [i for i in range(at) if layers[i].pathway == "normal-res"]
    lr = [i for i in range(at) if layers[i].pathway == "low-res"]
    return nr, lr, tail


def context_margin(layers: Sequence[LayerSpec]) -> tuple[int, int]:
    """(margin, grid) for whole-volume inference.

    ``margin`` is the receptive-field half-width in input voxels, ``grid``
    the product of the resampling factors; a padded input whose extent is a
    multiple of ``grid`` avoids partial low-res blocks.
    """
    nr, lr, tail = _split_layers(layers)
    half = {"normal-res": 0, "low-res": 0}
    scale, grid = 1, 1
    for i in nr + lr + (tail or []):
        l = layers[i]
        if l.kind == "downsample-avg":
            scale *= l.dims[0]
            grid = max(grid, scale)
            half[l.pathway] += scale
        elif l.kind == "upsample-nearest":
            scale = max(1, scale // l.dims[0])
        elif l.kind in ("conv2d", "conv3d"):
            w = (l.dims[2] - 1) // 2 * scale
            if tail is not None and i in tail:
                half["normal-res"] += w
                half["low-res"] += w
            else:
                half[l.pathway] += w
    return max(half.values()), grid


def _channels_through(layers, idx, c):
    for l in (layers[i] for i in idx):
        if l.kind in ("dense", "conv2d", "conv3d"):
            if l.dims[0] != c:
                raise ShapeError(f"{l.kind} expects {l.dims[0]} channels, gets {c}")
            c = l.dims[1]
    return c


def validate_layers(layers: Sequence[LayerSpec], in_channels: int = 1) -> int:
    """Check that layer shapes compose; returns the output channel count."""
    if not layers:
        raise ShapeError("empty model")
    if [l.kind for l in layers].count("sigmoid") != 1 or layers[-1].kind != "sigmoid":
        raise ShapeError("a model needs exactly one sigmoid, as its last layer")
    nr, lr, tail = _split_layers(layers)
    c = _channels_through(layers, nr, in_channels)
    if tail is not None:
        c = c + _channels_through(layers, lr, in_channels)
        c = _channels_through(layers, tail, c)
    nd = {l.spatial_ndim for l in layers if l.spatial_ndim}
    if len(nd) > 1:
        raise ShapeError("cannot mix conv2d and conv3d layers")
    return c


# ---------------------------------------------------------------------------
# layer primitives


def _im2col(x, k):
    """(B, C, *S) -> (B, C * prod(k), prod(S)) with zero "same" padding."""
    b, c, sp = x.shape[0], x.shape[1], x.shape[2:]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(kk // 2, kk // 2) for kk in k])
    cols = np.empty((b, c) + tuple(k) + tuple(sp), x.dtype)
    for off in itertools.product(*(range(kk) for kk in k)):
        src = (slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(off, sp))
        cols[(slice(None), slice(None)) + off] = xp[src]
    return cols.reshape(b, c * int(np.prod(k)), int(np.prod(sp)))


def _conv_forward(x, w, b):
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"conv expects {nd} spatial dims, input has shape {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv expects {w.shape[1]} channels, got {x.shape[1]}")
    cols = _im2col(x, w.shape[2:])
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    out += b.reshape(1, -1, 1)
    return out.reshape((x.shape[0], w.shape[0]) + x.shape[2:]), cols


def _conv_backward(grad, cols, w):
    nd = w.ndim - 2
    g2 = grad.reshape(grad.shape[0], grad.shape[1], -1)
    dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = g2.sum(axis=(0, 2))
    w_t = np.ascontiguousarray(np.flip(w, axis=tuple(range(2, 2 + nd))).swapaxes(0, 1))
    dx, _ = _conv_forward(grad, w_t, np.zeros(w.shape[1], grad.dtype))
    return dx, dw, db


def _dense_forward(x, w, b):
    # per-voxel channel mixing; plain (B, C) inputs are the zero-spatial case
    out = np.tensordot(w, x, axes=([1], [1]))
    out = np.moveaxis(out, 0, 1)
    out += b.reshape((1, -1) + (1,) * (x.ndim - 2))
    return out


def _dense_backward(grad, x, w):
    sp = [0] + list(range(2, x.ndim))
    dw = np.tensordot(grad, x, axes=(sp, sp))
    db = grad.sum(axis=tuple(sp))
    dx = np.moveaxis(np.tensordot(w, grad, axes=([0], [1])), 0, 1)
    return dx, dw, db


def _block_view(x, f):
    """Zero-pad spatial dims to a multiple of ``f`` and expose (n, f) blocks."""
    sp = x.shape[2:]
    padded = [-(-s // f) * f for s in sp]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(0, p - s) for p, s in zip(padded, sp)])
    shape = list(x.shape[:2])
    for p in padded:
        shape += [p // f, f]
    return xp.reshape(shape)


def _block_counts(sp, f, dtype):
    counts = np.ones((1, 1) + tuple(sp), dtype=dtype)
    blocks = _block_view(counts, f)
    nd = len(sp)
    return blocks.sum(axis=tuple(3 + 2 * i for i in range(nd)))


def _downsample_forward(x, f):
    nd = x.ndim - 2
    summed = _block_view(x, f).sum(axis=tuple(3 + 2 * i for i in range(nd)))
    counts = _block_counts(x.shape[2:], f, x.dtype)
    return summed / counts, counts


def _downsample_backward(grad, counts, f, in_shape):
    g = grad / counts
    for ax in range(2, grad.ndim):
        g = np.repeat(g, f, axis=ax)
    return g[(slice(None), slice(None)) + tuple(slice(0, s) for s in in_shape[2:])]


def _upsample_forward(x, f, target):
    out = x
    for ax in range(2, x.ndim):
        out = np.repeat(out, f, axis=ax)
    if any(o < t for o, t in zip(out.shape[2:], target)):
        raise ShapeError(f"upsampled extent {out.shape[2:]} smaller than {target}")
    return out[(slice(None), slice(None)) + tuple(slice(0, t) for t in target)]


def _upsample_backward(grad, f, low_shape):
    nd = grad.ndim - 2
    full = grad.shape[:2] + tuple(s * f for s in low_shape[2:])
    g = np.zeros(full, dtype=grad.dtype)
    g[(slice(None), slice(None)) + tuple(slice(0, s) for s in grad.shape[2:])] = grad
    shape = list(grad.shape[:2])
    for s in low_shape[2:]:
        shape += [s, f]
    return g.reshape(shape).sum(axis=tuple(3 + 2 * i for i in range(nd)))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    eps = np.finfo(z.dtype).eps
    return np.clip(out, eps, 1.0 - eps)


# ---------------------------------------------------------------------------
# model


@dataclass(eq=False)
class ModelState:
    """Layer topology plus the flat parameter vector shipped between centers."""

    layers: list[LayerSpec]
    theta: np.ndarray
    version: int = 0
    in_channels: int = 1
    _tape: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.layers = list(self.layers)
        validate_layers(self.layers, self.in_channels)
        expected = sum(l.n_params for l in self.layers)
        if self.theta.ndim != 1 or len(self.theta) != expected:
            raise ShapeError(f"theta has {self.theta.size} values, layers need {expected}")
        self._offsets = np.cumsum([0] + [l.n_params for l in self.layers[:-1]]).tolist()
        self._shapes = [l.param_shapes() for l in self.layers]

    @property
    def dtype(self):
        return self.theta.dtype

    @property
    def n_params(self) -> int:
        return len(self.theta)

    def offsets(self) -> list[int]:
        return list(self._offsets)

    def params_of(self, i: int, vec: np.ndarray | None = None) -> list[np.ndarray]:
        """Views of layer ``i``'s parameter tensors inside ``vec`` (default theta)."""
        vec = self.theta if vec is None else vec
        pos = self._offsets[i]
        views = []
        for shape in self._shapes[i]:
            n = int(np.prod(shape))
            views.append(vec[pos:pos + n].reshape(shape))
            pos += n
        return views

    def copy(self) -> "ModelState":
        return ModelState(self.layers, self.theta.copy(), self.version, self.in_channels)

    def same_as(self, other: "ModelState") -> bool:
        """Bitwise equality of topology and parameters."""
        return (self.layers == other.layers and self.in_channels == other.in_channels
                and self.theta.dtype == other.theta.dtype
                and self.theta.tobytes() == other.theta.tobytes())

    # -- passes ------------------------------------------------------------

    def _run(self, idx, x, tape):
        for i in idx:
            layer = self.layers[i]
            kind = layer.kind
            if kind in ("conv2d", "conv3d"):
                w, b = self.params_of(i)
                out, win = _conv_forward(x, w, b)
                tape.append((i, kind, win))
            elif kind == "dense":
                w, b = self.params_of(i)
                if x.shape[1] != w.shape[1]:
                    raise ShapeError(f"dense expects {w.shape[1]} channels, got {x.shape[1]}")
                out = _dense_forward(x, w, b)
                tape.append((i, kind, x))
            elif kind == "relu":
                out = np.maximum(x, 0)
                tape.append((i, kind, x > 0))
            elif kind == "sigmoid":
                out = _sigmoid(x)
                tape.append((i, kind, out))
            elif kind == "downsample-avg":
                out, counts = _downsample_forward(x, layer.dims[0])
                tape.append((i, kind, (counts, x.shape)))
            elif kind == "upsample-nearest":
                target = self._input_shape[2:]
                out = _upsample_forward(x, layer.dims[0], target)
                tape.append((i, kind, x.shape))
            else:  # pragma: no cover - concat handled by caller
                raise ShapeError(kind)
            x = out
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim < 2 or x.shape[1] != self.in_channels:
            raise ShapeError(f"input must be (batch, {self.in_channels}, ...), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        self._input_shape = x.shape
        nr, lr, tail = _split_layers(self.layers)
        tape_nr, tape_lr, tape_tail = [], [], []
        h = self._run(nr, x, tape_nr)
        if tail is not None:
            h_lr = self._run(lr, x, tape_lr)
            if h_lr.shape[2:] != h.shape[2:]:
                raise ShapeError(f"pathway extents differ: {h.shape} vs {h_lr.shape}")
            split = h.shape[1]
            h = np.concatenate([h, h_lr], axis=1)
            h = self._run(tail, h, tape_tail)
        else:
            split = None
        if not np.all(np.isfinite(h)):
            self._tape = None
            raise NumericalError("non-finite activation in forward pass")
        self._tape = [tape_nr, tape_lr, tape_tail, split]
        return h

    def _unrun(self, tape, grad, g_vec):
        for i, kind, saved in reversed(tape):
            if kind in ("conv2d", "conv3d"):
                w, _ = self.params_of(i)
                dw_v, db_v = self.params_of(i, g_vec)
                grad, dw, db = _conv_backward(grad, saved, w)
                dw_v += dw
                db_v += db
            elif kind == "dense":
                w, _ = self.params_of(i)
                dw_v, db_v = self.params_of(i, g_vec)
                grad, dw, db = _dense_backward(grad, saved, w)
                dw_v += dw
                db_v += db
            elif kind == "relu":
                grad = grad * saved
            elif kind == "sigmoid":
                grad = grad * saved * (1 - saved)
            elif kind == "downsample-avg":
                counts, in_shape = saved
                grad = _downsample_backward(grad, counts, self.layers[i].dims[0], in_shape)
            elif kind == "upsample-nearest":
                grad = _upsample_backward(grad, self.layers[i].dims[0], saved)
        return grad

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(upstream * output)`` with respect to ``theta``.

        Consumes the tape of the most recent :meth:`forward`.
        """
        if self._tape is None:
            raise RuntimeError("backward called without a recorded forward pass")
        tape_nr, tape_lr, tape_tail, split = self._tape
        upstream = np.asarray(upstream, dtype=self.dtype)
        g = np.zeros_like(self.theta)
        grad = self._unrun(tape_tail, upstream, g)
        if split is not None:
            self._unrun(tape_lr, grad[:, split:], g)
            grad = grad[:, :split]
        self._unrun(tape_nr, grad, g)
        self._tape = None
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite parameter gradient")
        return g


def forward(model: ModelState, batch) -> np.ndarray:
    """Per-voxel probabilities for a PatchBatch or a raw input array."""
    x = getattr(batch, "inputs", batch)
    return model.forward(x)


def backward(model: ModelState, upstream: np.ndarray) -> np.ndarray:
    return model.backward(upstream)


def init_params(layers: Sequence[LayerSpec], rng: np.random.Generator,
                dtype=np.float32, head_prior: float | None = None) -> np.ndarray:
    """He-normal weights, zero biases.

    With ``head_prior`` set and a sigmoid output, the last convolution
    instead starts with weights shrunk tenfold and its bias at the logit of
    ``head_prior``, so a fresh model predicts the rare class everywhere with
    that small probability rather than with a coin flip.
    """
    head = None
    if head_prior is not None:
        if not 0 < head_prior < 1:
            raise ValueError("head_prior must lie in (0, 1)")
        if len(layers) >= 2 and layers[-1].kind == "sigmoid" and layers[-2].n_params:
            head = len(layers) - 2
    chunks = []
    for i, l in enumerate(layers):
        for j, shape in enumerate(l.param_shapes()):
            if j == 0:
                fan_in = int(np.prod(shape[1:]))
                std = np.sqrt(2.0 / fan_in) * (0.1 if i == head else 1.0)
                chunks.append(rng.normal(0.0, std, size=shape).ravel())
            elif i == head:
                chunks.append(np.full(shape, np.log(head_prior / (1 - head_prior))).ravel())
            else:
                chunks.append(np.zeros(shape).ravel())
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    return flat.astype(dtype)


def default_layers(channels: Sequence[int] = (8, 8, 16, 16), fused: Sequence[int] = (16,),
                   kernel: int = 3, low_res: bool = True, low_res_factor: int = 3,
                   ndim: int = 2, in_channels: int = 1) -> list[LayerSpec]:
    """The default two-pathway segmentation CNN.

    ``channels`` convolutions per pathway, optional low-res pathway on
    ``low_res_factor``-times average-downsampled input, concatenation, then
    1x1 fused convolutions and a 1x1 sigmoid head.
    """
    conv = "conv2d" if ndim == 2 else "conv3d"

    def pathway(tag):
        out, c = [], in_channels
        for ch in channels:
            out += [LayerSpec(conv, (c, ch, kernel), tag), LayerSpec("relu", (), tag)]
            c = ch
        return out

    layers = pathway("normal-res")
    c = channels[-1]
    if low_res:
        layers.append(LayerSpec("downsample-avg", (low_res_factor,), "low-res"))
        layers += pathway("low-res")
        layers.append(LayerSpec("upsample-nearest", (low_res_factor,), "low-res"))
        layers.append(LayerSpec("concat"))
        c = 2 * channels[-1]
    for ch in fused:
        layers += [LayerSpec(conv, (c, ch, 1)), LayerSpec("relu")]
        c = ch
    layers += [LayerSpec(conv, (c, 1, 1)), LayerSpec("sigmoid")]
    return layers


def build_model(layers: Sequence[LayerSpec], seed: int | np.random.Generator = 0,
                dtype=np.float32, in_channels: int = 1,
                head_prior: float | None = None) -> ModelState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return ModelState(list(layers), init_params(layers, rng, dtype, head_prior),
                      in_channels=in_channels)
