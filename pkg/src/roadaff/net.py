"""Small fully-convolutional affordance network with a PU-aware multi-task loss.

A stack of strided ReLU convolutions feeds two linear 3x3 heads: per-class
score maps and per-class distance maps. Global max pooling of each score
map gives the image-level class score ``f_k``; the distance output ``d_k``
is read at the same argmax cell. Everything is plain numpy with a hand
written backward pass.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .annotation import ClassPrediction, CompleteAffordance
from .labels import K
from .sampler import FrameDataset, SamplerConfig, ViewSample, ViewType, context_window, make_epoch

logger = logging.getLogger(__name__)

NO_DISTANCE = -1.0   # sentinel target: no distance supervision


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, params: "NetParams", step: int):
        super().__init__(msg)
        self.params = params
        self.step = step


class InvalidLabelError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    conv_stack: tuple[tuple[int, int, int], ...] = ((16, 5, 2), (32, 5, 2), (32, 5, 2), (32, 3, 2))
    head_kernel: int = 3
    in_channels: int = 3
    num_classes: int = K
    loss_weights: tuple[float, float, float] = (1.0, 0.1, 1.0)
    learning_rate: float = 1e-3
    momentum: float = 0.9
    round_lr_decay: float = 0.5
    grad_clip: float = 10.0
    batch_size: int = 1
    iterations: int = 3000
    rounds: int = 3
    max_dist: float = 15.0
    context: int = 48           # pixels of surrounding image fed with each training view
    positive_threshold: float = 0.9
    log_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.num_classes != K:
            raise ValueError(f"num_classes must be {K}")
        if not self.conv_stack:
            raise ValueError("conv_stack must not be empty")
        for ch, k, s in self.conv_stack:
            if ch <= 0 or k <= 0 or k % 2 == 0 or s <= 0:
                raise ValueError(f"bad conv layer {(ch, k, s)}: need positive sizes and an odd kernel")
        if self.head_kernel % 2 == 0:
            raise ValueError("head_kernel must be odd")
        if min(self.loss_weights) <= 0 or len(self.loss_weights) != 3:
            raise ValueError("loss_weights must be three positive numbers")
        if self.context < 0 or self.context % self.downsample:
            raise ValueError(f"context must be a non-negative multiple of the downsample factor {self.downsample}")
        if self.batch_size < 1 or self.iterations < 0 or self.rounds < 1:
            raise ValueError("batch_size, iterations and rounds must be positive")

    @property
    def downsample(self) -> int:
        return int(np.prod([s for _, _, s in self.conv_stack]))


# -- parameters -----------------------------------------------------------

@dataclass
class ConvLayer:
    weight: np.ndarray      # (out, in, kh, kw)
    bias: np.ndarray        # (out,)
    stride: int = 1

    @property
    def shape(self):
        return self.weight.shape


@dataclass
class NetParams:
    """Backbone layers followed by the score head and the distance head."""
    layers: list[ConvLayer]

    @property
    def backbone(self) -> list[ConvLayer]:
        return self.layers[:-2]

    @property
    def score_head(self) -> ConvLayer:
        return self.layers[-2]

    @property
    def distance_head(self) -> ConvLayer:
        return self.layers[-1]

    @property
    def downsample(self) -> int:
        return int(np.prod([l.stride for l in self.backbone]))

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def arrays(self) -> list[np.ndarray]:
        return [a for l in self.layers for a in (l.weight, l.bias)]

    def copy(self) -> "NetParams":
        return NetParams([ConvLayer(l.weight.copy(), l.bias.copy(), l.stride) for l in self.layers])

    def astype(self, dtype) -> "NetParams":
        return NetParams([ConvLayer(l.weight.astype(dtype), l.bias.astype(dtype), l.stride) for l in self.layers])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_params(cfg: NetConfig, seed: int | None = None, dtype=np.float32) -> NetParams:
    """He-normal backbone; small heads, distance bias at half the range."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    layers = []
    c_in = cfg.in_channels
    for ch, k, s in cfg.conv_stack:
        std = math.sqrt(2.0 / (c_in * k * k))
        layers.append(ConvLayer(rng.normal(0.0, std, (ch, c_in, k, k)).astype(dtype),
                                np.zeros(ch, dtype=dtype), s))
        c_in = ch
    hk = cfg.head_kernel
    std = math.sqrt(1.0 / (c_in * hk * hk))
    layers.append(ConvLayer(rng.normal(0.0, std, (K, c_in, hk, hk)).astype(dtype), np.zeros(K, dtype=dtype), 1))
    layers.append(ConvLayer(rng.normal(0.0, std, (K, c_in, hk, hk)).astype(dtype),
                            np.full(K, cfg.max_dist / 2.0, dtype=dtype), 1))
    return NetParams(layers)


# -- convolution ----------------------------------------------------------

def _conv_forward(x: np.ndarray, layer: ConvLayer):
    """'Same'-padded strided convolution; output size is ceil(in / stride)."""
    n, c, h, w = x.shape
    o, _, k, _ = layer.weight.shape
    s = layer.stride
    p = k // 2
    ho, wo = -(-h // s), -(-w // s)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ layer.weight.reshape(o, -1).T + layer.bias
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), (cols, x.shape)


def _conv_backward(dout: np.ndarray, layer: ConvLayer, cache, need_dx: bool = True):
    cols, (n, c, h, w) = cache
    o, _, k, _ = layer.weight.shape
    s = layer.stride
    p = k // 2
    ho, wo = dout.shape[2:]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d2.T @ cols).reshape(layer.weight.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ layer.weight.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
    dxp = np.zeros((n, c, h + 2 * p + s, w + 2 * p + s), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[i, j]
    return dxp[:, :, p:p + h, p:p + w], dw, db


# -- forward --------------------------------------------------------------

@dataclass
class Heads:
    score_maps: np.ndarray       # (N, K, H', W')
    distance_map: np.ndarray     # (N, K, H', W')
    pooled_scores: np.ndarray    # (N, K)
    pooled_distance: np.ndarray  # (N, K)
    argmax: np.ndarray           # (N, K) flat row-major cell index
    top1_probs: np.ndarray       # (N, K)
    cache: list = field(default=None, repr=False)

    def frame(self, i: int) -> "Heads":
        return Heads(self.score_maps[i], self.distance_map[i], self.pooled_scores[i],
                     self.pooled_distance[i], self.argmax[i], self.top1_probs[i])


def softmax(f: np.ndarray) -> np.ndarray:
    e = np.exp(f - f.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: NetParams, image: np.ndarray, keep_cache: bool = False, window=None) -> Heads:
    """Run the net on a (C, H, W) image or an (N, C, H, W) batch.

    ``window = (row, col, rows, cols)`` restricts max pooling to that block of
    cells; the maps still cover the whole input.
    """
    x = np.asarray(image, dtype=params.dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W) input, got shape {x.shape}")
    D = params.downsample
    if min(x.shape[2:]) < D:
        raise ValueError(f"input {x.shape[2:]} smaller than the downsample factor {D}")
    caches = []
    h = x
    for layer in params.backbone:
        z, c = _conv_forward(h, layer)
        h = np.maximum(z, 0)
        caches.append((c, z > 0))
    scores, cs = _conv_forward(h, params.score_head)
    dist, cd = _conv_forward(h, params.distance_head)
    if not (np.all(np.isfinite(scores)) and np.all(np.isfinite(dist))):
        raise FloatingPointError("non-finite activations in forward pass")
    n, k = scores.shape[:2]
    flat = scores.reshape(n, k, -1)
    if window is None:
        arg = np.argmax(flat, axis=2)   # first occurrence on ties
    else:
        r, c, nr, nc = window
        if r < 0 or c < 0 or nr < 1 or nc < 1 or r + nr > scores.shape[2] or c + nc > scores.shape[3]:
            raise ValueError(f"pooling window {window} outside the {scores.shape[2]}x{scores.shape[3]} map")
        inside = np.full(scores.shape[2:], -np.inf)
        inside[r:r + nr, c:c + nc] = 0.0
        arg = np.argmax(flat + inside.ravel(), axis=2)
    pooled = np.take_along_axis(flat, arg[..., None], axis=2)[..., 0]
    pooled_d = np.take_along_axis(dist.reshape(n, k, -1), arg[..., None], axis=2)[..., 0]
    heads = Heads(scores, dist, pooled, pooled_d, arg, softmax(pooled.astype(np.float64)),
                  (caches, cs, cd) if keep_cache else None)
    return heads.frame(0) if single and not keep_cache else heads


# -- losses ---------------------------------------------------------------

def loss_multilabel(f, y):
    """sum_k log(1 + exp(-y_k f_k)); entries with y_k = 0 are a constant log 2."""
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.sum(np.logaddexp(0.0, -y * f)))


def grad_multilabel(f, y):
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    # d/df log(1 + e^{-yf}) = -y * sigmoid(-y f), exactly zero when y = 0
    return -y * 0.5 * (1.0 + np.tanh(-0.5 * y * f))


def loss_distance(d, y):
    """L1 over the entries with a target >= 0; negative targets mean no supervision."""
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    gate = y >= 0
    return float(np.sum(np.abs(d - y)[gate]))


def grad_distance(d, y):
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.where(y >= 0, np.sign(d - y), 0.0)


def _top1_index(y) -> int | None:
    y = np.asarray(y, dtype=float)
    if not np.all(np.isin(y, (-1.0, 0.0, 1.0))):
        raise InvalidLabelError(f"top1 label entries must be in {{-1, 0, 1}}, got {y}")
    if np.all(y == 0):
        return None
    pos = np.flatnonzero(y == 1)
    if pos.size != 1 or np.count_nonzero(y == -1) != y.size - 1:
        raise InvalidLabelError(f"top1 label must be one-positive or all-zero, got {y}")
    return int(pos[0])


def loss_top1(f, y):
    """-2 log softmax_i(f) for a one-positive label at i; exactly 0 for an all-zero label."""
    i = _top1_index(y)
    if i is None:
        return 0.0
    f = np.asarray(f, dtype=float)
    m = f.max()
    return float(-2.0 * (f[i] - m - np.log(np.sum(np.exp(f - m)))))


def grad_top1(f, y):
    i = _top1_index(y)
    f = np.asarray(f, dtype=float)
    if i is None:
        return np.zeros_like(f)
    g = 2.0 * softmax(f)
    g[i] -= 2.0
    return g


@dataclass(frozen=True)
class Targets:
    multilabel: np.ndarray
    distance: np.ndarray
    top1: np.ndarray


def sample_targets(sample: ViewSample) -> Targets:
    """Per-branch targets of a view.

    Distance is supervised only on Standard views and only for the annotated
    class; the top1 branch sees a one-positive vector for Standard and
    Positive views and nothing for Negative views.
    """
    y = np.asarray(sample.label_vector, dtype=float)
    dist = np.full(K, NO_DISTANCE)
    top1 = np.zeros(K)
    if sample.view_type is not ViewType.NEGATIVE:
        i = int(np.argmax(y))
        top1 = -np.ones(K)
        top1[i] = 1.0
        if sample.view_type is ViewType.STANDARD and sample.distance_label is not None:
            dist[i] = sample.distance_label
    return Targets(y, dist, top1)


def branch_losses(heads: Heads, t: Targets) -> np.ndarray:
    return np.array([loss_multilabel(heads.pooled_scores, t.multilabel),
                     loss_distance(heads.pooled_distance, t.distance),
                     loss_top1(heads.pooled_scores, t.top1)])


def total_loss(heads: Heads, sample: ViewSample | Targets, weights=(1.0, 0.1, 1.0)) -> float:
    t = sample if isinstance(sample, Targets) else sample_targets(sample)
    return float(np.dot(weights, branch_losses(heads, t)))


# -- backward -------------------------------------------------------------

def _backward_from_heads(params: NetParams, heads: Heads, dfs: np.ndarray, dds: np.ndarray) -> list[np.ndarray]:
    """Gradients of all parameters given dL/df and dL/dd for every frame of a batch."""
    caches, cs, cd = heads.cache
    n, k, hh, ww = heads.score_maps.shape
    dt = params.dtype
    dscore = np.zeros((n, k, hh * ww), dtype=dt)
    ddist = np.zeros((n, k, hh * ww), dtype=dt)
    np.put_along_axis(dscore, heads.argmax[..., None], dfs[..., None].astype(dt), axis=2)
    np.put_along_axis(ddist, heads.argmax[..., None], dds[..., None].astype(dt), axis=2)
    dh_s, dws, dbs = _conv_backward(dscore.reshape(n, k, hh, ww), params.score_head, cs)
    dh_d, dwd, dbd = _conv_backward(ddist.reshape(n, k, hh, ww), params.distance_head, cd)
    dh = dh_s + dh_d
    grads = [dws, dbs, dwd, dbd]
    for depth, (layer, (c, mask)) in enumerate(zip(reversed(params.backbone), reversed(caches))):
        dz = dh * mask
        dh, dw, db = _conv_backward(dz, layer, c, need_dx=depth < len(caches) - 1)
        grads = [dw, db] + grads
    return grads


def loss_and_grad(params: NetParams, images: np.ndarray, targets: Sequence[Targets],
                  weights=(1.0, 0.1, 1.0), window=None):
    """Mean total loss over a batch, per-branch means, and parameter gradients."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    heads = forward(params, x, keep_cache=True, window=window)
    n = x.shape[0]
    w1, w2, w3 = weights
    dfs = np.zeros((n, K))
    dds = np.zeros((n, K))
    branches = np.zeros(3)
    for i, t in enumerate(targets):
        f, d = heads.pooled_scores[i], heads.pooled_distance[i]
        branches += [loss_multilabel(f, t.multilabel), loss_distance(d, t.distance), loss_top1(f, t.top1)]
        dfs[i] = (w1 * grad_multilabel(f, t.multilabel) + w3 * grad_top1(f, t.top1)) / n
        dds[i] = w2 * grad_distance(d, t.distance) / n
    branches /= n
    grads = _backward_from_heads(params, heads, dfs, dds)
    return float(np.dot(weights, branches)), branches, grads


def backward(params: NetParams, sample: ViewSample | Targets, image=None, weights=(1.0, 0.1, 1.0)) -> list[np.ndarray]:
    """Gradient of ``total_loss`` for one view, as arrays matching ``params.arrays()``."""
    if isinstance(sample, ViewSample):
        image, t = sample.crop, sample_targets(sample)
    else:
        t = sample
    return loss_and_grad(params, image, [t], weights)[2]


# -- training -------------------------------------------------------------

def _batches(dataset: FrameDataset, rng, scfg: SamplerConfig, batch_size: int, context: int):
    """Batches of ``(view, net input)``; the input is the view plus ``context`` pixels around it."""
    index = {lb.frame_id: i for i, lb in enumerate(dataset.labels)}
    while True:
        batch = []
        for s in make_epoch(dataset, rng, scfg):
            x = s.crop if context == 0 else context_window(dataset.images[index[s.frame_id]], s, context)
            batch.append((s, x))
            if len(batch) == batch_size:
                yield batch
                batch = []


def train(dataset: FrameDataset, cfg: NetConfig = NetConfig(), sampler_cfg: SamplerConfig = SamplerConfig(),
          init: NetParams | None = None, history: list | None = None,
          callback: Callable[[int, NetParams], None] | None = None) -> NetParams:
    """SGD with momentum over ``rounds`` x ``iterations`` steps of view batches.

    The learning rate is multiplied by ``round_lr_decay`` at every new round.
    Running per-branch losses are logged every ``log_every`` steps and, when
    ``history`` is given, appended to it as ``(step, multilabel, distance, top1)``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else init_params(cfg, seed=int(rng.integers(2**31)))
    velocity = [np.zeros_like(a) for a in params.arrays()]
    stream = _batches(dataset, rng, sampler_cfg, cfg.batch_size, cfg.context)
    D = params.downsample
    vh, vw = sampler_cfg.view_size
    # pool only over the view's own cells, so border cells see real surroundings
    # as they do when the net later runs on a whole image
    window = None if cfg.context == 0 else (cfg.context // D, cfg.context // D, -(-vh // D), -(-vw // D))
    running = None
    last_good = params.copy()
    step = 0
    for rnd in range(cfg.rounds):
        lr = cfg.learning_rate * cfg.round_lr_decay ** rnd
        for _ in range(cfg.iterations):
            batch = next(stream)
            images = np.stack([x for _, x in batch])
            try:
                loss, branches, grads = loss_and_grad(params, images, [sample_targets(s) for s, _ in batch],
                                                      cfg.loss_weights, window)
            except FloatingPointError:
                raise TrainingDivergedError(f"activations became non-finite at step {step}", last_good, step)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(f"loss became non-finite at step {step}", last_good, step)
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
            scale = min(1.0, cfg.grad_clip / norm) if norm > 0 else 1.0
            for a, g, v in zip(params.arrays(), grads, velocity):
                v *= cfg.momentum
                v -= (lr * scale) * g.astype(a.dtype)
                a += v
            step += 1
            running = branches if running is None else 0.99 * running + 0.01 * branches
            if step % cfg.log_every == 0:
                last_good = params.copy()
                logger.info("step %d  lr %.2e  multilabel %.4f  distance %.4f  top1 %.4f",
                            step, lr, *running)
                if history is not None:
                    history.append((step, *map(float, running)))
                if callback is not None:
                    callback(step, params)
    if not params.all_finite():
        raise TrainingDivergedError("parameters became non-finite", last_good, step)
    return params


def mean_loss(params: NetParams, views: Sequence[ViewSample], weights=(1.0, 0.1, 1.0)) -> float:
    """Epoch-mean total loss over a fixed list of views."""
    if not views:
        raise ValueError("no views")
    total = 0.0
    for s in views:
        total += total_loss(forward(params, s.crop), s, weights)
    return total / len(views)


# -- inference ------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def heads_to_affordance(heads: Heads, D: int, threshold: float = 0.9, frame_id: str = "") -> CompleteAffordance:
    w = heads.score_maps.shape[-1]
    out = []
    for k in range(K):
        score = float(sigmoid(heads.pooled_scores[k]))
        if score > threshold:
            r, c = divmod(int(heads.argmax[k]), w)
            out.append(ClassPrediction(True, score, (float(D * c + D / 2), float(D * r + D / 2)),
                                       float(heads.pooled_distance[k])))
        else:
            out.append(ClassPrediction(False, score))
    return CompleteAffordance(frame_id, tuple(out))


def infer_full(params: NetParams, image: np.ndarray, cfg: NetConfig = NetConfig(), frame_id: str = "") -> CompleteAffordance:
    """Whole-image inference: the fully-convolutional net slides over the full frame."""
    return heads_to_affordance(forward(params, image), params.downsample, cfg.positive_threshold, frame_id)


# -- checkpoints ----------------------------------------------------------

CKPT_MAGIC = b"RAFNET01"


def save_params(path, params: NetParams) -> None:
    """Header (magic, layer count, per-layer out/in/kh/kw/stride) then row-major float64 values."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(params.layers)))
        for l in params.layers:
            fh.write(struct.pack("<5I", *l.weight.shape, l.stride))
        for l in params.layers:
            fh.write(np.ascontiguousarray(l.weight, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())


def load_params(path, dtype=np.float32) -> NetParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    (n,) = struct.unpack_from("<I", data, 8)
    off = 12
    shapes = []
    for _ in range(n):
        shapes.append(struct.unpack_from("<5I", data, off))
        off += 20
    layers = []
    for o, i, kh, kw, s in shapes:
        cnt = o * i * kh * kw
        w = np.frombuffer(data, dtype="<f8", count=cnt, offset=off).reshape(o, i, kh, kw)
        off += 8 * cnt
        b = np.frombuffer(data, dtype="<f8", count=o, offset=off)
        off += 8 * o
        layers.append(ConvLayer(w.astype(dtype), b.astype(dtype), int(s)))
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return NetParams(layers)
