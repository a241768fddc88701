"""NHWC tensor ops with hand-written backward passes, the ResNet family and Adam.

Tensors are plain numpy arrays: ``(N, H, W, C)`` activations, ``(k, k, C, C')``
filters. float32 is the training dtype; float64 exists for gradient checks.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite activation after {layer}")
        self.layer = layer


# ---------------------------------------------------------------------------
# primitive ops

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected HxWxC or NxHxWxC input, got shape {x.shape}")
    return x, False


def conv2d_forward(x, w, b=None, stride=1, pad=0):
    N, H, W, C = x.shape
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"filters must be k x k x C x C', got {w.shape}")
    k, _, Cw, Co = w.shape
    if Cw != C:
        raise ShapeError(f"input has C={C} channels but filters expect C={Cw}")
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ShapeError(f"filter size k={k} exceeds padded input H={H + 2 * pad}, W={W + 2 * pad}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if k == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride, :][:, :Ho, :Wo]).reshape(-1, C)
    else:
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, k * k * C)
    wm = w.reshape(k * k * C, Co)
    y = cols @ wm
    if b is not None:
        y += b
    cache = (cols, x.shape, xp.shape, w, stride, pad)
    return y.reshape(N, Ho, Wo, Co), cache


def conv2d_backward(dy, cache, need_dx=True):
    cols, xshape, xpshape, w, stride, pad = cache
    k, _, C, Co = w.shape
    N, Ho, Wo, _ = dy.shape
    dy2 = dy.reshape(-1, Co)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dx = None
    if need_dx:
        dcols = dy2 @ w.reshape(k * k * C, Co).T
        if k == 1:
            dxp = np.zeros(xpshape, dtype=dy.dtype)
            dxp[:, :stride * (Ho - 1) + 1:stride, :stride * (Wo - 1) + 1:stride, :] = dcols.reshape(N, Ho, Wo, C)
        else:
            dxp = kernels.col2im(dcols.reshape(N, Ho, Wo, k, k, C), xpshape[1], xpshape[2], stride)
        H, W = xshape[1], xshape[2]
        dx = dxp[:, pad:pad + H, pad:pad + W, :] if pad else dxp
    return dx, dw, db


def conv2d(x, filters, stride=1, pad=0, bias=None):
    """Cross-correlation of ``H x W x C`` (or batched) input with ``k x k x C x C'`` filters."""
    xb, single = _as_batch(np.asarray(x))
    y, _ = conv2d_forward(xb, np.asarray(filters), bias, stride, pad)
    return y[0] if single else y


def relu(x):
    return np.maximum(x, 0)


def maxpool_forward(x, k=3, stride=2, pad=0):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=-np.inf) if pad else np.ascontiguousarray(x)
    out, arg = kernels.maxpool_forward(xp, k, stride)
    return out, (arg, xp.shape, x.shape, k, stride, pad)


def maxpool_backward(dout, cache):
    arg, xpshape, xshape, k, stride, pad = cache
    dxp = kernels.maxpool_backward(np.ascontiguousarray(dout), arg, xpshape[1], xpshape[2], k, stride)
    return dxp[:, pad:pad + xshape[1], pad:pad + xshape[2], :] if pad else dxp


def maxpool(x, k=3, stride=2, pad=0):
    xb, single = _as_batch(np.asarray(x))
    y, _ = maxpool_forward(xb, k, stride, pad)
    return y[0] if single else y


def avgpool_global(x):
    """Per-channel mean over all spatial positions; ``(..., H, W, C) -> (..., C)``."""
    return np.asarray(x).mean(axis=(-3, -2))


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    if train:
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv, gamma, train), (mu, var)


def batchnorm_backward(dy, cache):
    xhat, inv, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dbeta = dy.sum(axis=(0, 1, 2))
    dxhat = dy * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    m = dy.shape[0] * dy.shape[1] * dy.shape[2]
    dx = inv / m * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
    return dx, dgamma, dbeta


def rescale_forward(src, w, b, stride):
    return conv2d_forward(src, w, b, stride, 0)


def residual_block(x, w, b, skip, rescale_w=None, rescale_b=None, indicator=True,
                   stride=1, pad=1):
    """``ReLU(Conv(x)) + R(skip) * indicator`` for a single block, R a strided 1x1 conv or identity."""
    xb, single = _as_batch(np.asarray(x))
    main = relu(conv2d_forward(xb, w, b, stride, pad)[0])
    if indicator:
        sb, _ = _as_batch(np.asarray(skip))
        if rescale_w is not None:
            rstride = max(1, sb.shape[1] // main.shape[1])
            r = rescale_forward(sb, rescale_w, rescale_b, rstride)[0]
        else:
            r = sb
        if r.shape != main.shape:
            raise ShapeError(f"skip shape {r.shape[1:]} does not match block output {main.shape[1:]}")
        main = main + r
    return main[0] if single else main


# ---------------------------------------------------------------------------
# architectures

@dataclass(frozen=True)
class LayerSpec:
    index: int
    k: int
    stride: int
    pad: int
    cin: int
    cout: int
    pool: bool = False
    skip_from: int | None = None
    rescale: bool = False
    rescale_stride: int = 1


PRESETS = {
    "18": dict(widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), strides=(1, 2, 2, 2), input_size=224),
    "34": dict(widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3), strides=(1, 2, 2, 2), input_size=224),
    "50": dict(widths=(64, 128, 256, 512), blocks=(3, 4, 6, 3), strides=(1, 2, 2, 2), input_size=224),
    "micro": dict(widths=(8, 16, 32), blocks=(1, 1, 1), strides=(1, 2, 1), input_size=56),
    "cnn": dict(widths=(64, 128, 256, 256), blocks=(), strides=(), input_size=224),
    "cnn-micro": dict(widths=(8, 16, 32, 32), blocks=(), strides=(), input_size=56),
}


@dataclass(frozen=True)
class ResNetConfig:
    """Architecture description.

    ``depth`` picks a preset (``18``, ``34``, ``50``, ``micro``, or the plain
    ``cnn`` / ``cnn-micro`` baselines); explicit ``widths`` / ``blocks`` /
    ``strides`` override it.
    """
    depth: str = "micro"
    input_size: int | None = None
    widths: tuple[int, ...] | None = None
    blocks: tuple[int, ...] | None = None
    strides: tuple[int, ...] | None = None
    batch_norm: bool = False
    num_classes: int = 2
    stem_kernel: int = 7
    in_channels: int = 3

    def __post_init__(self):
        depth = str(self.depth)
        if depth not in PRESETS:
            raise ValueError(f"unknown depth {depth!r}")
        object.__setattr__(self, "depth", depth)
        preset = PRESETS[depth]
        for key in ("widths", "blocks", "strides", "input_size"):
            val = getattr(self, key)
            if val is None:
                val = preset[key]
            if isinstance(val, list):
                val = tuple(val)
            object.__setattr__(self, key, val)
        if self.num_classes != 2:
            raise ValueError("only two-class heads are supported")
        if self.final_hw() < 2:
            raise ValueError(f"input_size {self.input_size} leaves a final feature map smaller than 2x2")

    @property
    def is_cnn(self) -> bool:
        return self.depth.startswith("cnn")

    @property
    def bottleneck(self) -> bool:
        return self.depth == "50"

    @property
    def skip_period_S(self) -> int | None:
        if self.is_cnn:
            return None
        return 3 if self.bottleneck else 2

    def layers(self) -> list[LayerSpec]:
        if self.is_cnn:
            out, cin = [], self.in_channels
            for i, w in enumerate(self.widths):
                out.append(LayerSpec(i + 1, 5, 1, 2, cin, w, pool=True))
                cin = w
            return out
        k0 = self.stem_kernel
        out = [LayerSpec(1, k0, 2, k0 // 2, self.in_channels, self.widths[0], pool=True)]
        S = self.skip_period_S
        cur = self.widths[0]
        l = 2
        for w, nb, st in zip(self.widths, self.blocks, self.strides):
            for bi in range(nb):
                s = st if bi == 0 else 1
                if self.bottleneck:
                    shapes = [(1, 1, 0, cur, w), (3, s, 1, w, w), (1, 1, 0, w, 4 * w)]
                    cout = 4 * w
                else:
                    shapes = [(3, s, 1, cur, w), (3, 1, 1, w, w)]
                    cout = w
                for j, (k, stride, pad, ci, co) in enumerate(shapes):
                    last = j == len(shapes) - 1
                    skip = l - S if last else None
                    needs = last and (cur != cout or s != 1)
                    out.append(LayerSpec(l, k, stride, pad, ci, co, skip_from=skip,
                                         rescale=needs, rescale_stride=s if needs else 1))
                    l += 1
                cur = cout
        return out

    def final_channels(self) -> int:
        return self.layers()[-1].cout

    def final_hw(self) -> int:
        h = self.input_size
        for L in self.layers():
            h = (h + 2 * L.pad - L.k) // L.stride + 1
            if L.pool:
                h = (h + 2 - 3) // 2 + 1
        return h

    def n_layers(self) -> int:
        """Convolution layers plus the FC head (the usual depth count)."""
        return len(self.layers()) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("widths", "blocks", "strides"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ResNetConfig:
        d = dict(d)
        for key in ("widths", "blocks", "strides"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class ResNetModel:
    """Parameters (ordered name -> array) plus BN buffers for a :class:`ResNetConfig`."""

    def __init__(self, config: ResNetConfig, params: dict, buffers: dict | None = None,
                 seed: int | None = None, metadata: dict | None = None):
        self.config = config
        self.params = params
        self.buffers = buffers if buffers is not None else {}
        self.seed = seed
        self.metadata = metadata if metadata is not None else {}
        self._layers = config.layers()

    @classmethod
    def init(cls, config: ResNetConfig, seed: int = 0, dtype=np.float32) -> ResNetModel:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        params, buffers = {}, {}
        for L in config.layers():
            params[f"conv{L.index}.w"] = _kaiming(rng, (L.k, L.k, L.cin, L.cout), L.k * L.k * L.cin, dtype)
            params[f"conv{L.index}.b"] = np.zeros(L.cout, dtype)
            if config.batch_norm:
                params[f"bn{L.index}.gamma"] = np.ones(L.cout, dtype)
                params[f"bn{L.index}.beta"] = np.zeros(L.cout, dtype)
                buffers[f"bn{L.index}.mean"] = np.zeros(L.cout, dtype)
                buffers[f"bn{L.index}.var"] = np.ones(L.cout, dtype)
            if L.rescale:
                src_c = config.layers()[L.skip_from - 1].cout if L.skip_from > 0 else config.in_channels
                params[f"rescale{L.index}.w"] = _kaiming(rng, (1, 1, src_c, L.cout), src_c, dtype)
                params[f"rescale{L.index}.b"] = np.zeros(L.cout, dtype)
        C = config.final_channels()
        params["fc.A"] = (rng.standard_normal((2, C)) * math.sqrt(1.0 / C)).astype(dtype)
        params["fc.b"] = np.zeros(2, dtype)
        return cls(config, params, buffers, seed=seed)

    @property
    def dtype(self):
        return self.params["fc.A"].dtype

    @property
    def layers(self) -> list[LayerSpec]:
        return self._layers

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> ResNetModel:
        return ResNetModel(self.config, {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.buffers.items()}, self.seed,
                           json.loads(json.dumps(self.metadata)))

    def astype(self, dtype) -> ResNetModel:
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        m.buffers = {k: v.astype(dtype) for k, v in m.buffers.items()}
        return m


@dataclass
class ForwardTrace:
    features: np.ndarray   # final feature map F^(L), (N, H, W, C)
    pooled: np.ndarray     # channel scores (N, C)
    scores: np.ndarray     # class scores (N, 2)
    probs: np.ndarray      # class probabilities (N, 2)


def _run(model: ResNetModel, x: np.ndarray, train: bool, keep: bool):
    p = model.params
    bn = model.config.batch_norm
    feats = {0: x}
    caches = {}
    need = {L.skip_from for L in model.layers if L.skip_from is not None}
    for L in model.layers:
        i = L.index
        h, c_conv = conv2d_forward(feats[i - 1], p[f"conv{i}.w"], p[f"conv{i}.b"], L.stride, L.pad)
        c_bn = None
        if bn:
            h, c_bn, (mu, var) = batchnorm_forward(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                                                   model.buffers[f"bn{i}.mean"],
                                                   model.buffers[f"bn{i}.var"], train)
            if train:
                m_, v_ = model.buffers[f"bn{i}.mean"], model.buffers[f"bn{i}.var"]
                model.buffers[f"bn{i}.mean"] = ((1 - BN_MOMENTUM) * m_ + BN_MOMENTUM * mu).astype(m_.dtype)
                model.buffers[f"bn{i}.var"] = ((1 - BN_MOMENTUM) * v_ + BN_MOMENTUM * var).astype(v_.dtype)
        mask = h > 0
        a = h * mask
        c_pool = None
        if L.pool:
            a, c_pool = maxpool_forward(a, 3, 2, 1)
        c_res = None
        if L.skip_from is not None:
            src = feats[L.skip_from]
            if L.rescale:
                r, c_res = rescale_forward(src, p[f"rescale{i}.w"], p[f"rescale{i}.b"], L.rescale_stride)
            else:
                r = src
            if r.shape != a.shape:
                raise ShapeError(f"layer {i}: skip {r.shape[1:]} vs main {a.shape[1:]}")
            a = a + r
        if not np.isfinite(a).all():
            raise NonFiniteError(f"layer {i}")
        feats[i] = a
        if keep:
            caches[i] = (c_conv, c_bn, mask, c_pool, c_res)
        else:
            # inference: drop maps nobody reads again
            for j in list(feats):
                if j < i and j not in need:
                    del feats[j]
    FL = feats[model.layers[-1].index]
    pooled = FL.mean(axis=(1, 2))
    scores = pooled @ p["fc.A"].T + p["fc.b"]
    probs = softmax(scores)
    if not np.isfinite(probs).all():
        raise NonFiniteError("fc head")
    return ForwardTrace(FL, pooled, scores, probs), caches


def forward(model: ResNetModel, image: np.ndarray, train: bool = False) -> ForwardTrace:
    """Class probabilities for one ``H x W x 3`` image or an ``N x H x W x 3`` batch."""
    xb, _ = _as_batch(np.asarray(image, dtype=model.dtype))
    trace, _ = _run(model, xb, train=train, keep=False)
    return trace


def predict(model: ResNetModel, images: np.ndarray, batch: int = 256) -> np.ndarray:
    out = [forward(model, images[s:s + batch]).probs for s in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros((0, 2))


def _sample_losses(probs, y):
    py = probs[np.arange(len(y)), y]
    return -np.log(np.maximum(py, PROB_CLAMP)), py


def _loss_and_grads_single(model: ResNetModel, x: np.ndarray, y: np.ndarray, train_bn: bool = True):
    p = model.params
    trace, caches = _run(model, x, train=train_bn and model.config.batch_norm, keep=True)
    losses, py = _sample_losses(trace.probs, y)
    N = len(y)
    onehot = np.zeros_like(trace.probs)
    onehot[np.arange(N), y] = 1
    dz = (trace.probs - onehot) * (py >= PROB_CLAMP)[:, None]
    grads = {}
    grads["fc.A"] = dz.T @ trace.pooled
    grads["fc.b"] = dz.sum(axis=0)
    dpooled = dz @ p["fc.A"]
    FL = trace.features
    HW = FL.shape[1] * FL.shape[2]
    d = {model.layers[-1].index: np.broadcast_to((dpooled / HW)[:, None, None, :], FL.shape).astype(FL.dtype)}
    for L in reversed(model.layers):
        i = L.index
        g = d.pop(i)
        c_conv, c_bn, mask, c_pool, c_res = caches[i]
        if L.skip_from is not None:
            if L.rescale:
                dsrc, gw, gb = conv2d_backward(g, c_res, need_dx=True)
                grads[f"rescale{i}.w"] = gw
                grads[f"rescale{i}.b"] = gb
            else:
                dsrc = g
            j = L.skip_from
            d[j] = d[j] + dsrc if j in d else np.array(dsrc)
        if L.pool:
            g = maxpool_backward(g, c_pool)
        g = g * mask
        if c_bn is not None:
            g, dgamma, dbeta = batchnorm_backward(g, c_bn)
            grads[f"bn{i}.gamma"] = dgamma
            grads[f"bn{i}.beta"] = dbeta
        dx, gw, gb = conv2d_backward(g, c_conv, need_dx=i > 1)
        grads[f"conv{i}.w"] = gw
        grads[f"conv{i}.b"] = gb
        if i > 1:
            d[i - 1] = d[i - 1] + dx if i - 1 in d else dx
    grads = {k: grads[k].astype(p[k].dtype, copy=False) for k in p}
    return float(losses.sum()), grads, trace


def loss_and_grads(model: ResNetModel, images: np.ndarray, y: np.ndarray, workers: int = 1,
                   chunk: int = 32):
    """Summed cross-entropy over the batch and its gradient for every parameter.

    With ``workers > 1`` the batch is cut into fixed-size chunks evaluated in
    threads and summed in chunk order, so the result depends on ``chunk`` but
    not on the thread schedule.
    """
    x, _ = _as_batch(np.asarray(images, dtype=model.dtype))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(y) == 0:
        raise ValueError("batch must be nonempty")
    if workers <= 1:
        loss, grads, _ = _loss_and_grads_single(model, x, y)
        return loss, grads
    if model.config.batch_norm:
        raise ValueError("parallel evaluation is not supported with batch norm")
    spans = [(s, min(s + chunk, len(y))) for s in range(0, len(y), chunk)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda ab: _loss_and_grads_single(model, x[ab[0]:ab[1]], y[ab[0]:ab[1]]), spans))
    loss = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for l_, g_, _ in parts:
        loss += l_
        for k in grads:
            grads[k] += g_[k]
    return loss, grads


# ---------------------------------------------------------------------------
# optimization

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> AdamState:
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, in place; returns ``(params, state)``."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        params[k] -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(params[k].dtype, copy=False)
    return params, state


@dataclass
class TrainResult:
    model: ResNetModel
    history: list[dict]
    best_epoch: int


def evaluate(model: ResNetModel, images, y, batch: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy."""
    probs = predict(model, images, batch)
    y = np.asarray(y, dtype=np.int64)
    losses, _ = _sample_losses(probs, y)
    acc = float(np.mean((probs[:, 1] > probs[:, 0]).astype(int) == y))
    return float(losses.mean()), acc


def split_indices(n: int, seed: int, train_frac: float = 0.7) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17]))
    perm = rng.permutation(n)
    if n < 2:
        return perm, perm
    n_train = min(max(1, int(round(train_frac * n))), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def train(config: ResNetConfig, images: np.ndarray, labels: np.ndarray, *, lr: float = 1e-5,
          batch_size: int = 128, patience: int = 5, max_epochs: int = 50, seed: int = 0,
          train_frac: float = 0.7, workers: int = 1, dtype=np.float32,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on the summed cross-entropy with early stopping on validation loss.

    The returned model is the snapshot with the smallest validation loss;
    epoch 0 is the untrained initialization. Training stops once
    ``patience`` consecutive epochs fail to improve on the best.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("dataset is empty")
    tr, va = split_indices(len(labels), seed, train_frac)
    model = ResNetModel.init(config, seed, dtype)
    state = AdamState.zeros(model.params)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C]))

    def val_metrics(m):
        return evaluate(m, images[va], labels[va])

    tr_loss0, _ = evaluate(model, images[tr], labels[tr])
    v_loss, v_acc = val_metrics(model)
    history = [{"epoch": 0, "train_loss": tr_loss0, "val_loss": v_loss, "val_acc": v_acc}]
    if on_epoch:
        on_epoch(history[-1])
    best = (v_loss, 0, model.copy())
    since_best = 0
    epoch = 0
    while since_best < patience and epoch < max_epochs:
        epoch += 1
        order = tr[rng.permutation(len(tr))]
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = np.sort(order[s:s + batch_size])
            loss, grads = loss_and_grads(model, images[idx], labels[idx], workers=workers)
            adam_step(model.params, grads, state, lr)
            total += loss
        v_loss, v_acc = val_metrics(model)
        history.append({"epoch": epoch, "train_loss": total / len(order), "val_loss": v_loss,
                        "val_acc": v_acc})
        if on_epoch:
            on_epoch(history[-1])
        if v_loss < best[0]:
            best = (v_loss, epoch, model.copy())
            since_best = 0
        else:
            since_best += 1
    out = best[2]
    out.metadata.update({"best_epoch": best[1], "epochs_run": epoch, "lr": lr,
                         "batch_size": batch_size, "patience": patience,
                         "n_train": int(len(tr)), "n_val": int(len(va))})
    return TrainResult(out, history, best[1])


def ensemble_predict(models: Sequence[ResNetModel], images: np.ndarray, batch: int = 256):
    """Average class probabilities across models; ``y_hat = 1`` iff mean P1 > mean P0."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    pbar = np.mean([predict(m, x, batch) for m in models], axis=0)
    yhat = (pbar[:, 1] > pbar[:, 0]).astype(np.int64)
    return (pbar[0], int(yhat[0])) if single else (pbar, yhat)


# ---------------------------------------------------------------------------
# checkpoints

def _ckpt_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".bin") else path
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_checkpoint(model: ResNetModel, path: str | Path, **header) -> tuple[Path, Path]:
    """JSON manifest plus little-endian tensor blob (f32, or f64 for float64 models)."""
    jpath, bpath = _ckpt_paths(path)
    code = "f64" if model.dtype == np.float64 else "f32"
    dt = np.dtype("<f8") if code == "f64" else np.dtype("<f4")
    table, offset, chunks = [], 0, []
    for kind, store in (("param", model.params), ("buffer", model.buffers)):
        for name, arr in store.items():
            a = np.ascontiguousarray(arr, dtype=dt)
            table.append({"name": name, "kind": kind, "shape": list(a.shape), "offset": offset,
                          "count": int(a.size)})
            chunks.append(a.tobytes())
            offset += a.nbytes
    manifest = {"format": "twma-checkpoint", "version": 1, "dtype": code, "endian": "little",
                "order": "row-major", "config": model.config.to_dict(), "seed": model.seed,
                "metadata": model.metadata, "tensors": table, **header}
    bpath.write_bytes(b"".join(chunks))
    jpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return jpath, bpath


def load_checkpoint(path: str | Path) -> ResNetModel:
    jpath, bpath = _ckpt_paths(path)
    manifest = json.loads(jpath.read_text())
    dt = np.dtype("<f8") if manifest["dtype"] == "f64" else np.dtype("<f4")
    blob = bpath.read_bytes()
    params, buffers = {}, {}
    for entry in manifest["tensors"]:
        a = np.frombuffer(blob, dtype=dt, count=entry["count"], offset=entry["offset"])
        a = a.reshape(entry["shape"]).astype(dt.newbyteorder("="), copy=True)
        (params if entry["kind"] == "param" else buffers)[entry["name"]] = a
    cfg = ResNetConfig.from_dict(manifest["config"])
    return ResNetModel(cfg, params, buffers, manifest.get("seed"), manifest.get("metadata", {}))


def read_manifest(path: str | Path) -> dict:
    return json.loads(_ckpt_paths(path)[0].read_text())


def write_history(history: Iterable[dict], path: str | Path, header: str | None = None) -> None:
    with Path(path).open("w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("epoch,train_loss,val_loss,val_acc\n")
        for h in history:
            fh.write(f"{h['epoch']},{h['train_loss']!r},{h['val_loss']!r},{h['val_acc']!r}\n")
