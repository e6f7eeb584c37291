"""Small score-based image classifier with hand-written reverse mode.

Inputs are NHWC float64 stacks in [0, 1].  A :class:`ScoreModel` is a list of
layers; each layer's ``forward`` returns its output plus whatever it needs for
``backward``.  Only the conv layers are heavy, and those go through
:mod:`ssimadv.kernels`.
"""

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SSIMADV\x00"
CHECKPOINT_VERSION = 1


class Conv2D:
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, rng=None):
        self.stride = int(stride)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = kernel * kernel * in_channels
        self.weight = rng.standard_normal((kernel, kernel, in_channels, out_channels)) * np.sqrt(2.0 / fan_in)
        self.bias = np.zeros(out_channels)

    def params(self):
        return [self.weight, self.bias]

    def config(self):
        return {"type": self.kind, "stride": self.stride}

    def output_shape(self, shape):
        h, w, _ = shape
        k = self.weight.shape[0]
        return ((h - k) // self.stride + 1, (w - k) // self.stride + 1, self.weight.shape[3])

    def forward(self, x):
        return kernels.conv2d_forward(x, self.weight, self.bias, self.stride), x

    def backward(self, dy, cache, param_grads):
        x = cache
        dy = np.ascontiguousarray(dy)
        dx = kernels.conv2d_backward_input(dy, self.weight, x.shape, self.stride)
        if not param_grads:
            return dx, None
        return dx, list(kernels.conv2d_backward_weight(dy, x, self.weight.shape, self.stride))


class Dense:
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, scale=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = np.sqrt(2.0 / in_features) if scale is None else scale
        self.weight = rng.standard_normal((in_features, out_features)) * scale
        self.bias = np.zeros(out_features)

    def params(self):
        return [self.weight, self.bias]

    def config(self):
        return {"type": self.kind}

    def output_shape(self, shape):
        return (self.weight.shape[1],)

    def forward(self, x):
        return x @ self.weight + self.bias, x

    def backward(self, dy, cache, param_grads):
        dx = dy @ self.weight.T
        if not param_grads:
            return dx, None
        return dx, [cache.T @ dy, dy.sum(axis=0)]


class ReLU:
    kind = "relu"

    def params(self):
        return []

    def config(self):
        return {"type": self.kind}

    def output_shape(self, shape):
        return shape

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dy, cache, param_grads):
        # subgradient at 0 is 0
        return np.where(cache, dy, 0.0), ([] if param_grads else None)


class Flatten:
    kind = "flatten"

    def params(self):
        return []

    def config(self):
        return {"type": self.kind}

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, param_grads):
        return dy.reshape(cache), ([] if param_grads else None)


_LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, Dense, ReLU, Flatten)}


class ScoreModel:
    """A stack of layers producing one score per class.

    ``input_shape`` is ``(H, W, C)``.  ``forward`` accepts a single image or
    a stack; ``predict`` breaks argmax ties toward the lowest class index.
    """

    def __init__(self, layers: Sequence, input_shape, n_classes: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n_classes = int(n_classes)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.n_classes,):
            raise ValueError(f"layer stack produces {shape}, expected ({self.n_classes},)")

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape} does not match model input {self.input_shape}")
        return np.ascontiguousarray(x), single

    def forward_cached(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, dscores, param_grads=False):
        """Propagate ``dscores`` back; returns ``(d_input, per-layer param grads)``."""
        grads = []
        d = dscores
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            d, g = layer.backward(d, cache, param_grads)
            grads.append(g)
        grads.reverse()
        return d, grads

    def forward(self, x) -> np.ndarray:
        xb, single = self._batch(x)
        scores, _ = self.forward_cached(xb)
        return scores[0] if single else scores

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x), axis=-1)

    def input_gradient(self, x, objective: Callable):
        """Gradient of a scalar function of the scores with respect to the input.

        ``objective(scores)`` must return ``(value, d value / d scores)`` for a
        single score vector.  For a stack of images the objective is applied
        per image and the per-image gradients are returned.
        """
        xb, single = self._batch(x)
        scores, caches = self.forward_cached(xb)
        dscores = np.empty_like(scores)
        for i, s in enumerate(scores):
            _, dscores[i] = objective(s)
        dx, _ = self.backward(caches, dscores)
        return dx[0] if single else dx

    def params(self) -> list:
        return [p for layer in self.layers for p in layer.params()]

    def copy(self) -> "ScoreModel":
        buf = io.BytesIO()
        save_checkpoint(self, buf, cast=False)
        buf.seek(0)
        return load_checkpoint(buf)


def score_objective(k: int):
    """Objective picking out the score of class ``k``."""
    def objective(scores):
        g = np.zeros_like(scores)
        g[k] = 1.0
        return scores[k], g
    return objective


def linear_objective(weights):
    weights = np.asarray(weights, dtype=np.float64)

    def objective(scores):
        return float(scores @ weights), weights.copy()
    return objective


def build_desk_model(input_shape=(28, 28, 1), n_classes=10, seed=0) -> ScoreModel:
    """Two stride-2 3x3 convs (16, 32 filters), a 64-unit dense layer, linear head."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    conv1 = Conv2D(c, 16, 3, stride=2, rng=rng)
    conv2 = Conv2D(16, 32, 3, stride=2, rng=rng)
    flat = int(np.prod(conv2.output_shape(conv1.output_shape(input_shape))))
    layers = [conv1, ReLU(), conv2, ReLU(), Flatten(),
              Dense(flat, 64, rng=rng), ReLU(), Dense(64, n_classes, rng=rng)]
    return ScoreModel(layers, input_shape, n_classes)


def build_cleverhans_model(input_shape=(28, 28, 1), n_classes=10, seed=0) -> ScoreModel:
    """Larger preset: 64/128/256-filter 3x3 convs and a 128-unit dense layer."""
    rng = np.random.default_rng(seed)
    c = input_shape[2]
    convs = [Conv2D(c, 64, 3, 1, rng), Conv2D(64, 128, 3, 2, rng), Conv2D(128, 256, 3, 2, rng)]
    shape = input_shape
    layers = []
    for conv in convs:
        shape = conv.output_shape(shape)
        layers += [conv, ReLU()]
    flat = int(np.prod(shape))
    layers += [Flatten(), Dense(flat, 128, rng=rng), ReLU(), Dense(128, n_classes, rng=rng)]
    return ScoreModel(layers, input_shape, n_classes)


ARCHITECTURES = {"desk": build_desk_model, "cleverhans": build_cleverhans_model}


# ---------------------------------------------------------------------------
# training


def softmax_xent(scores, labels):
    """Mean softmax cross-entropy and its gradient with respect to the scores."""
    z = scores - scores.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = scores.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 50
    learning_rate: float = 0.01
    momentum: float = 0.9
    adversarial: bool = True
    pgd_steps: int = 10
    pgd_epsilon: float = 0.3
    pgd_loss: str = "xent"
    warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.adversarial and not 0.0 <= self.pgd_epsilon <= 1.0:
            raise ValueError("pgd_epsilon must lie in [0, 1]")
        if self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1")


def accuracy(model: ScoreModel, images, labels, batch=500) -> float:
    labels = np.asarray(labels)
    correct = 0
    for i in range(0, len(labels), batch):
        correct += int((model.predict(images[i:i + batch]) == labels[i:i + batch]).sum())
    return correct / max(len(labels), 1)


def train(model: ScoreModel, images, labels, cfg: TrainConfig = TrainConfig(),
          callback: Optional[Callable] = None) -> ScoreModel:
    """Train ``model`` in place with SGD + momentum on softmax cross-entropy.

    With ``cfg.adversarial`` every batch is doubled with PGD versions of its
    images (1:1 clean/adversarial).  The first ``warmup_epochs`` epochs are
    clean only.  Returns the model.
    """
    from .attacks import PgdConfig, pgd_perturb

    images = np.ascontiguousarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty training set")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    if labels.min() < 0 or labels.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")

    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    pgd_cfg = None
    if cfg.adversarial:
        eps = cfg.pgd_epsilon
        pgd_cfg = PgdConfig(epsilon=eps, steps=cfg.pgd_steps,
                            step_size=eps / 4 if eps > 0 else 1.0, loss=cfg.pgd_loss)

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            if pgd_cfg is not None and epoch >= cfg.warmup_epochs:
                adv = pgd_perturb(model, xb, yb, pgd_cfg)
                xb = np.concatenate([xb, adv])
                yb = np.concatenate([yb, yb])
            scores, caches = model.forward_cached(xb)
            loss, dscores = softmax_xent(scores, yb)
            _, grads = model.backward(caches, dscores, param_grads=True)
            flat_grads = [g for layer_g in grads for g in layer_g]
            for p, v, g in zip(params, velocity, flat_grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v
            total += loss * len(idx)
        logger.info("epoch %d/%d  loss %.4f", epoch + 1, cfg.epochs, total / len(labels))
        if callback is not None:
            callback(epoch, total / len(labels))
    return model


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"SSIMADV\0"
#   u32       format version
#   u32       header length L
#   L bytes   UTF-8 JSON: {"input_shape", "n_classes", "dtype": "<f4",
#             "layers": [{"type", ...config, "params": [shape, ...]}, ...]}
#   then every parameter array in layer order, row-major, little-endian float32


def save_checkpoint(model: ScoreModel, fp, cast=True):
    """Write ``model`` to a path or binary file object."""
    if not hasattr(fp, "write"):
        with open(fp, "wb") as fh:
            return save_checkpoint(model, fh, cast)
    dtype = "<f4" if cast else "<f8"
    header = {
        "input_shape": list(model.input_shape),
        "n_classes": model.n_classes,
        "dtype": dtype,
        "layers": [dict(layer.config(), params=[list(p.shape) for p in layer.params()])
                   for layer in model.layers],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    fp.write(CHECKPOINT_MAGIC)
    fp.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    fp.write(blob)
    for p in model.params():
        fp.write(np.ascontiguousarray(p, dtype=dtype).tobytes())


def load_checkpoint(fp) -> ScoreModel:
    if not hasattr(fp, "read"):
        with open(fp, "rb") as fh:
            return load_checkpoint(fh)
    if fp.read(8) != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", fp.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(fp.read(hlen).decode())
    dtype = np.dtype(header["dtype"])
    layers = []
    for spec in header["layers"]:
        kind = spec["type"]
        arrays = []
        for shape in spec["params"]:
            count = int(np.prod(shape))
            raw = fp.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError("truncated checkpoint")
            arrays.append(np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(shape))
        if kind == "conv2d":
            w, b = arrays
            layer = Conv2D(w.shape[2], w.shape[3], w.shape[0], spec["stride"])
            layer.weight, layer.bias = np.ascontiguousarray(w), b
        elif kind == "dense":
            w, b = arrays
            layer = Dense(w.shape[0], w.shape[1], scale=0.0)
            layer.weight, layer.bias = w, b
        elif kind in _LAYER_TYPES:
            layer = _LAYER_TYPES[kind]()
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        layers.append(layer)
    return ScoreModel(layers, header["input_shape"], header["n_classes"])


def quantize(model: ScoreModel) -> ScoreModel:
    """Round parameters to float32 so the in-memory model equals its checkpoint."""
    for p in model.params():
        p[...] = p.astype(np.float32)
    return model
