"""A small convolutional network written directly in numpy.

Activations are laid out ``[batch, height, width, channels]`` with height the
time axis and width the mel axis. Everything is float64.
"""

from __future__ import annotations

import copy
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dsp import FeatureConfig, NormStats
from .errors import (
    ArchitectureError,
    DivergenceError,
    LabelError,
    ModelChecksumError,
    ModelFileError,
    ModelTruncatedError,
    ModelVersionError,
    ShapeError,
)
from .segments import NONSPEECH, SPEECH

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
MODEL_MAGIC = b"FSNN"
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Conv2D:
    kind = "conv2d"

    def __init__(self, n_filters: int, mask: tuple[int, int] = (5, 5), stride: int = 1, relu: bool = True):
        self.n_filters = n_filters
        self.mask = tuple(mask)
        self.stride = stride
        self.relu = relu

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        kh, kw = self.mask
        ho, wo = (h - kh) // self.stride + 1, (w - kw) // self.stride + 1
        if h < kh or w < kw or ho < 1 or wo < 1:
            raise ArchitectureError(f"{kh}x{kw} mask does not fit a {h}x{w} input")
        return ho, wo, self.n_filters

    def param_shapes(self, in_shape):
        return [(self.n_filters, in_shape[2]) + self.mask, (self.n_filters,)]

    def init_params(self, in_shape, rng):
        w_shape, b_shape = self.param_shapes(in_shape)
        fan_in = int(np.prod(w_shape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        return [rng.uniform(-limit, limit, w_shape), np.zeros(b_shape)]

    def forward(self, x, params):
        w, b = params
        n = x.shape[0]
        s = self.stride
        win = sliding_window_view(x, self.mask, axis=(1, 2))[:, ::s, ::s]
        ho, wo = win.shape[1:3]
        cols = win.reshape(n * ho * wo, -1)
        y = cols @ w.reshape(self.n_filters, -1).T
        y += b
        y = y.reshape(n, ho, wo, self.n_filters)
        mask = None
        if self.relu:
            mask = y > 0
            np.maximum(y, 0.0, out=y)
        return y, {"cols": cols, "mask": mask, "in_shape": x.shape}

    def backward(self, dy, cache, params, need_dx=True):
        w, _ = params
        if self.relu:
            dy = dy * cache["mask"]
        dy2 = dy.reshape(-1, self.n_filters)
        dw = (cache["cols"].T @ dy2).T.reshape(w.shape)
        db = dy2.sum(axis=0)
        dx = None
        if need_dx:
            n, h, wd, c = cache["in_shape"]
            _, ho, wo, _ = dy.shape
            kh, kw = self.mask
            s = self.stride
            taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
            dx = np.zeros(cache["in_shape"])
            for i in range(kh):
                for j in range(kw):
                    tap = (dy2 @ taps[i, j]).reshape(n, ho, wo, c)
                    dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += tap
        return dx, [dw, db]

    def hyper(self):
        return [self.n_filters, self.mask[0], self.mask[1], self.stride]


class MaxPool2D:
    kind = "maxpool2d"
    relu = False

    def __init__(self, window: tuple[int, int] = (3, 3), stride: tuple[int, int] | None = None):
        self.window = tuple(window)
        self.stride = tuple(stride) if stride is not None else self.window

    def output_shape(self, in_shape):
        h, w, c = in_shape
        (ph, pw), (sh, sw) = self.window, self.stride
        if h < ph or w < pw:
            raise ArchitectureError(f"{ph}x{pw} pooling window does not fit a {h}x{w} input")
        return (h - ph) // sh + 1, (w - pw) // sw + 1, c

    def param_shapes(self, in_shape):
        return []

    def init_params(self, in_shape, rng):
        return []

    def forward(self, x, params):
        (ph, pw), (sh, sw) = self.window, self.stride
        win = sliding_window_view(x, self.window, axis=(1, 2))[:, ::sh, ::sw]
        flat = win.reshape(win.shape[:4] + (ph * pw,))
        # argmax returns the first maximum in row-major window order
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return y, {"argmax": arg, "in_shape": x.shape}

    def backward(self, dy, cache, params, need_dx=True):
        if not need_dx:
            return None, []
        (ph, pw), (sh, sw) = self.window, self.stride
        _, ho, wo, _ = dy.shape
        arg = cache["argmax"]
        dx = np.zeros(cache["in_shape"])
        for i in range(ph):
            for j in range(pw):
                dx[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += dy * (arg == i * pw + j)
        return dx, []

    def hyper(self):
        return [*self.window, *self.stride]


class Flatten:
    kind = "flatten"
    relu = False

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def param_shapes(self, in_shape):
        return []

    def init_params(self, in_shape, rng):
        return []

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), {"in_shape": x.shape}

    def backward(self, dy, cache, params, need_dx=True):
        return (dy.reshape(cache["in_shape"]) if need_dx else None), []

    def hyper(self):
        return []


class Dense:
    kind = "dense"

    def __init__(self, n_out: int, relu: bool = True):
        self.n_out = n_out
        self.relu = relu

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ArchitectureError(f"dense layer needs a flat input, got {in_shape}")
        return (self.n_out,)

    def param_shapes(self, in_shape):
        return [(in_shape[0], self.n_out), (self.n_out,)]

    def init_params(self, in_shape, rng):
        w_shape, b_shape = self.param_shapes(in_shape)
        limit = np.sqrt(6.0 / w_shape[0])
        return [rng.uniform(-limit, limit, w_shape), np.zeros(b_shape)]

    def forward(self, x, params):
        w, b = params
        y = x @ w
        y += b
        mask = None
        if self.relu:
            mask = y > 0
            np.maximum(y, 0.0, out=y)
        return y, {"x": x, "mask": mask}

    def backward(self, dy, cache, params, need_dx=True):
        w, _ = params
        if self.relu:
            dy = dy * cache["mask"]
        dw = cache["x"].T @ dy
        db = dy.sum(axis=0)
        return (dy @ w.T if need_dx else None), [dw, db]

    def hyper(self):
        return [self.n_out]


class SoftmaxOutput(Dense):
    """Affine map followed by softmax.

    ``backward`` takes the gradient with respect to the logits, which the loss
    computes in closed form.
    """

    kind = "softmax-output"

    def __init__(self, n_out: int):
        super().__init__(n_out, relu=False)

    def forward(self, x, params):
        logits, cache = super().forward(x, params)
        return softmax(logits), cache


LAYER_KINDS = {1: Conv2D, 2: MaxPool2D, 3: Flatten, 4: Dense, 5: SoftmaxOutput}
_KIND_CODES = {cls.kind: code for code, cls in LAYER_KINDS.items()}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    # keep every posterior strictly positive even when exp underflows
    return np.maximum(p, np.finfo(np.float64).tiny)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class CnnModel:
    task: str
    layers: list
    params: list[list[np.ndarray]]
    input_geometry: tuple[int, int]
    class_labels: list[str]
    feature_config: FeatureConfig = field(default_factory=FeatureConfig)
    norm_stats: NormStats | None = None

    def __post_init__(self):
        if self.norm_stats is None:
            self.norm_stats = NormStats.identity(self.input_geometry[1])

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    def param_names(self) -> list[list[str]]:
        names = []
        for i, layer in enumerate(self.layers):
            suffixes = ("weight", "bias")[:len(self.params[i])]
            names.append([f"layer{i + 1}.{layer.kind}.{s}" for s in suffixes])
        return names

    def copy_params(self) -> list[list[np.ndarray]]:
        return [[p.copy() for p in ps] for ps in self.params]

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return forward(self, x, batch_size=batch_size)


def chain_shapes(layers: Sequence, input_geometry: tuple[int, int]) -> list[tuple]:
    """Input shape of every layer followed by the final output shape."""
    shapes = [(input_geometry[0], input_geometry[1], 1)]
    for i, layer in enumerate(layers, 1):
        try:
            shapes.append(layer.output_shape(shapes[-1]))
        except ArchitectureError as exc:
            raise ArchitectureError(f"layer {i} ({layer.kind}): {exc}") from None
    return shapes


def assemble(task, layers, input_geometry, class_labels, seed=0, feature_config=None, norm_stats=None) -> CnnModel:
    """Check that ``layers`` chain over ``input_geometry`` and draw initial weights."""
    shapes = chain_shapes(layers, input_geometry)
    if shapes[-1] != (len(class_labels),):
        raise ArchitectureError(f"output width {shapes[-1]} does not match {len(class_labels)} class labels")
    rng = np.random.default_rng(seed)
    params = [layer.init_params(shape, rng) for layer, shape in zip(layers, shapes)]
    return CnnModel(task, list(layers), params, tuple(input_geometry), list(class_labels),
                    feature_config or FeatureConfig(), norm_stats)


def build_architecture(task: str, input_geometry: tuple[int, int], n_classes: int | None = None,
                       class_labels: Sequence[str] | None = None, seed: int = 0,
                       feature_config: FeatureConfig | None = None) -> CnnModel:
    """conv(32, 5x5) -> maxpool(3x3) -> conv(32, 5x5) -> flatten -> dense -> softmax.

    The hidden dense layer has 64 units for SAD and 500 for SID. SAD models
    default to the labels (speech, nonspeech).
    """
    if task not in ("sad", "sid"):
        raise ValueError(f"unknown task {task!r}")
    if class_labels is None:
        if task == "sad" and n_classes in (None, 2):
            class_labels = [SPEECH, NONSPEECH]
        elif n_classes is None:
            raise ValueError("need n_classes or class_labels")
        else:
            class_labels = [str(i) for i in range(n_classes)]
    hidden = 64 if task == "sad" else 500
    layers = [
        Conv2D(32, (5, 5)),
        MaxPool2D((3, 3)),
        Conv2D(32, (5, 5)),
        Flatten(),
        Dense(hidden),
        SoftmaxOutput(len(class_labels)),
    ]
    if feature_config is None:
        feature_config = FeatureConfig.sad() if task == "sad" else FeatureConfig.sid()
    return assemble(task, layers, input_geometry, class_labels, seed, feature_config)


def _check_input(model: CnnModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[..., None]
    if x.shape[1:3] != tuple(model.input_geometry) or x.shape[3] != 1:
        raise ShapeError(f"input geometry {x.shape[1:]} does not match model geometry {model.input_geometry}")
    return x


def forward_with_cache(model: CnnModel, x: np.ndarray):
    """Posteriors plus the per-layer caches ``backward`` needs."""
    h = _check_input(model, x)
    caches = []
    for layer, params in zip(model.layers, model.params):
        h, cache = layer.forward(h, params)
        caches.append(cache)
    return h, caches


def forward(model: CnnModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class posteriors ``[batch, n_classes]``; evaluated ``batch_size`` rows at a time."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if len(x) <= batch_size:
        return forward_with_cache(model, x)[0]
    return np.concatenate([forward_with_cache(model, x[i:i + batch_size])[0]
                           for i in range(0, len(x), batch_size)])


def cross_entropy(posteriors: np.ndarray, labels: np.ndarray, class_weights=None) -> float:
    """Mean over the batch of ``-w[y] * log(max(p[y], 1e-12))``."""
    labels = _check_labels(labels, posteriors.shape[1])
    p = posteriors[np.arange(len(labels)), labels]
    w = 1.0 if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    return float(np.mean(-w * np.log(np.maximum(p, PROB_FLOOR))))


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"label index out of range [0, {n_classes})")
    return labels


def backward(model: CnnModel, x: np.ndarray, labels: np.ndarray, class_weights=None):
    """Gradients of the mean weighted cross-entropy, one list per layer.

    Returns ``(grads, loss, posteriors)``.
    """
    probs, caches = forward_with_cache(model, x)
    labels = _check_labels(labels, model.n_classes)
    n = len(labels)
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    loss = float(np.mean(-w * np.log(np.maximum(probs[np.arange(n), labels], PROB_FLOOR))))
    # softmax + cross-entropy gradient; the probability clamp only guards the loss value
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d *= (w / n)[:, None]
    grads: list[list[np.ndarray]] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        d, grads[i] = layer.backward(d, caches[i], model.params[i], need_dx=i > 0)
    return grads, loss, probs


def input_gradient(model: CnnModel, x: np.ndarray, labels: np.ndarray, class_weights=None) -> np.ndarray:
    """Gradient of the loss with respect to the input chunk values."""
    probs, caches = forward_with_cache(model, x)
    labels = _check_labels(labels, model.n_classes)
    n = len(labels)
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d *= (w / n)[:, None]
    for i in range(len(model.layers) - 1, -1, -1):
        d, _ = model.layers[i].backward(d, caches[i], model.params[i], need_dx=True)
    return d[..., 0]


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 20
    early_stop_patience: int = 5
    seed: int = 0
    class_weights: str | Sequence[float] | None = None  # None, "inverse" or explicit weights
    min_train_loss: float | None = None  # stop once an epoch's training loss drops below this

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("max_epochs and early_stop_patience must be >= 1")


@dataclass
class AdamState:
    m: list[list[np.ndarray]]
    v: list[list[np.ndarray]]

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([[np.zeros_like(p) for p in ps] for ps in params],
                   [[np.zeros_like(p) for p in ps] for ps in params])


def adam_step(params, grads, state: AdamState, t: int, cfg: TrainConfig):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for ps, gs, ms, vs in zip(params, grads, state.m, state.v):
        for p, g, m, v in zip(ps, gs, ms, vs):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)
    return params, state


def inverse_frequency_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """``n / (n_classes * count_c)``; classes absent from ``labels`` get weight 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    w = np.ones(n_classes)
    present = counts > 0
    w[present] = counts.sum() / (n_classes * counts[present])
    return w


def resolve_class_weights(spec, labels, n_classes):
    if spec is None or spec == "none":
        return None
    if spec == "inverse":
        return inverse_frequency_weights(labels, n_classes)
    w = np.asarray(spec, dtype=np.float64)
    if w.shape != (n_classes,):
        raise ValueError(f"class_weights needs {n_classes} entries")
    return w


class EarlyStopping:
    """Tracks the best validation loss and says when patience has run out."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record ``val_loss`` for ``epoch``; True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def improved_at(self, epoch: int) -> bool:
        return self.best_epoch == epoch


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


def evaluate(model: CnnModel, x, y, class_weights=None, batch_size: int = 256) -> tuple[float, float]:
    """Mean loss and accuracy over ``(x, y)``."""
    y = np.asarray(y, dtype=np.int64)
    total, correct = 0.0, 0
    for i in range(0, len(y), batch_size):
        idx = np.arange(i, min(i + batch_size, len(y)))
        p = forward_with_cache(model, x[idx])[0]
        total += cross_entropy(p, y[idx], class_weights) * len(idx)
        correct += int(np.sum(p.argmax(axis=1) == y[idx]))
    return total / len(y), correct / len(y)


def train(model: CnnModel, x_train, y_train, x_val, y_val, cfg: TrainConfig, progress=None):
    """Mini-batch Adam with per-epoch shuffling and validation early stopping.

    ``x_train``/``x_val`` may be arrays or anything indexable by an integer
    array (e.g. ``dsp.ChunkIndex``). Returns ``(model, history)`` where the
    model carries the weights of the best validation epoch.
    """
    y_train = np.asarray(y_train, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if len(y_train) == 0 or len(y_val) == 0:
        raise ValueError("training and validation sets must both be non-empty")
    weights = resolve_class_weights(cfg.class_weights, y_train, model.n_classes)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(model.params)
    stopper = EarlyStopping(cfg.early_stop_patience)
    best = model.copy_params()
    history: list[EpochRecord] = []
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(y_train))
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size), 1):
            idx = order[start:start + cfg.batch_size]
            grads, loss, probs = backward(model, x_train[idx], y_train[idx], weights)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            step += 1
            adam_step(model.params, grads, state, step, cfg)
            loss_sum += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == y_train[idx]))
        val_loss, val_acc = evaluate(model, x_val, y_val)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, loss_sum / len(order), correct / len(order), val_loss, val_acc)
        history.append(rec)
        log.info("epoch %d train_loss=%.5f train_acc=%.4f val_loss=%.5f val_acc=%.4f",
                 epoch, rec.train_loss, rec.train_accuracy, rec.val_loss, rec.val_accuracy)
        if progress is not None:
            progress(rec)
        stop = stopper.update(epoch, val_loss)
        if stopper.improved_at(epoch):
            best = model.copy_params()
        if stop or (cfg.min_train_loss is not None and rec.train_loss < cfg.min_train_loss):
            break
    model.params = best
    return model, history


def write_history(path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("epoch\ttrain_loss\ttrain_accuracy\tval_loss\tval_accuracy\n")
        for r in history:
            f.write(f"{r.epoch}\t{r.train_loss:.6f}\t{r.train_accuracy:.6f}\t{r.val_loss:.6f}\t{r.val_accuracy:.6f}\n")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _pack_str(s: str, fmt: str = "<I") -> bytes:
    b = s.encode("utf-8")
    return struct.pack(fmt, len(b)) + b


def model_to_bytes(model: CnnModel) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION), _pack_str(model.task, "<B")]
    out.append(struct.pack("<I", len(model.class_labels)))
    out += [_pack_str(lbl) for lbl in model.class_labels]
    cfg = model.feature_config.as_tuple()
    out.append(struct.pack(f"<I{len(cfg)}d", len(cfg), *cfg))
    out.append(struct.pack("<II", *model.input_geometry))
    n = len(model.norm_stats.mean)
    out.append(struct.pack("<I", n))
    out.append(np.asarray(model.norm_stats.mean, dtype="<f8").tobytes())
    out.append(np.asarray(model.norm_stats.std, dtype="<f8").tobytes())
    out.append(struct.pack("<I", len(model.layers)))
    for layer, params, names in zip(model.layers, model.params, model.param_names()):
        hyper = layer.hyper()
        out.append(struct.pack(f"<BBI{len(hyper)}I", _KIND_CODES[layer.kind], int(bool(layer.relu)),
                               len(hyper), *hyper))
        out.append(struct.pack("<I", len(params)))
        for name, p in zip(names, params):
            out.append(_pack_str(name, "<H"))
            out.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
            out.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(model: CnnModel, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


class _Reader:
    def __init__(self, data: bytes, end: int, source: str):
        self.data, self.pos, self.end, self.source = data, 0, end, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise ModelTruncatedError(f"{self.source}: file truncated while reading {what} at byte {self.pos}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, fmt: str, what: str) -> str:
        (n,) = self.unpack(fmt, what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise ModelFileError(f"{self.source}: {what} is not valid UTF-8") from None


def model_from_bytes(data: bytes, source: str = "<bytes>") -> CnnModel:
    if data[:4] != MODEL_MAGIC:
        raise ModelFileError(f"{source}: bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
    r = _Reader(data, max(len(data) - 4, 0), source)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != MODEL_VERSION:
        raise ModelVersionError(f"{source}: model file version {version}, this build reads {MODEL_VERSION}")
    task = r.string("<B", "task tag")
    (n_labels,) = r.unpack("<I", "class-label count")
    labels = [r.string("<I", f"class label {i}") for i in range(n_labels)]
    (n_cfg,) = r.unpack("<I", "feature config size")
    cfg = FeatureConfig.from_tuple(r.unpack(f"<{n_cfg}d", "feature config"))
    geometry = r.unpack("<II", "input geometry")
    (n_mels,) = r.unpack("<I", "norm stats size")
    mean = np.frombuffer(r.take(8 * n_mels, "norm mean"), dtype="<f8").astype(np.float64)
    std = np.frombuffer(r.take(8 * n_mels, "norm std"), dtype="<f8").astype(np.float64)
    (n_layers,) = r.unpack("<I", "layer count")
    layers, params = [], []
    for li in range(1, n_layers + 1):
        code, relu, n_hyper = r.unpack("<BBI", f"layer {li} header")
        hyper = r.unpack(f"<{n_hyper}I", f"layer {li} hyperparameters")
        layers.append(_layer_from_code(code, relu, hyper, source))
        (n_tensors,) = r.unpack("<I", f"layer {li} tensor count")
        ps = []
        for _ in range(n_tensors):
            name = r.string("<H", f"layer {li} tensor name")
            (rank,) = r.unpack("<I", f"tensor {name} rank")
            dims = r.unpack(f"<{rank}I", f"tensor {name} dims")
            count = int(np.prod(dims)) if rank else 1
            raw = r.take(8 * count, f"tensor {name}")
            ps.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims))
        params.append(ps)
    if r.pos != len(data) - 4:
        raise ModelFileError(f"{source}: {len(data) - 4 - r.pos} unexpected bytes before the checksum")
    (crc,) = struct.unpack_from("<I", data, r.pos)
    if crc != zlib.crc32(data[:r.pos]):
        raise ModelChecksumError(f"{source}: CRC-32 mismatch (stored {crc:#010x})")
    shapes = chain_shapes(layers, geometry)
    for li, (layer, shape, ps) in enumerate(zip(layers, shapes, params), 1):
        expected = [tuple(s) for s in layer.param_shapes(shape)]
        if [p.shape for p in ps] != expected:
            raise ModelFileError(f"{source}: layer {li} tensors {[p.shape for p in ps]} != expected {expected}")
    if shapes[-1] != (len(labels),):
        raise ModelFileError(f"{source}: output width {shapes[-1]} does not match {len(labels)} labels")
    return CnnModel(task, layers, params, tuple(geometry), labels, cfg, NormStats(mean, std))


def _layer_from_code(code, relu, hyper, source):
    try:
        if code == 1:
            return Conv2D(hyper[0], (hyper[1], hyper[2]), hyper[3], relu=bool(relu))
        if code == 2:
            return MaxPool2D((hyper[0], hyper[1]), (hyper[2], hyper[3]))
        if code == 3:
            return Flatten()
        if code == 4:
            return Dense(hyper[0], relu=bool(relu))
        if code == 5:
            return SoftmaxOutput(hyper[0])
    except IndexError:
        raise ModelFileError(f"{source}: layer kind {code} has too few hyperparameters") from None
    raise ModelFileError(f"{source}: unknown layer kind {code}")


def load_model(path: str | Path) -> CnnModel:
    path = Path(path)
    return model_from_bytes(path.read_bytes(), str(path))


def clone(model: CnnModel) -> CnnModel:
    return copy.deepcopy(model)
