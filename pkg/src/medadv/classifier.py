"""
Small convolutional classifiers: configuration, initialization, training,
prediction and named-layer activations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .tensorio import load_named_tensors, save_named_tensors

LAYER_KINDS = ("conv", "relu", "maxpool", "gap", "flatten", "dense")


@dataclass(frozen=True)
class LayerSpec:
    """One primitive layer. ``tap`` names the layer's output for later lookup."""

    kind: str
    units: int = 0  # output channels (conv) or width (dense)
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    tap: str | None = None
    trainable: bool = True


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (32, 32, 3)
    num_classes: int = 2
    layers: tuple = ()
    penultimate_width: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(
            self, "layers", tuple(l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers)
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    flip: bool = True
    shift: int = 2
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.shift < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and shift >= 0 required")


@dataclass
class Model:
    config: ModelConfig
    params: dict
    epochs_run: int = 0
    clean_accuracy: float | None = None
    loss_history: list = field(default_factory=list)

    @property
    def frozen(self) -> set:
        return set(_param_layout(self.config)[1])

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def reference_recipe(num_classes: int = 2, input_shape=(32, 32, 3), width: int = 128, seed: int = 0) -> ModelConfig:
    """Three conv/ReLU stages, global average pooling, a ReLU dense layer and the logits."""
    layers = (
        LayerSpec("conv", 16, 3, 1, 1),
        LayerSpec("relu", tap="relu1"),
        LayerSpec("maxpool"),
        LayerSpec("conv", 32, 3, 1, 1),
        LayerSpec("relu", tap="relu2"),
        LayerSpec("maxpool"),
        LayerSpec("conv", 64, 3, 1, 1),
        LayerSpec("relu", tap="relu3"),
        LayerSpec("gap"),
        LayerSpec("dense", width),
        LayerSpec("relu", tap="penultimate"),
        LayerSpec("dense", num_classes, tap="logits"),
    )
    return ModelConfig(tuple(input_shape), num_classes, layers, width, seed)


def _param_layout(config: ModelConfig):
    """Walk the recipe, checking shapes; return (param shapes, frozen names, tap shapes)."""
    if config.num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if len(config.input_shape) != 3 or min(config.input_shape) < 1:
        raise ConfigError(f"input_shape must be (H, W, C), got {config.input_shape}")
    taps = [l.tap for l in config.layers if l.tap]
    if len(taps) != len(set(taps)):
        raise ConfigError(f"duplicate tap names in {taps}")
    if taps.count("penultimate") != 1 or taps.count("logits") != 1:
        raise ConfigError("recipe needs exactly one 'penultimate' and one 'logits' tap")
    if not config.layers or config.layers[-1].kind != "dense" or config.layers[-1].tap != "logits":
        raise ConfigError("the final layer must be the dense 'logits' layer")
    if config.layers[-1].units != config.num_classes:
        raise ConfigError("logits width must equal num_classes")

    shape = config.input_shape
    shapes, frozen, tap_shapes = {}, [], {}
    counts = {}
    for i, layer in enumerate(config.layers):
        if layer.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {i}: unknown kind {layer.kind!r}")
        counts[layer.kind] = counts.get(layer.kind, 0) + 1
        name = f"{layer.kind}{counts[layer.kind]}"
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: conv needs a spatial input, got {shape}")
            h, w, c = shape
            ho = ad.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
            wo = ad.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
            if ho < 1 or wo < 1 or layer.units < 1:
                raise ConfigError(f"layer {i}: conv produces an empty output")
            shapes[name + ".w"] = (layer.kernel, layer.kernel, c, layer.units)
            shapes[name + ".b"] = (layer.units,)
            shape = (ho, wo, layer.units)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"layer {i}: dense needs a flat input, got {shape}")
            if layer.units < 1:
                raise ConfigError(f"layer {i}: dense width must be positive")
            shapes[name + ".w"] = (shape[0], layer.units)
            shapes[name + ".b"] = (layer.units,)
            shape = (layer.units,)
        elif layer.kind == "maxpool":
            if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
                raise ConfigError(f"layer {i}: maxpool needs spatial dims >= 2, got {shape}")
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif layer.kind == "gap":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: gap needs a spatial input")
            shape = (shape[2],)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        if layer.kind in ("conv", "dense") and not layer.trainable:
            frozen += [name + ".w", name + ".b"]
        if layer.tap:
            tap_shapes[layer.tap] = shape
    if tap_shapes["penultimate"] != (config.penultimate_width,):
        raise ConfigError(
            f"penultimate tap has shape {tap_shapes['penultimate']}, expected ({config.penultimate_width},)"
        )
    return shapes, frozen, tap_shapes


def tap_shapes(config: ModelConfig) -> dict:
    return _param_layout(config)[2]


def build_model(config: ModelConfig) -> Model:
    """He-normal weights and zero biases drawn from ``config.seed``."""
    shapes, _, _ = _param_layout(config)
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return Model(config, params)


def _as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    expected = model.config.input_shape
    if x.shape == expected:
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == expected:
        return x, False
    raise ValueError(f"input shape {x.shape} does not match model input {expected}")


def forward(model: Model, x, record: bool = True, dtype=None) -> tuple[ad.Var, ad.Tape]:
    """Run the network; return the logits slot and the tape.

    The tape exposes ``input``, ``params`` and ``taps``. A single image of the
    model's input shape is treated as a batch of one. ``dtype`` overrides the
    working precision (float64 is used by finite-difference checks).
    """
    batch, _ = _as_batch(model, x)
    tape = ad.Tape(record=record)
    if dtype is not None:
        batch = batch.astype(dtype)
    tape.input_shape = np.shape(x)
    tape.input = h = tape.variable(batch)
    for name, value in model.params.items():
        tape.params[name] = tape.variable(value if dtype is None else value.astype(dtype))
    counts = {}
    for layer in model.config.layers:
        counts[layer.kind] = counts.get(layer.kind, 0) + 1
        name = f"{layer.kind}{counts[layer.kind]}"
        if layer.kind == "conv":
            h = ad.conv2d(h, tape.params[name + ".w"], tape.params[name + ".b"], layer.stride, layer.padding)
        elif layer.kind == "dense":
            h = ad.dense(h, tape.params[name + ".w"], tape.params[name + ".b"])
        elif layer.kind == "relu":
            h = ad.relu(h)
        elif layer.kind == "maxpool":
            h = ad.max_pool2x2(h)
        elif layer.kind == "gap":
            h = ad.global_avg_pool(h)
        elif layer.kind == "flatten":
            h = ad.flatten(h)
        if layer.tap:
            tape.taps[layer.tap] = h
    return h, tape


def grad_input(tape: ad.Tape, loss: ad.Var) -> np.ndarray:
    """Gradient of ``loss`` with respect to the model input, shaped like it."""
    (g,) = tape.gradient(loss, [tape.input])
    return g.reshape(tape.input_shape)


def grad_params(tape: ad.Tape, loss: ad.Var, model: Model | None = None) -> dict:
    """Gradients for every trainable parameter; frozen layers are omitted."""
    frozen = model.frozen if model is not None else set()
    names = [n for n in tape.params if n not in frozen]
    grads = tape.gradient(loss, [tape.params[n] for n in names])
    return dict(zip(names, grads))


def logits(model: Model, x, batch_size: int = 256) -> np.ndarray:
    batch, single = _as_batch(model, x)
    out = [forward(model, batch[i:i + batch_size], record=False)[0].value for i in range(0, len(batch), batch_size)]
    z = np.concatenate(out) if out else np.zeros((0, model.config.num_classes), np.float32)
    return z[0] if single else z


def predict(model: Model, x):
    """Arg-max class; ties go to the lowest index."""
    z = logits(model, x)
    return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=1)


def probabilities(model: Model, x) -> np.ndarray:
    return ad.softmax(logits(model, x))


def activations(model: Model, x, tap: str, batch_size: int = 256) -> np.ndarray:
    """Output of the named layer for ``x`` (single image or batch)."""
    if tap not in tap_shapes(model.config):
        raise ValueError(f"unknown tap {tap!r}")
    batch, single = _as_batch(model, x)
    out = []
    for i in range(0, len(batch), batch_size):
        _, tape = forward(model, batch[i:i + batch_size], record=False)
        out.append(tape.taps[tap].value)
    a = np.concatenate(out)
    return a[0] if single else a


def all_activations(model: Model, x, taps, batch_size: int = 256) -> dict:
    """Several taps from a single pass over ``x`` (a batch)."""
    batch, _ = _as_batch(model, x)
    known = tap_shapes(model.config)
    for t in taps:
        if t not in known:
            raise ValueError(f"unknown tap {t!r}")
    out = {t: [] for t in taps}
    for i in range(0, len(batch), batch_size):
        _, tape = forward(model, batch[i:i + batch_size], record=False)
        for t in taps:
            out[t].append(tape.taps[t].value)
    return {t: np.concatenate(v) for t, v in out.items()}


def sample_losses(model: Model, x, y) -> np.ndarray:
    """Per-sample cross-entropy of a batch."""
    z = logits(model, np.asarray(x))
    if z.ndim == 1:
        z = z[None]
    return ad.per_sample_cross_entropy(z, np.atleast_1d(np.asarray(y, dtype=np.int64)))


def _augment(batch: np.ndarray, rng: np.random.Generator, flip: bool, shift: int, fill: float) -> np.ndarray:
    out = batch.copy()
    n, h, w, _ = batch.shape
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, ::-1, :]
    if shift:
        offsets = rng.integers(-shift, shift + 1, size=(n, 2))
        padded = np.pad(out, ((0, 0), (shift, shift), (shift, shift), (0, 0)), constant_values=fill)
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, shift + dy:shift + dy + h, shift + dx:shift + dx + w, :]
    return out


def train(model: Model, images, labels, config: TrainConfig, fill: float = -1.0) -> Model:
    """Mini-batch SGD with classical momentum on the mean cross-entropy.

    Returns a new :class:`Model`; the input model is left untouched. Batch
    order and augmentation draws come from ``config.seed``.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    if np.any(labels < 0) or np.any(labels >= model.config.num_classes):
        raise ValueError("labels out of range")
    _as_batch(model, images)

    rng = np.random.default_rng(config.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    frozen = model.frozen
    lr = np.float32(config.learning_rate)
    mu = np.float32(config.momentum)
    work = Model(model.config, params)
    history = list(model.loss_history)
    for _ in range(config.epochs):
        order = rng.permutation(len(images))
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = _augment(images[idx], rng, config.flip, config.shift, fill)
            z, tape = forward(work, xb)
            loss = ad.softmax_cross_entropy(z, labels[idx], "mean")
            grads = grad_params(tape, loss, work)
            for name, g in grads.items():
                if name in frozen:
                    continue
                velocity[name] = mu * velocity[name] - lr * g
                params[name] = params[name] + velocity[name]
            work = Model(model.config, params)
            epoch_loss += float(loss.value)
            batches += 1
        history.append(epoch_loss / batches)
    return Model(model.config, params, model.epochs_run + config.epochs, None, history)


def evaluate(model: Model, images, labels) -> tuple[float, float | None]:
    """Accuracy, and for two classes the AUC of the class-1 probability."""
    from .detectors import roc_auc

    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    z = logits(model, images)
    accuracy = float(np.mean(np.argmax(z, axis=1) == labels))
    auc = None
    if model.config.num_classes == 2 and 0 < labels.sum() < len(labels):
        auc = roc_auc(ad.softmax(z)[:, 1], labels).auc
    return accuracy, auc


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["input_shape"] = list(config.input_shape)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        input_shape=tuple(d["input_shape"]),
        num_classes=d["num_classes"],
        layers=tuple(LayerSpec(**l) for l in d["layers"]),
        penultimate_width=d["penultimate_width"],
        seed=d["seed"],
    )


def save_checkpoint(path, model: Model) -> None:
    meta = {
        "config": config_to_dict(model.config),
        "epochs_run": model.epochs_run,
        "clean_accuracy": model.clean_accuracy,
        "loss_history": model.loss_history,
    }
    save_named_tensors(path, model.params, json.dumps(meta, sort_keys=True))


def load_checkpoint(path) -> Model:
    tensors, meta_text = load_named_tensors(path)
    meta = json.loads(meta_text)
    config = config_from_dict(meta["config"])
    shapes, _, _ = _param_layout(config)
    for name, shape in shapes.items():
        if name not in tensors or tensors[name].shape != tuple(shape):
            raise ConfigError(f"checkpoint parameter {name} missing or mis-shaped")
    return Model(config, tensors, meta["epochs_run"], meta["clean_accuracy"], meta["loss_history"])


def with_clean_accuracy(model: Model, accuracy: float) -> Model:
    return replace(model, clean_accuracy=accuracy)
