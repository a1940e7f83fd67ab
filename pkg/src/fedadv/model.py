"""Small configurable conv/dense classifier with hand-coded backprop and SGD.

Architectures are declared as an ordered list of layer specs; parameters live
in a ModelParams value that can be flattened to one vector (for clipping,
noise and aggregation) and restored bit-exactly.

Checkpoint format "FADV" (all integers little-endian):
    magic 'FADV' | u32 version=1 | u32 round_tag | u32 n_layers
    per layer: u32 n_tensors, then per tensor (keys in sorted order):
        u8 key length | key ascii | u32 rank | u32 dims... | float64 data (LE)
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor_ops import (
    NonFiniteError,
    check_finite,
    conv2d_backward,
    conv2d_forward,
)

__all__ = [
    "LayerSpec",
    "Architecture",
    "ModelParams",
    "TrainStats",
    "TrainingDivergedError",
    "conv2d",
    "relu",
    "maxpool2",
    "flatten",
    "dense",
    "dropout",
    "make_architecture",
    "parse_architecture",
    "format_architecture",
    "default_architecture",
    "full_scale_architecture",
    "init_params",
    "clone_params",
    "flatten_params",
    "unflatten_params",
    "param_count",
    "forward",
    "predict",
    "softmax",
    "cross_entropy_from_logits",
    "loss_and_input_grad",
    "train_epochs",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = b"FADV"
_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Local training produced a non-finite loss."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int | None = None
    kernel_size: int | None = None
    out_features: int | None = None
    rate: float | None = None

    def __str__(self) -> str:
        if self.kind == "conv2d":
            return f"conv2d({self.out_channels},{self.kernel_size})"
        if self.kind == "dense":
            return f"dense({self.out_features})"
        if self.kind == "dropout":
            return f"dropout({self.rate:g})"
        return self.kind


def conv2d(out_channels: int, kernel_size: int) -> LayerSpec:
    return LayerSpec("conv2d", out_channels=out_channels, kernel_size=kernel_size)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2() -> LayerSpec:
    return LayerSpec("maxpool2")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(out_features: int) -> LayerSpec:
    return LayerSpec("dense", out_features=out_features)


def dropout(rate: float) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


@dataclass(frozen=True)
class Architecture:
    """Validated layer stack with the per-layer input shapes pre-computed."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (C, H, W)
    class_count: int
    layer_inputs: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def has_dropout(self) -> bool:
        return any(l.kind == "dropout" for l in self.layers)


def make_architecture(layers, input_shape) -> Architecture:
    """Validate the layer chain against input_shape (C, H, W)."""
    layers = tuple(layers)
    if not layers:
        raise ValueError("architecture needs at least one layer")
    if layers[-1].kind != "dense":
        raise ValueError("last layer must be dense(num_classes)")
    c, h, w = (int(v) for v in input_shape)
    if min(c, h, w) < 1:
        raise ValueError(f"input shape {(c, h, w)} must be positive")
    shape: tuple[int, ...] = (c, h, w)
    layer_inputs = []
    for i, spec in enumerate(layers):
        layer_inputs.append(shape)
        where = f"layer {i} ({spec})"
        if spec.kind == "conv2d":
            if len(shape) != 3:
                raise ValueError(f"{where}: conv2d needs (C,H,W) input, got {shape}")
            k = spec.kernel_size
            if k is None or k % 2 == 0 or k < 1:
                raise ValueError(f"{where}: kernel size must be odd and positive")
            if spec.out_channels is None or spec.out_channels < 1:
                raise ValueError(f"{where}: out_channels must be >= 1")
            shape = (spec.out_channels, shape[1], shape[2])
        elif spec.kind == "relu":
            pass
        elif spec.kind == "maxpool2":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ValueError(f"{where}: maxpool2 needs (C,H,W) with even H,W, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif spec.kind == "flatten":
            if len(shape) != 3:
                raise ValueError(f"{where}: flatten needs (C,H,W) input, got {shape}")
            shape = (shape[0] * shape[1] * shape[2],)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"{where}: dense needs flattened input, got {shape}")
            if spec.out_features is None or spec.out_features < 1:
                raise ValueError(f"{where}: out_features must be >= 1")
            shape = (spec.out_features,)
        elif spec.kind == "dropout":
            if spec.rate is None or not 0.0 <= spec.rate < 1.0:
                raise ValueError(f"{where}: dropout rate must be in [0, 1)")
        else:
            raise ValueError(f"{where}: unknown layer kind {spec.kind!r}")
    return Architecture(layers, (c, h, w), shape[0], tuple(layer_inputs))


def parse_architecture(text: str, input_shape) -> Architecture:
    """Parse layer tokens like 'conv2d(8,3) relu maxpool2 flatten dense(4)'."""
    specs = []
    for token in text.split():
        token = token.strip()
        if not token:
            continue
        name, _, args = token.partition("(")
        args = args.rstrip(")")
        try:
            if name == "conv2d":
                o, k = (int(v) for v in args.split(","))
                specs.append(conv2d(o, k))
            elif name == "dense":
                specs.append(dense(int(args)))
            elif name == "dropout":
                specs.append(dropout(float(args)))
            elif name in ("relu", "maxpool2", "flatten") and not args:
                specs.append(LayerSpec(name))
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"cannot parse architecture token {token!r}") from None
    return make_architecture(specs, input_shape)


def format_architecture(arch: Architecture) -> str:
    return " ".join(str(l) for l in arch.layers)


def default_architecture(input_shape, classes: int) -> Architecture:
    """Desk-scale default: two conv blocks and a small dense head.

    Each block pools only while the feature map is still even and at least
    4x4, so the stack fits any input size rather than just multiples of 4.
    """
    c, h, w = input_shape
    layers = []
    for out_channels in (8, 16):
        layers += [conv2d(out_channels, 3), relu()]
        if h % 2 == 0 and w % 2 == 0 and min(h, w) >= 4:
            layers.append(maxpool2())
            h //= 2
            w //= 2
    layers += [flatten(), dense(32), relu(), dense(classes)]
    return make_architecture(layers, input_shape)


def full_scale_architecture(input_shape, classes: int, dropout_rate: float = 0.25) -> Architecture:
    """Six conv layers then five dense layers, ReLU and dropout after each
    hidden dense layer. Configurable, not the default (too slow for CI)."""
    c, h, w = input_shape
    layers = []
    channels = [16, 16, 32, 32, 64, 64]
    for i, o in enumerate(channels):
        layers += [conv2d(o, 3), relu()]
        if i % 2 == 1 and h % 2 == 0 and w % 2 == 0 and min(h, w) >= 4:
            layers.append(maxpool2())
            h //= 2
            w //= 2
    layers.append(flatten())
    for f in [256, 128, 64, 32]:
        layers += [dense(f), relu(), dropout(dropout_rate)]
    layers.append(dense(classes))
    return make_architecture(layers, input_shape)


@dataclass
class ModelParams:
    """Per-layer parameter tensors plus the federated round they came from."""

    layers: list[dict[str, np.ndarray]]
    round_tag: int = 0


def init_params(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    """He-style scaled normal init for weights, zero biases."""
    layers: list[dict[str, np.ndarray]] = []
    for spec, in_shape in zip(arch.layers, arch.layer_inputs):
        if spec.kind == "conv2d":
            c = in_shape[0]
            k = spec.kernel_size
            std = np.sqrt(2.0 / (c * k * k))
            layers.append({
                "b": np.zeros(spec.out_channels),
                "w": rng.normal(0.0, std, size=(spec.out_channels, c, k, k)),
            })
        elif spec.kind == "dense":
            fan_in = in_shape[0]
            std = np.sqrt(2.0 / fan_in)
            layers.append({
                "b": np.zeros(spec.out_features),
                "w": rng.normal(0.0, std, size=(fan_in, spec.out_features)),
            })
        else:
            layers.append({})
    return ModelParams(layers)


def clone_params(params: ModelParams) -> ModelParams:
    return ModelParams([{k: v.copy() for k, v in layer.items()} for layer in params.layers],
                       params.round_tag)


def param_count(params: ModelParams) -> int:
    return sum(v.size for layer in params.layers for v in layer.values())


def flatten_params(params: ModelParams) -> np.ndarray:
    """Concatenate all parameter tensors into one float64 vector."""
    chunks = [layer[k].ravel() for layer in params.layers for k in sorted(layer)]
    if not chunks:
        return np.zeros(0)
    return np.concatenate(chunks)


def unflatten_params(flat: np.ndarray, template: ModelParams) -> ModelParams:
    """Inverse of flatten_params; shapes come from template. Bit-exact round trip."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != param_count(template):
        raise ValueError(f"flat vector has {flat.size} values, template needs "
                         f"{param_count(template)}")
    out = []
    pos = 0
    for layer in template.layers:
        new = {}
        for k in sorted(layer):
            n = layer[k].size
            new[k] = flat[pos:pos + n].reshape(layer[k].shape).copy()
            pos += n
        out.append(new)
    return ModelParams(out, template.round_tag)


# ---------------------------------------------------------------------------
# forward / backward


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_from_logits(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits.

    target: int labels (hard) or a (N, C) distribution (soft).
    """
    n, c = logits.shape
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    target = np.asarray(target)
    if target.ndim == 1:
        labels = target.astype(np.int64)
        if labels.shape != (n,):
            raise ValueError(f"need {n} labels, got {labels.shape[0]}")
        if labels.min() < 0 or labels.max() >= c:
            raise ValueError(f"label out of range [0, {c})")
        loss = -log_probs[np.arange(n), labels].mean()
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
    else:
        if target.shape != logits.shape:
            raise ValueError(f"soft target shape {target.shape} != logits {logits.shape}")
        loss = -(target * log_probs).sum(axis=1).mean()
        grad = probs - target
    if not np.isfinite(loss):
        raise NonFiniteError("cross_entropy_from_logits: non-finite loss")
    return float(loss), grad / n


def _forward_cached(arch: Architecture, params: ModelParams, x: np.ndarray,
                    mode: str, rng: np.random.Generator | None):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != arch.input_shape:
        raise ValueError(f"input shape {x.shape} does not match architecture "
                         f"input (N, {', '.join(map(str, arch.input_shape))})")
    if mode == "train" and arch.has_dropout and rng is None:
        raise ValueError("train-mode forward with dropout requires an rng")
    a = x
    caches = []
    for spec, layer in zip(arch.layers, params.layers):
        if spec.kind == "conv2d":
            caches.append(("conv2d", a))
            a = conv2d_forward(a, layer["w"], layer["b"])
        elif spec.kind == "relu":
            mask = a > 0
            caches.append(("relu", mask))
            a = a * mask
        elif spec.kind == "maxpool2":
            n, c, h, w = a.shape
            wins = a.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            wins = wins.reshape(n, c, h // 2, w // 2, 4)
            idx = wins.argmax(axis=-1)
            caches.append(("maxpool2", (idx, (n, c, h, w))))
            a = np.take_along_axis(wins, idx[..., None], axis=-1)[..., 0]
        elif spec.kind == "flatten":
            caches.append(("flatten", a.shape))
            a = a.reshape(a.shape[0], -1)
        elif spec.kind == "dense":
            caches.append(("dense", a))
            a = a @ layer["w"] + layer["b"]
        elif spec.kind == "dropout":
            if mode == "train":
                keep = 1.0 - spec.rate
                mask = (rng.random(a.shape) < keep) / keep
            else:
                mask = None
            caches.append(("dropout", mask))
            if mask is not None:
                a = a * mask
    return check_finite(a, "forward"), caches


def _backward(arch: Architecture, params: ModelParams, caches, grad_out: np.ndarray):
    grads: list[dict[str, np.ndarray]] = [None] * len(arch.layers)
    g = grad_out
    for i in range(len(arch.layers) - 1, -1, -1):
        kind, cache = caches[i]
        layer = params.layers[i]
        if kind == "conv2d":
            g, gw, gb = conv2d_backward(cache, layer["w"], g)
            grads[i] = {"b": gb, "w": gw}
        elif kind == "relu":
            g = g * cache
            grads[i] = {}
        elif kind == "maxpool2":
            idx, (n, c, h, w) = cache
            gwins = np.zeros((n, c, h // 2, w // 2, 4))
            np.put_along_axis(gwins, idx[..., None], g[..., None], axis=-1)
            g = gwins.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            g = g.reshape(n, c, h, w)
            grads[i] = {}
        elif kind == "flatten":
            g = g.reshape(cache)
            grads[i] = {}
        elif kind == "dense":
            grads[i] = {"b": g.sum(axis=0), "w": cache.T @ g}
            g = g @ layer["w"].T
        elif kind == "dropout":
            if cache is not None:
                g = g * cache
            grads[i] = {}
    return grads, g


def forward(arch: Architecture, params: ModelParams, x: np.ndarray,
            mode: str = "eval", rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the network, returning logits of shape (N, classes)."""
    logits, _ = _forward_cached(arch, params, x, mode, rng)
    return logits


def predict(arch: Architecture, params: ModelParams, x: np.ndarray) -> np.ndarray:
    return forward(arch, params, x).argmax(axis=1)


def loss_and_input_grad(arch: Architecture, params: ModelParams, x: np.ndarray,
                        target) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the input batch.

    Always runs in eval mode so attack and noise-extraction gradients are
    deterministic functions of (params, x, target).
    """
    logits, caches = _forward_cached(arch, params, x, "eval", None)
    loss, grad_logits = cross_entropy_from_logits(logits, target)
    _, grad_x = _backward(arch, params, caches, grad_logits)
    return loss, check_finite(grad_x, "loss_and_input_grad")


@dataclass
class TrainStats:
    mean_loss: float
    final_loss: float
    last_grad_norm: float
    batches: int


def train_epochs(arch: Architecture, params: ModelParams, images: np.ndarray,
                 labels: np.ndarray, epochs: int, lr: float, batch: int,
                 rng: np.random.Generator) -> tuple[ModelParams, TrainStats]:
    """Minibatch SGD for `epochs` passes; shuffling and dropout come from rng.

    Returns the updated parameters (the input value is left untouched) and
    summary stats for the round log.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    n = images.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    cur = clone_params(params)
    losses = []
    last_grad_norm = 0.0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            sel = order[start:start + batch]
            try:
                logits, caches = _forward_cached(arch, cur, images[sel], "train", rng)
                loss, grad_logits = cross_entropy_from_logits(logits, labels[sel])
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, sample offset {start} "
                    f"(lr={lr})") from exc
            grads, _ = _backward(arch, cur, caches, grad_logits)
            sq = 0.0
            for layer, glayer in zip(cur.layers, grads):
                for k, g in glayer.items():
                    sq += float((g * g).sum())
                    if lr != 0.0:
                        layer[k] -= lr * g
            last_grad_norm = float(np.sqrt(sq))
            losses.append(loss)
    stats = TrainStats(float(np.mean(losses)), losses[-1], last_grad_norm, len(losses))
    return cur, stats


# ---------------------------------------------------------------------------
# FADV checkpoints


def save_checkpoint(path, params: ModelParams) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _VERSION, params.round_tag, len(params.layers)))
        for layer in params.layers:
            f.write(struct.pack("<I", len(layer)))
            for key in sorted(layer):
                t = np.ascontiguousarray(layer[key], dtype=np.float64)
                kb = key.encode("ascii")
                f.write(struct.pack("<B", len(kb)))
                f.write(kb)
                f.write(struct.pack("<I", t.ndim))
                f.write(struct.pack(f"<{t.ndim}I", *t.shape))
                f.write(t.tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a FADV checkpoint (bad magic)")
    version, round_tag, n_layers = struct.unpack_from("<III", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported FADV version {version}")
    pos = 16
    layers = []
    for _ in range(n_layers):
        (n_tensors,) = struct.unpack_from("<I", data, pos)
        pos += 4
        layer = {}
        for _ in range(n_tensors):
            (klen,) = struct.unpack_from("<B", data, pos)
            pos += 1
            key = data[pos:pos + klen].decode("ascii")
            pos += klen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            layer[key] = arr.astype(np.float64)
        layers.append(layer)
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return ModelParams(layers, round_tag)
