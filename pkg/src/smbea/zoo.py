"""Small pixel-to-pixel encoder-decoder models used as source and target models."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tsr
from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "up", "out")


class ZooError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    dilation: int = 1

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel - 1) // 2


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    tap_layers: tuple[str, ...]
    output_channels: int = 3
    in_channels: int = 3
    seed: int = 0

    def validate(self) -> None:
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ZooError(f"{self.name}: duplicate layer names")
        if not self.layers or self.layers[-1].kind != "out":
            raise ZooError(f"{self.name}: last layer must be the output conv")
        if self.output_channels not in (1, 3):
            raise ZooError(f"{self.name}: output_channels must be 1 or 3")
        scale = 1
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ZooError(f"{self.name}: unknown layer kind {layer.kind!r}")
            if layer.kind in ("conv", "out"):
                if layer.kernel % 2 == 0:
                    raise ZooError(f"{self.name}.{layer.name}: kernel must be odd")
                if layer.dilation < 1:
                    raise ZooError(f"{self.name}.{layer.name}: dilation must be >= 1")
                scale *= layer.stride
            elif layer.kind == "up":
                scale //= 2
        if scale != 1:
            raise ZooError(f"{self.name}: strides and upsamplings do not cancel")
        convs = {layer.name: layer for layer in self.layers if layer.kind == "conv"}
        for tap in self.tap_layers:
            if tap not in convs:
                raise ZooError(f"{self.name}: tap {tap!r} is not a hidden conv layer")
            if not _is_pow2(convs[tap].out_channels):
                raise ZooError(
                    f"{self.name}: tap {tap!r} has {convs[tap].out_channels} channels, not a power of two")

    def tap_channels(self, tap: str) -> int:
        for layer in self.layers:
            if layer.name == tap:
                return layer.out_channels
        raise ZooError(f"{self.name}: unknown tap {tap!r}")

    def tap_depth(self, tap: str) -> int:
        """1-based position of ``tap`` among the conv layers."""
        convs = [layer.name for layer in self.layers if layer.kind in ("conv", "out")]
        if tap not in convs:
            raise ZooError(f"{self.name}: unknown tap {tap!r}")
        return convs.index(tap) + 1

    @property
    def default_tap(self) -> str:
        return self.tap_layers[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = tuple(LayerSpec(**layer) for layer in d["layers"])
        return cls(name=d["name"], layers=layers, tap_layers=tuple(d["tap_layers"]),
                   output_channels=d["output_channels"], in_channels=d["in_channels"], seed=d["seed"])


def default_spec(output_channels: int = 3, seed: int = 0, name: str = "base") -> ModelSpec:
    """Four conv layers: two stride-2 encoders, one decoder, one output conv."""
    layers = (
        LayerSpec("enc1", "conv", 16, 3, 2),
        LayerSpec("enc2", "conv", 32, 3, 2),
        LayerSpec("up1", "up"),
        LayerSpec("dec1", "conv", 16, 3, 1),
        LayerSpec("up2", "up"),
        LayerSpec("out", "out", output_channels, 3, 1),
    )
    return ModelSpec(name, layers, ("enc1", "enc2", "dec1"), output_channels, 3, seed)


def zoo_specs(output_channels: int, seed: int = 0, count: int = 16) -> list[ModelSpec]:
    """Deterministic family of ``count`` diverse encoder-decoder specs.

    Diversity comes from depth (4-6 conv layers), widths in {16, 32, 64},
    the kernel size of the 16x16 layers (3 or 5) and the init seed.
    """
    widths = [(16, 32), (16, 64), (32, 32), (16, 32)]
    depths = [4, 5, 6]
    specs = []
    for idx in range(count):
        w1, w2 = widths[idx % len(widths)]
        depth = depths[(idx // len(widths) + idx) % len(depths)]
        k = 5 if idx % 3 == 1 else 3
        layers = [LayerSpec("enc1", "conv", w1, 3, 2), LayerSpec("enc2", "conv", w2, k, 2)]
        taps = ["enc1", "enc2"]
        for j in range(depth - 4):
            layers.append(LayerSpec(f"mid{j + 1}", "conv", w2, k if j == 0 else 3, 1))
            taps.append(f"mid{j + 1}")
        layers.append(LayerSpec("up1", "up"))
        layers.append(LayerSpec("dec1", "conv", w1, 3, 1))
        taps.append("dec1")
        layers.append(LayerSpec("up2", "up"))
        layers.append(LayerSpec("out", "out", output_channels, 3, 1))
        specs.append(ModelSpec(f"m{idx:02d}", tuple(layers), tuple(taps), output_channels, 3,
                               seed * 1000 + idx))
    return specs


class Model:
    """Sequential conv net with frozen-statistics channel normalisation."""

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray],
                 buffers: dict[str, np.ndarray], frozen: bool = False):
        self.spec = spec
        self.params = {k: Tensor(v, requires_grad=not frozen) for k, v in params.items()}
        self.buffers = {k: np.asarray(v, dtype=np.float64) for k, v in buffers.items()}
        self.frozen = frozen
        self.grad_calls = 0
        self.meta: dict = {}

    @property
    def name(self) -> str:
        return self.spec.name

    def freeze(self) -> "Model":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "Model":
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True
        return self

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self, name: str | None = None) -> "Model":
        spec = self.spec if name is None else replace(self.spec, name=name)
        clone = Model(spec, {k: v.data.copy() for k, v in self.params.items()},
                      copy.deepcopy(self.buffers), self.frozen)
        clone.meta = copy.deepcopy(self.meta)
        return clone

    def __call__(self, x, taps: Sequence[str] = ()):
        return forward_with_features(self, x, taps)


def build_model(spec: ModelSpec) -> Model:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    channels = spec.in_channels
    for layer in spec.layers:
        if layer.kind == "up":
            continue
        fan_in = channels * layer.kernel * layer.kernel
        bound = np.sqrt(6.0 / fan_in) if layer.kind == "conv" else 1.0 / np.sqrt(fan_in)
        shape = (layer.out_channels, channels, layer.kernel, layer.kernel)
        params[f"{layer.name}.weight"] = rng.uniform(-bound, bound, size=shape)
        params[f"{layer.name}.bias"] = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in),
                                                   size=layer.out_channels)
        if layer.kind == "conv":
            params[f"{layer.name}.gain"] = np.ones(layer.out_channels)
            params[f"{layer.name}.shift"] = np.zeros(layer.out_channels)
            buffers[f"{layer.name}.mean"] = np.zeros(layer.out_channels)
            buffers[f"{layer.name}.var"] = np.ones(layer.out_channels)
        channels = layer.out_channels
    return Model(spec, params, buffers)


def _as_batch(image) -> tuple[Tensor, bool]:
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    return x, False


def forward_with_features(model: Model, image, taps: Sequence[str] = (), calibrate: bool = False):
    """Run ``model`` and return ``(prediction, [features at each tap])``.

    Features are the post-normalisation, post-ReLU activations. A single
    ``(C, H, W)`` image yields unbatched outputs.
    """
    spec = model.spec
    known = {layer.name for layer in spec.layers if layer.kind == "conv"}
    for tap in taps:
        if tap not in known:
            raise ZooError(f"{spec.name}: unknown tap {tap!r}")
    x, squeeze = _as_batch(image)
    if x.shape[1] != spec.in_channels:
        raise ZooError(f"{spec.name}: expected {spec.in_channels} input channels, got {x.shape[1]}")
    if x.requires_grad:
        # counts passes that can propagate a gradient back to the image
        model.grad_calls += 1
    captured: dict[str, Tensor] = {}
    p = model.params
    for layer in spec.layers:
        if layer.kind == "up":
            x = T.upsample_nearest(x, 2)
            continue
        x = T.conv2d(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"],
                     stride=layer.stride, padding=layer.padding, dilation=layer.dilation)
        if layer.kind == "out":
            x = T.sigmoid(x)
            break
        if calibrate:
            model.buffers[f"{layer.name}.mean"] = x.data.mean(axis=(0, 2, 3))
            model.buffers[f"{layer.name}.var"] = x.data.var(axis=(0, 2, 3))
        x = T.channel_affine(x, p[f"{layer.name}.gain"], p[f"{layer.name}.shift"],
                             model.buffers[f"{layer.name}.mean"], model.buffers[f"{layer.name}.var"])
        x = T.relu(x)
        if layer.name in taps:
            captured[layer.name] = x
    feats = [captured[t] for t in taps]
    if squeeze:
        x = x.reshape(x.shape[1:])
        feats = [f.reshape(f.shape[1:]) for f in feats]
    return x, feats


def predict(model: Model, images: np.ndarray, batch: int = 50) -> np.ndarray:
    """Gradient-free batched prediction."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    was_frozen = model.frozen
    model.freeze()
    outs = [forward_with_features(model, Tensor(images[i:i + batch]))[0].data
            for i in range(0, len(images), batch)]
    if not was_frozen:
        model.unfreeze()
    out = np.concatenate(outs, axis=0)
    return out[0] if single else out


# -- training -------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            # parameters get a fresh array so earlier snapshots stay untouched
            self.params[k].data = self.params[k].data - update


def _training_loss(pred: Tensor, target: np.ndarray, loss: str) -> Tensor:
    from .losses import mae, neg_cc

    value = mae(pred, target).mean()
    if loss == "mae_cc":
        value = value + neg_cc(pred, target).mean()
    return value


def dataset_loss(model: Model, inputs: np.ndarray, targets: np.ndarray, loss: str = "mae") -> float:
    pred = predict(model, inputs)
    return _training_loss(Tensor(pred), targets, loss).item()


def train_model(model: Model, inputs: np.ndarray, targets: np.ndarray, epochs: int,
                lr: float = 2e-3, batch_size: int = 20, seed: int = 0,
                calibrate: bool = True, loss: str = "mae") -> tuple[Model, float]:
    """Fit ``model`` with Adam and freeze it.

    ``loss`` is ``"mae"`` or ``"mae_cc"`` (MAE minus Pearson correlation, used
    for the sparse saliency maps where plain MAE collapses to an all-zero
    map). Returns the model and the mean training loss of the final epoch
    (the initial dataset loss when ``epochs`` is 0). Per-epoch losses are
    kept in ``model.meta["train_losses"]``.
    """
    if loss not in ("mae", "mae_cc"):
        raise ZooError(f"unknown training loss {loss!r}")
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) == 0:
        raise ZooError("cannot train on an empty dataset")
    if len(inputs) != len(targets):
        raise ZooError("inputs and targets differ in length")
    if model.frozen:
        raise ZooError(f"{model.name} is frozen")
    rng = np.random.default_rng(seed)
    if calibrate:
        sample = inputs[rng.permutation(len(inputs))[:min(len(inputs), 64)]]
        model.freeze()
        forward_with_features(model, Tensor(sample), calibrate=True)
        model.unfreeze()
    if epochs == 0:
        initial = dataset_loss(model, inputs, targets, loss)
        model.meta["train_losses"] = []
        model.freeze()
        return model, initial

    opt = Adam(model.params, lr=lr)
    keys = list(model.params)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(inputs))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            pred, _ = forward_with_features(model, Tensor(inputs[idx]))
            value = _training_loss(pred, targets[idx], loss)
            grads = T.backward(value, [model.params[k] for k in keys])
            opt.step(dict(zip(keys, grads)))
            total += value.item() * len(idx)
        history.append(total / len(inputs))
    model.meta["train_losses"] = history
    model.freeze()
    return model, history[-1]


def augment_dilated(model: Model, inputs: np.ndarray, targets: np.ndarray, epochs: int,
                    lr: float = 1e-3, seed: int = 0, loss: str = "mae", batch_size: int = 2) -> Model:
    """Dilated-convolution variant of ``model``, briefly fine-tuned.

    Interior convs (every hidden conv except the first) switch to dilation 2
    with padding widened to keep spatial extents; weights are inherited.
    """
    first_conv = next(layer.name for layer in model.spec.layers if layer.kind == "conv")
    layers = tuple(
        replace(layer, dilation=2) if layer.kind == "conv" and layer.name != first_conv and layer.stride == 1 else layer
        for layer in model.spec.layers
    )
    spec = replace(model.spec, name=f"{model.spec.name}-dil", layers=layers)
    spec.validate()
    variant = Model(spec, {k: v.data.copy() for k, v in model.params.items()},
                    copy.deepcopy(model.buffers))
    variant.meta = {"parent": model.name}
    ft_epochs = max(1, int(round(0.2 * epochs)))
    train_model(variant, inputs, targets, ft_epochs, lr=lr, batch_size=batch_size, seed=seed + 7,
                calibrate=False, loss=loss)
    variant.meta["finetune_epochs"] = ft_epochs
    return variant


# -- persistence ------------------------------------------------------------------

MANIFEST = "manifest.json"


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_model(model: Model, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    for kind, store in (("param", model.param_arrays()), ("buffer", model.buffers)):
        for key in sorted(store):
            fname = f"{kind}.{key}.tsr"
            tsr.save(path / fname, store[key])
            files[f"{kind}:{key}"] = {"file": fname, "shape": list(store[key].shape)}
    manifest = {"format": "smbea-model/1", "spec": model.spec.to_dict(), "tensors": files,
                "meta": model.meta}
    _dump_json(manifest, path / MANIFEST)
    return path


def load_model(path: str | Path, frozen: bool = True) -> Model:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        spec = ModelSpec.from_dict(manifest["spec"])
        entries = manifest["tensors"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ZooError(f"corrupt model manifest in {path}: {exc}") from exc
    params, buffers = {}, {}
    for key, entry in entries.items():
        kind, name = key.split(":", 1)
        try:
            arr = tsr.load(path / entry["file"])
        except (OSError, tsr.TSRFormatError) as exc:
            raise ZooError(f"{path}: cannot read tensor {name}: {exc}") from exc
        if list(arr.shape) != entry["shape"]:
            raise ZooError(f"{path}: {name} has shape {arr.shape}, manifest says {entry['shape']}")
        (params if kind == "param" else buffers)[name] = arr
    reference = build_model(spec)
    for name, arr in reference.param_arrays().items():
        if name not in params or params[name].shape != arr.shape:
            raise ZooError(f"{path}: parameter {name} missing or mis-shaped")
    model = Model(spec, params, buffers, frozen=frozen)
    model.meta = manifest.get("meta", {})
    return model


# -- zoo ---------------------------------------------------------------------------

ZOO_INDEX = "zoo.json"


@dataclass
class ZooBuildConfig:
    task: str = "saliency"
    seed: int = 0
    n_specs: int = 16
    n_train: int = 200
    n_val: int = 50
    hw: int = 64
    epochs: int = 8
    lr: float = 2e-3


def build_zoo(cfg: ZooBuildConfig, out: str | Path) -> dict:
    """Train ``n_specs`` base models plus one dilated variant each and save them."""
    from .data import gen_dataset, model_targets

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    out_ch = 3 if cfg.task == "translation" else 1
    loss = "mae" if cfg.task == "translation" else "mae_cc"
    train = gen_dataset(cfg.task, cfg.n_train, cfg.hw, seed=cfg.seed)
    val = gen_dataset(cfg.task, cfg.n_val, cfg.hw, seed=cfg.seed + 10_000)
    x_tr, y_tr = train.inputs, model_targets(cfg.task, train.targets)
    x_va, y_va = val.inputs, model_targets(cfg.task, val.targets)
    entries = []
    for spec in zoo_specs(out_ch, cfg.seed, cfg.n_specs):
        model = build_model(spec)
        _, final = train_model(model, x_tr, y_tr, cfg.epochs, lr=cfg.lr, seed=spec.seed, loss=loss)
        mse = float(np.mean((predict(model, x_va) - y_va) ** 2))
        model.meta.update({"val_mse": mse, "final_loss": final, "task": cfg.task})
        variant = augment_dilated(model, x_tr, y_tr, cfg.epochs, seed=spec.seed, loss=loss)
        vmse = float(np.mean((predict(variant, x_va) - y_va) ** 2))
        variant.meta.update({"val_mse": vmse, "task": cfg.task})
        for m in (model, variant):
            save_model(m, out / m.name)
            entries.append({"name": m.name, "val_mse": m.meta["val_mse"],
                            "parent": m.meta.get("parent")})
        logger.info("trained %s (val mse %.5f) and %s (val mse %.5f)", model.name, mse, variant.name, vmse)
    index = {"task": cfg.task, "config": asdict(cfg), "models": entries}
    _dump_json(index, out / ZOO_INDEX)
    return index


def load_zoo(path: str | Path, names: Sequence[str] | None = None) -> dict[str, Model]:
    path = Path(path)
    try:
        index = json.loads((path / ZOO_INDEX).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ZooError(f"no readable zoo index in {path}: {exc}") from exc
    available = [e["name"] for e in index["models"]]
    wanted = available if names is None else list(names)
    missing = [n for n in wanted if n not in available]
    if missing:
        raise ZooError(f"models missing from zoo {path}: {missing}")
    return {n: load_model(path / n) for n in wanted}
