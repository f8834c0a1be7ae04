"""Feature extractor g, classifier f and domain discriminator d as small MLPs."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import ConfigError, DimensionError, Tensor

DISC_EPS = 1e-7

ACTIVATIONS = {"relu": nc.relu, "tanh": nc.tanh}
OUTPUT_TRANSFORMS = ("none", "sigmoid", "softmax-deferred")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    output_transform: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ConfigError(f"MlpSpec needs at least 2 layer sizes, got {self.layer_sizes}")
        if any(s <= 0 for s in self.layer_sizes):
            raise ConfigError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.output_transform not in OUTPUT_TRANSFORMS:
            raise ConfigError(f"unknown output_transform {self.output_transform!r}")

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation,
                "output_transform": self.output_transform}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), d.get("activation", "relu"), d.get("output_transform", "none"))


Layers = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class ModelParams:
    spec_g: MlpSpec
    spec_f: MlpSpec
    spec_d: MlpSpec
    theta_g: Layers
    theta_f: Layers
    theta_d: Layers
    seed: int = 0

    GROUPS = ("theta_g", "theta_f", "theta_d")

    def group(self, name: str) -> Layers:
        return getattr(self, name)

    def arrays(self) -> list[np.ndarray]:
        """Flat list W0, b0, W1, b1, ... across g, f, d in that order."""
        return [a for name in self.GROUPS for layer in self.group(name) for a in layer]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in self.GROUPS:
            for i, (W, b) in enumerate(self.group(name)):
                out.append((f"{name}.{i}.W", W))
                out.append((f"{name}.{i}.b", b))
        return out

    def copy(self) -> "ModelParams":
        def cp(layers):
            return [(W.copy(), b.copy()) for W, b in layers]
        return ModelParams(self.spec_g, self.spec_f, self.spec_d, cp(self.theta_g), cp(self.theta_f),
                           cp(self.theta_d), self.seed)

    def with_arrays(self, arrays) -> "ModelParams":
        it = iter(arrays)
        def take(layers):
            return [(next(it), next(it)) for _ in layers]
        return ModelParams(self.spec_g, self.spec_f, self.spec_d, take(self.theta_g), take(self.theta_f),
                           take(self.theta_d), self.seed)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def default_specs(d_in: int = 2, n_classes: int = 2, d_z: int = 16,
                  g_hidden=(64, 64), d_hidden=(32,)) -> tuple[MlpSpec, MlpSpec, MlpSpec]:
    spec_g = MlpSpec((d_in, *g_hidden, d_z), "relu", "none")
    spec_f = MlpSpec((d_z, n_classes), "relu", "softmax-deferred")
    spec_d = MlpSpec((d_z, *d_hidden, 1), "relu", "sigmoid")
    return spec_g, spec_f, spec_d


def xavier_layers(spec: MlpSpec, rng: np.random.Generator) -> Layers:
    layers = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return layers


def init_params(spec_g: MlpSpec, spec_f: MlpSpec, spec_d: MlpSpec, seed: int) -> ModelParams:
    if not (spec_g.d_out == spec_f.d_in == spec_d.d_in):
        raise ConfigError(f"feature dims do not chain: g out {spec_g.d_out}, f in {spec_f.d_in}, "
                          f"d in {spec_d.d_in}")
    if spec_d.output_transform != "sigmoid" or spec_d.d_out != 1:
        raise ConfigError("discriminator spec must end with sigmoid and output dim 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    return ModelParams(spec_g, spec_f, spec_d, xavier_layers(spec_g, rng), xavier_layers(spec_f, rng),
                       xavier_layers(spec_d, rng), seed)


def mlp(x: Tensor, layers, activation: str = "relu") -> Tensor:
    act = ACTIVATIONS[activation]
    h = x
    for i, (W, b) in enumerate(layers):
        h = nc.affine(h, W, b)
        if i < len(layers) - 1:
            h = act(h)
    return h


def _check_input(x, spec: MlpSpec, what: str):
    if x.data.ndim != 2 or x.shape[1] != spec.d_in:
        raise DimensionError(f"{what}: expected input of shape (batch, {spec.d_in}), got {x.shape}")


def extract_features(params: ModelParams, x, layers=None) -> Tensor:
    """z = g(x). ``layers`` overrides ``params.theta_g`` (used to pass grad-tracking leaves)."""
    x = nc._lift(x)
    _check_input(x, params.spec_g, "extract_features")
    return mlp(x, layers if layers is not None else params.theta_g, params.spec_g.activation)


def classify(params: ModelParams, z, layers=None) -> Tensor:
    z = nc._lift(z)
    _check_input(z, params.spec_f, "classify")
    return mlp(z, layers if layers is not None else params.theta_f, params.spec_f.activation)


def discriminate(params: ModelParams, z, layers=None) -> Tensor:
    z = nc._lift(z)
    _check_input(z, params.spec_d, "discriminate")
    out = nc.sigmoid(mlp(z, layers if layers is not None else params.theta_d, params.spec_d.activation))
    return nc.clamp(out, DISC_EPS, 1.0 - DISC_EPS)


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the smaller class index
    return np.argmax(logits, axis=1)


# checkpoint container ---------------------------------------------------------

def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def params_to_dict(params: ModelParams) -> dict:
    return {
        "spec_g": params.spec_g.to_dict(),
        "spec_f": params.spec_f.to_dict(),
        "spec_d": params.spec_d.to_dict(),
        "seed": params.seed,
        "arrays": {name: encode_array(a) for name, a in params.named_arrays()},
    }


def params_from_dict(d: dict) -> ModelParams:
    specs = [MlpSpec.from_dict(d[k]) for k in ("spec_g", "spec_f", "spec_d")]
    template = init_params(*specs, seed=int(d.get("seed", 0)))
    names = [n for n, _ in template.named_arrays()]
    missing = [n for n in names if n not in d["arrays"]]
    if missing:
        raise ConfigError(f"checkpoint missing arrays: {missing}")
    arrays = [decode_array(d["arrays"][n]) for n in names]
    for n, a, t in zip(names, arrays, template.arrays()):
        if a.shape != t.shape:
            raise DimensionError(f"checkpoint array {n} has shape {a.shape}, spec expects {t.shape}")
    return template.with_arrays(arrays)


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    doc = params_to_dict(params)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()))
