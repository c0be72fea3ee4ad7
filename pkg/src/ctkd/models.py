"""Desk-scale classifiers: linear, MLP and a tiny CNN.

All parameters are initialised from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` with
a seeded generator, so a spec fully determines the starting weights.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ARCHS = ("linear", "mlp", "small_cnn")
CNN_CHANNELS = 8
CHECKPOINT_VERSION = 1


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``widths`` runs from input to output, e.g. ``[784, 256, 10]`` for an MLP
    with one hidden layer. ``linear`` and ``small_cnn`` use ``[input_dim, C]``;
    for ``small_cnn`` the input is a flattened square image.
    """

    arch: str
    widths: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        problems = self.problems()
        if problems:
            raise SpecError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.arch not in ARCHS:
            out.append(f"unknown arch {self.arch!r} (expected one of {', '.join(ARCHS)})")
        if len(self.widths) < 2:
            out.append("widths needs at least input and output sizes")
        if any(w <= 0 for w in self.widths):
            out.append("all widths must be positive")
        if self.arch in ("linear", "small_cnn") and len(self.widths) != 2:
            out.append(f"{self.arch} takes exactly [input_dim, classes]")
        if self.arch == "small_cnn" and self.widths:
            side = math.isqrt(self.widths[0])
            if side * side != self.widths[0] or side % 2:
                out.append("small_cnn input must be a flattened square image with even side")
        return out

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @classmethod
    def mlp(cls, input_dim: int, hidden, num_classes: int, seed: int = 0) -> "ModelSpec":
        hidden = list(hidden)
        arch = "mlp" if hidden else "linear"
        return cls(arch, (input_dim, *hidden, num_classes), seed)

    @classmethod
    def linear(cls, input_dim: int, num_classes: int, seed: int = 0) -> "ModelSpec":
        return cls("linear", (input_dim, num_classes), seed)

    @classmethod
    def small_cnn(cls, side: int, num_classes: int, seed: int = 0) -> "ModelSpec":
        return cls("small_cnn", (side * side, num_classes), seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["arch"], tuple(d["widths"]), int(d.get("seed", 0)))


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Model:
    spec: ModelSpec
    params: list[Tensor] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def __call__(self, batch) -> Tensor:
        return forward(self, batch)


def build(spec: ModelSpec) -> Model:
    rng = np.random.default_rng(spec.seed)
    params: list[Tensor] = []
    if spec.arch == "small_cnn":
        side = math.isqrt(spec.input_dim)
        params.append(Tensor(_uniform(rng, 9, (9, CNN_CHANNELS)), True))
        params.append(Tensor(_uniform(rng, 9, (CNN_CHANNELS,)), True))
        flat = (side // 2) ** 2 * CNN_CHANNELS
        params.append(Tensor(_uniform(rng, flat, (flat, spec.num_classes)), True))
        params.append(Tensor(_uniform(rng, flat, (spec.num_classes,)), True))
    else:
        for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
            params.append(Tensor(_uniform(rng, fan_in, (fan_in, fan_out)), True))
            params.append(Tensor(_uniform(rng, fan_in, (fan_out,)), True))
    return Model(spec, params)


def forward(model: Model, batch) -> Tensor:
    """Pre-softmax logits ``B x C`` for a ``B x D`` batch."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError(f"expected batch of width {model.spec.input_dim}, got {x.shape}")
    p = model.params
    if model.spec.arch == "small_cnn":
        side = math.isqrt(model.spec.input_dim)
        h = ad.reshape(x, (x.shape[0], side, side))
        h = ad.relu(ad.conv3x3(h, p[0], p[1]))
        h = ad.avg_pool2x2(h)
        h = ad.reshape(h, (x.shape[0], -1))
        return ad.linear(h, p[2], p[3])
    h = x
    last = len(p) // 2 - 1
    for i in range(0, len(p), 2):
        h = ad.linear(h, p[i], p[i + 1])
        if i // 2 < last:
            h = ad.relu(h)
    return h


# -- checkpoints --------------------------------------------------------------
def save_checkpoint(path, model: Model, extra: dict[str, list[Tensor]] | None = None,
                    meta: dict | None = None) -> Path:
    """Write spec + raw float64 parameters to an ``.npz`` container.

    ``extra`` holds additional named parameter groups (e.g. a temperature
    module) stored next to the model's own.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = extra or {}
    header = {
        "format": "ctkd-checkpoint",
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "groups": {"model": len(model.params), **{k: len(v) for k, v in extra.items()}},
        "meta": meta or {},
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for group, tensors in {"model": model.params, **extra}.items():
        for i, t in enumerate(tensors):
            arrays[f"{group}.{i}"] = t.data
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, list[np.ndarray]]]:
    """Return the header and every parameter group as plain arrays."""
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("format") != "ctkd-checkpoint":
            raise ValueError(f"{path}: not a ctkd checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        groups = {g: [z[f"{g}.{i}"].copy() for i in range(n)] for g, n in header["groups"].items()}
    return header, groups


def load_checkpoint(path) -> Model:
    header, groups = read_checkpoint(path)
    spec = ModelSpec.from_dict(header["spec"])
    model = build(spec)
    if len(groups["model"]) != len(model.params):
        raise ValueError(f"{path}: parameter count does not match spec")
    for p, arr in zip(model.params, groups["model"]):
        if p.shape != arr.shape:
            raise ValueError(f"{path}: parameter shape {arr.shape} != expected {p.shape}")
        p.data = arr
    return model
