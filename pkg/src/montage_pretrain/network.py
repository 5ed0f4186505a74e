"""Toy convolutional backbone with a 1x1 classifier head.

Stages of ``3x3 conv (same padding) -> ReLU -> 2x2 average pool`` produce the
feature map X at 1/2^stages resolution; a 1x1 convolution maps X to C+1
per-position logits.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

CHECKPOINT_MAGIC = b"MNTGCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    num_classes: int
    channels: tuple[int, ...] = (16, 32, 64, 64)
    in_channels: int = 3
    kernel: int = 3
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels:
            raise ValueError("need at least one stage")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def alpha(self) -> float:
        return 1.0 / self.pool ** self.stages

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    def layers(self) -> list[dict]:
        """Flat layer descriptor, input to output."""
        out, cin = [], self.in_channels
        for i, cout in enumerate(self.channels):
            out.append({"type": "conv", "name": f"conv{i}", "in": cin, "out": cout,
                        "kernel": self.kernel, "stride": 1, "pad": self.kernel // 2})
            out.append({"type": "relu"})
            out.append({"type": "avgpool", "kernel": self.pool, "stride": self.pool})
            cin = cout
        out.append({"type": "conv", "name": "head", "in": cin, "out": self.num_classes,
                    "kernel": 1, "stride": 1, "pad": 0})
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for layer in self.layers():
            if layer["type"] == "conv":
                k = layer["kernel"]
                shapes[layer["name"] + ".weight"] = (layer["out"], layer["in"], k, k)
                shapes[layer["name"] + ".bias"] = (layer["out"],)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**{**d, "channels": tuple(d["channels"])})


@dataclass(frozen=True)
class FeatureGeometry:
    input_h: int
    input_w: int
    alpha: float

    @classmethod
    def for_input(cls, arch: Architecture, h: int, w: int) -> "FeatureGeometry":
        step = arch.pool ** arch.stages
        if h % step or w % step:
            raise ShapeError(f"input {h}x{w} must be divisible by {step} for a {arch.stages}-stage network")
        return cls(h, w, arch.alpha)

    @property
    def stride(self) -> int:
        return int(round(1 / self.alpha))

    @property
    def feature_h(self) -> int:
        return self.input_h // self.stride

    @property
    def feature_w(self) -> int:
        return self.input_w // self.stride

    def cell_center(self, j: int, k: int) -> tuple[float, float]:
        """Input-space (x, y) of the centre of feature cell (row j, col k)."""
        return ((k + 0.5) / self.alpha, (j + 0.5) / self.alpha)


@dataclass
class NetworkParams:
    arch: Architecture
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if set(shapes) != set(self.arrays):
            raise ShapeError(f"parameter names {sorted(self.arrays)} do not match architecture {sorted(shapes)}")
        for name, shape in shapes.items():
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.arrays[name].shape} != expected {shape}")

    def names(self) -> list[str]:
        return list(self.arch.param_shapes())

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in self.names()])

    def with_flat(self, vec: np.ndarray) -> "NetworkParams":
        out, pos = {}, 0
        for n in self.names():
            a = self.arrays[n]
            out[n] = vec[pos:pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return NetworkParams(self.arch, out)

    def norm(self) -> float:
        return float(np.sqrt(sum((a * a).sum() for a in self.arrays.values())))


def init_params(arch: Architecture, seed: int = 0) -> NetworkParams:
    """Fan-in scaled uniform weights (He bound for ReLU stages), zero biases."""
    rng = np.random.default_rng([seed, 99])
    arrays = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in) if not name.startswith("head") else np.sqrt(1.0 / fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return NetworkParams(arch, arrays)


def zero_params(arch: Architecture) -> NetworkParams:
    return NetworkParams(arch, {n: np.zeros(s) for n, s in arch.param_shapes().items()})


@dataclass
class Graph:
    """One recorded forward pass."""

    input: Tensor
    features: Tensor
    logits: Tensor
    params: dict[str, Tensor]

    def param_grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.params.items()}


def build_graph(params: NetworkParams, x: np.ndarray, input_grad: bool = False,
                param_grad: bool = True) -> Graph:
    x = np.asarray(x, dtype=np.float64)
    arch = params.arch
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ShapeError(f"input: expected (N, {arch.in_channels}, H, W), got {x.shape}")
    p = {n: Tensor(a, requires_grad=param_grad, name=n) for n, a in params.arrays.items()}
    inp = Tensor(x, requires_grad=input_grad, name="input")
    h = inp
    for layer in arch.layers():
        kind = layer["type"]
        if kind == "conv" and layer["name"] == "head":
            break
        if kind == "conv":
            n = layer["name"]
            h = ad.conv2d(h, p[n + ".weight"], p[n + ".bias"], layer["stride"], layer["pad"], name=n)
        elif kind == "relu":
            h = ad.relu(h)
        else:
            h = ad.avg_pool2d(h, layer["kernel"])
    logits = ad.conv2d(h, p["head.weight"], p["head.bias"], name="head")
    return Graph(inp, h, logits, p)


def forward(params: NetworkParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(feature map X, per-position logits)."""
    g = build_graph(params, x, param_grad=False)
    return g.features.data, g.logits.data


@dataclass
class Gradients:
    arrays: dict[str, np.ndarray]
    input: np.ndarray | None = None


def backward(params: NetworkParams, x: np.ndarray, upstream_logits: np.ndarray | None,
             want_input_grad: bool = False, upstream_features: np.ndarray | None = None) -> Gradients:
    """Reverse-mode gradients for given upstream gradients on the logits and/or X."""
    g = build_graph(params, x, input_grad=want_input_grad)
    if upstream_logits is None and upstream_features is None:
        raise ValueError("need an upstream gradient")
    # a single scalar surrogate sum(up * out) routes both gradients through one sweep
    terms = []
    if upstream_logits is not None:
        if np.shape(upstream_logits) != g.logits.shape:
            raise ShapeError(f"upstream gradient {np.shape(upstream_logits)} != logits {g.logits.shape}")
        terms.append(ad.weighted_sum(g.logits, upstream_logits))
    if upstream_features is not None:
        if np.shape(upstream_features) != g.features.shape:
            raise ShapeError(f"upstream gradient {np.shape(upstream_features)} != features {g.features.shape}")
        terms.append(ad.weighted_sum(g.features, upstream_features))
    for t in terms:
        if t.requires_grad:
            t.backward()
    gin = None
    if want_input_grad:
        gin = g.input.grad if g.input.grad is not None else np.zeros_like(x, dtype=np.float64)
    return Gradients(g.param_grads(), gin)


def sgd_step(params: NetworkParams, grads: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0,
             momentum: float = 0.0, state: dict[str, np.ndarray] | None = None
             ) -> tuple[NetworkParams, dict[str, np.ndarray]]:
    """Heavy-ball SGD with L2 folded into the gradient: v = m v + g + wd p; p -= lr v."""
    state = {} if state is None else state
    new_p, new_s = {}, {}
    for name, p in params.arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = g + weight_decay * p
        if name in state:
            v = momentum * state[name] + v
        new_s[name] = v
        new_p[name] = p - lr * v
    return NetworkParams(params.arch, new_p), new_s


def grad_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], point: np.ndarray,
               epsilon: float = 1e-4, n_coords: int = 200, rng: np.random.Generator | None = None,
               floor: float = 1e-8) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(point) -> (value, gradient)``. Checks ``n_coords`` random coordinates (all
    of them when the point is smaller).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    point = np.array(point, dtype=np.float64)
    _, analytic = fn(point)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(point.shape)
    flat = point.reshape(-1)
    idx = np.arange(flat.size) if flat.size <= n_coords else rng.choice(flat.size, size=n_coords, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp, _ = fn(point)
        flat[i] = orig - epsilon
        fm, _ = fn(point)
        flat[i] = orig
        numeric = (fp - fm) / (2 * epsilon)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def save_checkpoint(path: str | Path, params: NetworkParams, meta: dict | None = None) -> None:
    """Binary layout, little-endian throughout::

        8s  magic "MNTGCKPT"
        u32 version
        u32 header length L, then L bytes of UTF-8 JSON
            {"arch": {...}, "meta": {...}, "params": [[name, [dims...]], ...]}
        float64 data for each parameter in header order, C order
    """
    names = params.names()
    header = json.dumps({
        "arch": params.arch.to_dict(),
        "meta": meta or {},
        "params": [[n, list(params.arrays[n].shape)] for n in names],
    }, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for n in names:
        buf.write(np.ascontiguousarray(params.arrays[n], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    arrays = {}
    for name, dims in header["params"]:
        count = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return NetworkParams(Architecture.from_dict(header["arch"]), arrays), header["meta"]
