"""Encoder, projection head and cosine prototype classifier with exact backprop.

Layers compute ``y = act(x @ W + b)``. The encoder output ``h`` feeds both
the classifier and the projection head; the head output is L2-normalized to
give ``z``. Gradients are accumulated by hand, so every forward has a
matching backward below it.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ViewPair
from .errors import CacheMismatch, IoError, NonPositiveTemperature, ShapeMismatch, ZeroVector
from .numeric import ZERO_NORM, Rng, softmax_temp

ACTIVATIONS = ("tanh", "linear")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    act: str = "tanh"

    def __post_init__(self):
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeMismatch("layer weight must be (in, out) and bias (out,)")


@dataclass
class ModelParams:
    encoder: list[Layer]
    proj: list[Layer]
    prototypes: np.ndarray

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        for stack in (self.encoder, self.proj):
            for a, b in zip(stack, stack[1:]):
                if a.weight.shape[1] != b.weight.shape[0]:
                    raise ShapeMismatch("consecutive layer shapes do not chain")
        if self.encoder and self.proj and self.encoder[-1].weight.shape[1] != self.proj[0].weight.shape[0]:
            raise ShapeMismatch("projection head input must equal hidden width")
        if self.prototypes.ndim != 2 or self.prototypes.shape[1] != self.hidden_dim:
            raise ShapeMismatch("prototype rows must have the hidden width")

    @property
    def input_dim(self) -> int:
        return self.encoder[0].weight.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.encoder[-1].weight.shape[1]

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.encoder + self.proj:
            out += [layer.weight, layer.bias]
        out.append(self.prototypes)
        return out

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec) -> "ModelParams":
        """A new ModelParams with this object's shapes and the values in ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            out = vec[pos:pos + size].reshape(shape).copy()
            pos += size
            return out

        enc = [Layer(take(l.weight.shape), take(l.bias.shape), l.act) for l in self.encoder]
        proj = [Layer(take(l.weight.shape), take(l.bias.shape), l.act) for l in self.proj]
        protos = take(self.prototypes.shape)
        if pos != vec.size:
            raise ShapeMismatch(f"vector has {vec.size} entries, expected {pos}")
        return ModelParams(enc, proj, protos)

    def zeros_like(self) -> "ModelParams":
        return self.from_vector(np.zeros(self.size))

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


def init_params(
    input_dim: int,
    n_classes: int,
    encoder_dims=(32, 32),
    proj_dims=(32, 16),
    rng: Rng | None = None,
    input_scale: float = 1.0,
) -> ModelParams:
    """Random MLP weights with variance 1/fan_in; tanh between layers, linear at each stack end.

    ``input_scale`` is the typical magnitude (RMS) of an input coordinate;
    first-layer weights are shrunk by it so pre-activations start near unit
    scale instead of saturating tanh. Prototype rows start as unit-normalized
    Gaussian draws.
    """
    rng = rng if rng is not None else Rng(0)
    if not input_scale > 0:
        raise ValueError("input_scale must be positive")

    def stack(dims, in_dim, r, scale=1.0):
        layers = []
        for i, out_dim in enumerate(dims):
            w = r.normal(0.0, 1.0 / (np.sqrt(in_dim) * (scale if i == 0 else 1.0)), size=(in_dim, out_dim))
            act = "linear" if i == len(dims) - 1 else "tanh"
            layers.append(Layer(w, np.zeros(out_dim), act))
            in_dim = out_dim
        return layers

    enc = stack(encoder_dims, input_dim, rng.split(0), input_scale)
    proj = stack(proj_dims, encoder_dims[-1], rng.split(1))
    t = rng.split(2).normal(size=(n_classes, encoder_dims[-1]))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    return ModelParams(enc, proj, t)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    params: ModelParams
    n_rows: int
    enc_inputs: list[np.ndarray] = field(default_factory=list)
    enc_outputs: list[np.ndarray] = field(default_factory=list)
    proj_inputs: list[np.ndarray] = field(default_factory=list)
    proj_outputs: list[np.ndarray] = field(default_factory=list)
    g_norm: np.ndarray | None = None
    z: np.ndarray | None = None


def _run_stack(layers, x, inputs, outputs):
    for layer in layers:
        inputs.append(x)
        x = x @ layer.weight + layer.bias
        if layer.act == "tanh":
            x = np.tanh(x)
        outputs.append(x)
    return x


def _back_stack(layers, inputs, outputs, dy, grads):
    for layer, x, y, g in zip(reversed(layers), reversed(inputs), reversed(outputs), reversed(grads)):
        if layer.act == "tanh":
            dy = dy * (1.0 - y * y)
        g.weight += x.T @ dy
        g.bias += dy.sum(axis=0)
        dy = dy @ layer.weight.T
    return dy


def _normalize_rows(g):
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    if np.any(norms <= ZERO_NORM):
        raise ZeroVector("projection output has a zero row")
    return g / norms, norms


def forward_rows(params: ModelParams, x: np.ndarray):
    """Run the network on one matrix; returns ``(h, z, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeMismatch(f"expected rows of width {params.input_dim}, got shape {x.shape}")
    cache = ForwardCache(params, x.shape[0])
    h = _run_stack(params.encoder, x, cache.enc_inputs, cache.enc_outputs)
    g = _run_stack(params.proj, h, cache.proj_inputs, cache.proj_outputs)
    z, norms = _normalize_rows(g)
    cache.g_norm, cache.z = norms, z
    return h, z, cache


def forward(params: ModelParams, batch: ViewPair):
    """Both views through the network in a single stacked pass.

    Returns ``(h_a, h_b, z_a, z_b, cache)``.
    """
    n = len(batch)
    h, z, cache = forward_rows(params, np.vstack([batch.view_a, batch.view_b]))
    return h[:n], h[n:], z[:n], z[n:], cache


def embed(params: ModelParams, x: np.ndarray):
    h, z, _ = forward_rows(params, x)
    return h, z


def backward_rows(params: ModelParams, cache: ForwardCache, dh=None, dz=None, dprototypes=None) -> ModelParams:
    if cache.params is not params:
        raise CacheMismatch("cache was produced with a different parameter object")
    n = cache.n_rows
    for name, g in (("dh", dh), ("dz", dz)):
        if g is not None and g.shape[0] != n:
            raise CacheMismatch(f"{name} has {g.shape[0]} rows, cache has {n}")
    grads = params.zeros_like()
    dh_total = np.zeros((n, params.hidden_dim)) if dh is None else np.array(dh, dtype=np.float64)
    if dz is not None:
        z = cache.z
        dg = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / cache.g_norm
        dh_total += _back_stack(params.proj, cache.proj_inputs, cache.proj_outputs, dg, grads.proj)
    _back_stack(params.encoder, cache.enc_inputs, cache.enc_outputs, dh_total, grads.encoder)
    if dprototypes is not None:
        grads.prototypes += dprototypes
    return grads


def backward(params: ModelParams, cache: ForwardCache, dh_a=None, dh_b=None, dz_a=None, dz_b=None, dprototypes=None):
    """Parameter gradient given upstream gradients on the outputs of :func:`forward`.

    ``dprototypes`` carries any gradient that reaches the prototype bank
    directly (through the classifier). ``None`` means zero.
    """
    n = cache.n_rows // 2

    def join(a, b, width):
        if a is None and b is None:
            return None
        a = np.zeros((n, width)) if a is None else a
        b = np.zeros((n, width)) if b is None else b
        return np.vstack([a, b])

    dz_width = params.proj[-1].weight.shape[1]
    return backward_rows(
        params, cache, join(dh_a, dh_b, params.hidden_dim), join(dz_a, dz_b, dz_width), dprototypes
    )


# ---------------------------------------------------------------------------
# Cosine classifier
# ---------------------------------------------------------------------------


@dataclass
class CosineAux:
    h_unit: np.ndarray
    h_norm: np.ndarray
    t_unit: np.ndarray
    t_norm: np.ndarray


def cosine_scores(params: ModelParams, h: np.ndarray):
    """Cosine similarity of every hidden row with every prototype: ``(scores, aux)``."""
    h = np.asarray(h, dtype=np.float64)
    hn = np.linalg.norm(h, axis=1, keepdims=True)
    tn = np.linalg.norm(params.prototypes, axis=1, keepdims=True)
    if np.any(hn <= ZERO_NORM) or np.any(tn <= ZERO_NORM):
        raise ZeroVector("hidden feature or prototype has zero norm")
    hu, tu = h / hn, params.prototypes / tn
    return hu @ tu.T, CosineAux(hu, hn, tu, tn)


def cosine_scores_backward(aux: CosineAux, dscores: np.ndarray):
    """Gradients of the score matrix w.r.t. ``h`` and the prototype bank."""
    dhu = dscores @ aux.t_unit
    dtu = dscores.T @ aux.h_unit
    dh = (dhu - aux.h_unit * np.sum(aux.h_unit * dhu, axis=1, keepdims=True)) / aux.h_norm
    dt = (dtu - aux.t_unit * np.sum(aux.t_unit * dtu, axis=1, keepdims=True)) / aux.t_norm
    return dh, dt


def classify(params: ModelParams, h: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over prototypes of the temperature-scaled cosine similarity."""
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    scores, _ = cosine_scores(params, h)
    return softmax_temp(scores, tau)


def predict(params: ModelParams, x: np.ndarray, tau: float = 0.1) -> np.ndarray:
    h, _ = embed(params, x)
    return np.argmax(classify(params, h, tau), axis=1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "ctxgcd-checkpoint"


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> Path:
    """JSON header plus base64 little-endian float64 payload; round-trips bitwise."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "encoder": [{"shape": list(l.weight.shape), "act": l.act} for l in params.encoder],
        "proj": [{"shape": list(l.weight.shape), "act": l.act} for l in params.proj],
        "prototypes_shape": list(params.prototypes.shape),
        "dtype": "<f8",
        "data": base64.b64encode(params.to_vector().astype("<f8").tobytes()).decode("ascii"),
    }
    if extra:
        meta["extra"] = extra
    path = Path(path)
    path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError:
        raise IoError(f"no such checkpoint: {path}") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise IoError(f"{path} is not a checkpoint file")

    def template(specs):
        return [Layer(np.zeros(s["shape"]), np.zeros(s["shape"][1]), s["act"]) for s in specs]

    shell = ModelParams(template(meta["encoder"]), template(meta["proj"]), np.zeros(meta["prototypes_shape"]))
    vec = np.frombuffer(base64.b64decode(meta["data"]), dtype="<f8")
    return shell.from_vector(vec)
