"""Small feed-forward parameterizations: embedders, source head, transport head.

Four maps appear downstream: the source embedder (raw source input ->
feature), the source prediction head (feature -> distribution over source
classes), the target embedder (raw target input -> feature, same feature
space), and the transport-head target predictor, which composes the frozen
source head with a learnable label-transport kernel conditioned on the
feature vector.

Parameters are immutable snapshots; training steps return new snapshots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numgrad as ng
from .numgrad import DimensionError, Matrix, Tape, Tensor

__all__ = [
    "Layer",
    "MlpParams",
    "TransportHeadParams",
    "init_mlp",
    "default_embedder",
    "default_head",
    "init_transport_head",
    "embed",
    "predict_source",
    "kernel_matrices",
    "predict_target",
    "mlp_leaves",
    "mlp_apply",
    "sgd_update",
    "params_vector",
    "params_with_vector",
    "save_params",
    "load_params",
]

_ACTS = ("tanh", "relu", "linear")

# Default toy sizes: feature dim 8, two hidden layers of width 32.
FEATURE_DIM = 8
HIDDEN_WIDTHS = (32, 32)


@dataclass(frozen=True)
class Layer:
    w: Matrix
    b: Matrix  # shape (1, out_dim)
    act: str

    def __post_init__(self):
        if self.act not in _ACTS:
            raise ValueError(f"unknown activation {self.act!r}")
        if self.w.ndim != 2 or self.b.shape != (1, self.w.shape[1]):
            raise DimensionError(
                f"layer shapes inconsistent: w {self.w.shape}, b {self.b.shape}"
            )


@dataclass(frozen=True)
class MlpParams:
    layers: tuple[Layer, ...]

    @property
    def input_dim(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].w.shape[1]

    def n_parameters(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)


@dataclass(frozen=True)
class TransportHeadParams:
    """Kernel mapping (feature u, one-hot source label z) -> logits over z'."""

    mlp: MlpParams
    n_source_classes: int
    n_target_classes: int

    @property
    def feature_dim(self) -> int:
        return self.mlp.input_dim - self.n_source_classes

    def __post_init__(self):
        if self.mlp.output_dim != self.n_target_classes:
            raise DimensionError(
                f"kernel outputs {self.mlp.output_dim} logits, "
                f"expected {self.n_target_classes}"
            )
        # feature_dim == 0 is allowed: a pure label-transport kernel
        if self.mlp.input_dim < self.n_source_classes:
            raise DimensionError("kernel input must cover the one-hot label block")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def init_mlp(
    dims: Sequence[int],
    activation: str = "tanh",
    rng: np.random.Generator | None = None,
    final_linear: bool = True,
) -> MlpParams:
    """Gaussian init with 1/sqrt(fan_in) scale; zero biases."""
    if rng is None:
        rng = np.random.default_rng(0)
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        act = activation
        if final_linear and i == len(dims) - 2:
            act = "linear"
        layers.append(Layer(_frozen(w), _frozen(np.zeros((1, fan_out))), act))
    return MlpParams(tuple(layers))


def default_embedder(input_dim: int, rng: np.random.Generator) -> MlpParams:
    return init_mlp([input_dim, *HIDDEN_WIDTHS, FEATURE_DIM], "tanh", rng)


def default_head(n_classes: int, rng: np.random.Generator, feature_dim: int = FEATURE_DIM) -> MlpParams:
    return init_mlp([feature_dim, n_classes], "tanh", rng)


def init_transport_head(
    feature_dim: int,
    n_source_classes: int,
    n_target_classes: int,
    rng: np.random.Generator | None = None,
    identity_boost: float = 2.0,
    feature_scale: float = 0.0,
) -> TransportHeadParams:
    """Linear kernel on [u, one-hot z].

    When the class counts match, the one-hot block gets a diagonal logit
    boost so the initial kernel is close to the row-stochastic identity and
    the composed target predictor starts out close to the source head.
    Otherwise rows start near uniform.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    w = np.zeros((feature_dim + n_source_classes, n_target_classes))
    if feature_scale > 0.0:
        w[:feature_dim] = rng.normal(0.0, feature_scale, size=(feature_dim, n_target_classes))
    if n_source_classes == n_target_classes:
        w[feature_dim:] = identity_boost * np.eye(n_source_classes)
    mlp = MlpParams(
        (Layer(_frozen(w), _frozen(np.zeros((1, n_target_classes))), "linear"),)
    )
    return TransportHeadParams(mlp, n_source_classes, n_target_classes)


def _activate(x: np.ndarray, act: str) -> np.ndarray:
    if act == "tanh":
        return np.tanh(x)
    if act == "relu":
        return np.maximum(x, 0.0)
    return x


def _mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    h = x
    for layer in params.layers:
        h = _activate(h @ layer.w + layer.b, layer.act)
    return h


def embed(params: MlpParams, x) -> Matrix:
    """Map a batch of raw inputs (rows) to feature rows."""
    x = ng.as_matrix(x, "input batch")
    if x.shape[1] != params.input_dim:
        raise DimensionError(
            f"embed: batch has {x.shape[1]} columns, embedder expects {params.input_dim}"
        )
    out = _mlp_forward(params, x)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("embed produced non-finite features")
    return out


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def predict_source(head: MlpParams, u) -> Matrix:
    """Per-row distribution over source classes at features u."""
    u = ng.as_matrix(u, "feature batch")
    if u.shape[1] != head.input_dim:
        raise DimensionError(
            f"predict_source: features have {u.shape[1]} columns, head expects {head.input_dim}"
        )
    return _stable_softmax(_mlp_forward(head, u))


def kernel_matrices(kernel: TransportHeadParams, u) -> np.ndarray:
    """Row-stochastic label-transport matrices at each feature row.

    Returns an array of shape (n, n_source_classes, n_target_classes); entry
    [i, z, z'] is the kernel's probability of target label z' given source
    label z at feature u_i.
    """
    u = ng.as_matrix(u, "feature batch")
    ks, kt = kernel.n_source_classes, kernel.n_target_classes
    # label-only kernels (feature_dim 0) ignore the features entirely
    if kernel.feature_dim and u.shape[1] != kernel.feature_dim:
        raise DimensionError(
            f"kernel_matrices: features have {u.shape[1]} columns, "
            f"kernel expects {kernel.feature_dim}"
        )
    n = u.shape[0]
    out = np.empty((n, ks, kt))
    eye = np.eye(ks)
    for z in range(ks):
        x = np.hstack([u[:, : kernel.feature_dim], np.tile(eye[z], (n, 1))])
        out[:, z, :] = _stable_softmax(_mlp_forward(kernel.mlp, x))
    return out


def predict_target(source_head: MlpParams, kernel: TransportHeadParams, u) -> Matrix:
    """Compose the source head with the transport kernel: rows of p over z'.

    p(z'|u) = sum_z p_source(z|u) * kernel(z'|z, u); a product of stochastic
    maps, so each output row is a distribution for any finite parameters.
    """
    if source_head.output_dim != kernel.n_source_classes:
        raise DimensionError(
            f"predict_target: head emits {source_head.output_dim} classes, "
            f"kernel consumes {kernel.n_source_classes}"
        )
    p_s = predict_source(source_head, u)
    lam = kernel_matrices(kernel, u)
    return np.einsum("nz,nzt->nt", p_s, lam)


# ---------------------------------------------------------------------------
# Tape plumbing: parameters as leaves, forward passes as graph builders.
# ---------------------------------------------------------------------------


def mlp_leaves(tape: Tape, params: MlpParams) -> list[tuple[Tensor, Tensor]]:
    """Register every layer's (w, b) as differentiable tape leaves."""
    return [(tape.input(l.w), tape.input(l.b)) for l in params.layers]


def mlp_apply(
    params: MlpParams,
    leaves: Iterable[tuple[Tensor, Tensor]],
    x: Tensor,
) -> Tensor:
    h = x
    for layer, (w, b) in zip(params.layers, leaves):
        h = ng.add(ng.matmul(h, w), b)
        if layer.act == "tanh":
            h = ng.tanh(h)
        elif layer.act == "relu":
            h = ng.relu(h)
    return h


def grads_for_leaves(
    grads: ng.Gradients, leaves: list[tuple[Tensor, Tensor]]
) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(grads.wrt(w), grads.wrt(b)) for w, b in leaves]


def sgd_update(
    params: MlpParams,
    grads: list[tuple[np.ndarray, np.ndarray]],
    lr: float,
) -> MlpParams:
    layers = []
    for layer, (gw, gb) in zip(params.layers, grads):
        layers.append(
            Layer(_frozen(layer.w - lr * gw), _frozen(layer.b - lr * gb), layer.act)
        )
    return MlpParams(tuple(layers))


def params_vector(params: MlpParams) -> np.ndarray:
    return np.concatenate([np.concatenate([l.w.ravel(), l.b.ravel()]) for l in params.layers])


def params_with_vector(params: MlpParams, vec: np.ndarray) -> MlpParams:
    needed = params.n_parameters()
    if vec.size != needed:
        raise DimensionError(f"vector has {vec.size} entries, params need {needed}")
    layers = []
    at = 0
    for l in params.layers:
        w = vec[at : at + l.w.size].reshape(l.w.shape)
        at += l.w.size
        b = vec[at : at + l.b.size].reshape(l.b.shape)
        at += l.b.size
        layers.append(Layer(_frozen(w), _frozen(b), l.act))
    return MlpParams(tuple(layers))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_params(params: MlpParams, path, role: str = "") -> None:
    """JSON checkpoint: {layers: [{w, b, act}], meta: {role}}."""
    payload = {
        "layers": [
            {"w": l.w.tolist(), "b": l.b.ravel().tolist(), "act": l.act}
            for l in params.layers
        ],
        "meta": {"role": role},
    }
    Path(path).write_text(json.dumps(payload))


def load_params(path) -> tuple[MlpParams, str]:
    payload = json.loads(Path(path).read_text())
    layers = tuple(
        Layer(
            _frozen(np.array(l["w"], dtype=np.float64)),
            _frozen(np.array(l["b"], dtype=np.float64).reshape(1, -1)),
            l["act"],
        )
        for l in payload["layers"]
    )
    return MlpParams(layers), payload.get("meta", {}).get("role", "")
