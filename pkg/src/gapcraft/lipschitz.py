"""Source-head recalibration: hinge-squared gradient-norm penalty and sweeps.

The feature-space loss at u is the cross-entropy of the source prediction
against the task conditional.  Recalibration retrains only the head's last
layer so the empirical norm of the feature gradient of that loss stays
near a target bound omega, while a proxy cross-entropy term (weight 1:1)
keeps predictive performance from collapsing.

Only first-order machinery is needed: with the lower head layers frozen,
the feature gradient is jac_lower(u)^T W (p - d), an explicit expression
in the trainable last layer (W, b), so the penalty goes on the tape
directly instead of differentiating through a gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numgrad as ng
from . import models
from .models import MlpParams
from .probs import as_conditional

__all__ = [
    "LipschitzConfig",
    "DivergenceError",
    "RecalibrationResult",
    "source_pointwise_loss",
    "pointwise_losses",
    "feature_gradients",
    "penalty_value",
    "recalibrate_head",
    "sweep_omega",
    "sweep_to_csv",
]

LOG_FLOOR = 1e-12


class DivergenceError(RuntimeError):
    """Recalibration objective rose for several consecutive epochs."""


@dataclass(frozen=True)
class LipschitzConfig:
    omega: float = 0.3  # 0.3 suits 2D-style synthetic tasks, 0.5 the 1D-style ones
    penalty_weight: float = 1.0
    epochs: int = 300
    lr: float = 0.1
    grad_clip: float = 5.0  # SGD survives the initial penalty cliff
    # Hinge threshold used during training, as a fraction of omega.  The
    # quadratic hinge equilibrates slightly above its threshold, so
    # enforcing against a small inner margin lands the realized norms at
    # the nominal bound; evaluation always reports against omega itself.
    enforcement_margin: float = 1.0

    def __post_init__(self):
        if self.omega <= 0.0:
            raise ValueError("omega must be positive")
        if not 0.0 < self.enforcement_margin <= 1.0:
            raise ValueError("enforcement_margin must lie in (0, 1]")


@dataclass(frozen=True)
class RecalibrationResult:
    head: MlpParams
    initial_penalty: float
    final_penalty: float
    penalty_history: tuple[float, ...]


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return np.eye(k)[labels]


def pointwise_losses(head: MlpParams, u, conditional) -> tuple[np.ndarray, bool]:
    """Cross-entropy of the head against per-row conditionals, in nats.

    Predictions at exactly zero probability on a supported class are
    clamped at 1e-12; the returned flag reports whether that happened.
    """
    u = ng.as_matrix(u, "feature batch")
    d = as_conditional(conditional, "task conditional")
    p = models.predict_source(head, u)
    clamped = bool(np.any((p < LOG_FLOOR) & (d > 0.0)))
    logp = np.log(np.maximum(p, LOG_FLOOR))
    return -(d * logp).sum(axis=1), clamped


def source_pointwise_loss(head: MlpParams, u, conditional) -> float:
    """Loss at a single feature point; see :func:`pointwise_losses`."""
    losses, _ = pointwise_losses(head, np.atleast_2d(u), np.atleast_2d(conditional))
    return float(losses[0])


def _lower_stack(head: MlpParams, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hidden activations and per-sample Jacobians d h / d u of all layers
    below the trainable last layer."""
    n, d_in = u.shape
    h = u
    jac = np.broadcast_to(np.eye(d_in), (n, d_in, d_in)).copy()
    for layer in head.layers[:-1]:
        pre = h @ layer.w + layer.b
        if layer.act == "tanh":
            h = np.tanh(pre)
            dact = 1.0 - h * h
        elif layer.act == "relu":
            h = np.maximum(pre, 0.0)
            dact = (pre > 0.0).astype(np.float64)
        else:
            h = pre
            dact = np.ones_like(pre)
        jac = dact[:, :, None] * np.einsum("io,niu->nou", layer.w, jac)
    return h, jac


def feature_gradients(head: MlpParams, u, conditional) -> np.ndarray:
    """Analytic gradient of the pointwise loss with respect to the feature.

    grad_u = jac_lower(u)^T W (p - d) with p the head's prediction and d
    the conditional; exact for softmax heads of any depth.
    """
    u = ng.as_matrix(u, "feature batch")
    d = as_conditional(conditional, "task conditional")
    h, jac = _lower_stack(head, u)
    last = head.layers[-1]
    p = models.predict_source(head, u)
    grad_h = (p - d) @ last.w.T
    return np.einsum("nh,nhu->nu", grad_h, jac)


def penalty_value(head: MlpParams, u, conditional, omega: float) -> float:
    """Mean squared hinge of the feature-gradient norms above omega."""
    norms = np.linalg.norm(feature_gradients(head, u, conditional), axis=1)
    return float(np.mean(np.maximum(norms - omega, 0.0) ** 2))


def _recalibration_loss(
    head: MlpParams,
    h_const: np.ndarray,
    jac_const: np.ndarray,
    d_const: np.ndarray,
    cfg: LipschitzConfig,
):
    """Build the tape for penalty_weight * penalty + proxy cross-entropy.

    Per-sample feature gradients assemble column by column against the
    frozen lower-stack Jacobians, so the node count stays independent of
    the batch size.  Row norms go through exp(0.5 log(s)); the hinge zeroes
    the gradient path wherever s <= omega^2, which keeps the composition
    away from log's pole.
    """
    n, _, u_dim = jac_const.shape
    last = head.layers[-1]
    tape = ng.Tape()
    w_t = tape.input(last.w)
    b_t = tape.input(last.b)
    hc = tape.constant(h_const)
    dc = tape.constant(d_const)
    neg = tape.constant(np.array([[-1.0]]))
    neg_omega = tape.constant(np.array([[-cfg.omega * cfg.enforcement_margin]]))

    logits = ng.add(ng.matmul(hc, w_t), b_t)
    p = ng.softmax(logits)
    residual = ng.add(p, ng.mul(dc, neg))  # p - d
    grad_h = ng.matmul(residual, ng.transpose(w_t))  # (n, h_dim)

    identity_jac = h_const.shape[1] == u_dim and np.array_equal(
        jac_const, np.broadcast_to(np.eye(u_dim), (n, u_dim, u_dim))
    )
    if identity_jac:
        g_u = grad_h
    else:
        g_u = None
        basis = np.eye(u_dim)
        ones_h = tape.constant(np.ones((jac_const.shape[1], 1)))
        for k in range(u_dim):
            col = ng.matmul(ng.mul(grad_h, tape.constant(jac_const[:, :, k])), ones_h)
            part = ng.matmul(col, tape.constant(basis[k : k + 1]))
            g_u = part if g_u is None else ng.add(g_u, part)

    sq_norms = ng.matmul(ng.square(g_u), tape.constant(np.ones((u_dim, 1))))
    half = tape.constant(np.array([[0.5]]))
    floor = tape.constant(np.full((n, 1), 1e-30))
    norms = ng.exp(ng.mul(ng.log(ng.add(sq_norms, floor)), half))
    hinge_sq = ng.square(ng.hinge(ng.add(norms, neg_omega)))
    inv_n = tape.constant(np.array([[1.0 / n]]))
    penalty = ng.mul(ng.sum(hinge_sq), inv_n)

    ce = ng.mul(ng.sum(ng.mul(ng.log_softmax(logits), dc)), ng.mul(inv_n, neg))
    weight = tape.constant(np.array([[cfg.penalty_weight]]))
    loss = ng.add(ng.mul(penalty, weight), ce)
    return tape, w_t, b_t, penalty, loss


def recalibrate_head(
    head: MlpParams,
    theta: MlpParams,
    proxy_x,
    proxy_y,
    cfg: LipschitzConfig,
    conditional: np.ndarray | None = None,
) -> RecalibrationResult:
    """Retrain the head's last layer to push feature-gradient norms under omega.

    The proxy conditional defaults to the observed one-hot labels
    (empirical mode); pass an explicit matrix for exact mode.  Lower head
    layers and the embedder are never touched.  If the penalty is already
    zero the constraint is inactive and the head is returned unchanged.
    """
    x = ng.as_matrix(proxy_x, "proxy batch")
    if x.shape[0] == 0:
        raise ValueError("recalibrate_head: proxy dataset is empty")
    u = models.embed(theta, x)
    d = (
        _onehot(proxy_y, head.output_dim)
        if conditional is None
        else as_conditional(conditional, "proxy conditional")
    )
    initial = penalty_value(head, u, d, cfg.omega)
    if initial == 0.0:
        return RecalibrationResult(head, 0.0, 0.0, (0.0,))

    h_const, jac_const = _lower_stack(head, u)
    current = head
    history = [initial]
    objective_history: list[float] = []
    rising = 0
    for epoch in range(cfg.epochs):
        tape, w_t, b_t, _, loss = _recalibration_loss(
            current, h_const, jac_const, d, cfg
        )
        # Divergence is judged on the optimized joint objective; the penalty
        # component alone may rise for a while as the cross-entropy term
        # trades against it.
        objective = float(loss.value[0, 0])
        if objective_history and objective > objective_history[-1]:
            rising += 1
            if rising >= 5:
                raise DivergenceError(
                    f"objective rose for 5 consecutive epochs at epoch {epoch + 1}: "
                    f"{[*objective_history[-5:], objective]}"
                )
        else:
            rising = 0
        objective_history.append(objective)
        grads = tape.backward(loss)
        gw, gb = grads.wrt(w_t), grads.wrt(b_t)
        gnorm = float(np.sqrt((gw * gw).sum() + (gb * gb).sum()))
        if cfg.grad_clip > 0.0 and gnorm > cfg.grad_clip:
            gw = gw * (cfg.grad_clip / gnorm)
            gb = gb * (cfg.grad_clip / gnorm)
        new_w = current.layers[-1].w - cfg.lr * gw
        new_b = current.layers[-1].b - cfg.lr * gb
        current = models.MlpParams(
            current.layers[:-1]
            + (models.Layer(np.ascontiguousarray(new_w), np.ascontiguousarray(new_b), current.layers[-1].act),)
        )
        history.append(penalty_value(current, u, d, cfg.omega))
    return RecalibrationResult(current, initial, history[-1], tuple(history))


def sweep_omega(
    candidates,
    theta: MlpParams,
    head: MlpParams,
    proxy_x,
    proxy_y,
    cfg: LipschitzConfig = LipschitzConfig(),
    holdout_fraction: float = 0.25,
    seed: int = 0,
) -> list[dict]:
    """Recalibrate at each omega; report held-out proxy error and residual.

    Candidates must be positive and sorted ascending.  The proxy set is
    split once (seeded) so every omega sees the same train/holdout halves.
    """
    candidates = [float(w) for w in candidates]
    if any(w <= 0 for w in candidates) or candidates != sorted(candidates):
        raise ValueError("omega candidates must be positive and sorted")
    x = ng.as_matrix(proxy_x, "proxy batch")
    y = np.asarray(proxy_y, dtype=np.int64).ravel()
    rng = np.random.default_rng(seed)
    order = rng.permutation(x.shape[0])
    n_hold = max(1, int(round(holdout_fraction * x.shape[0])))
    hold, train = order[:n_hold], order[n_hold:]
    rows = []
    for omega in candidates:
        run_cfg = LipschitzConfig(omega, cfg.penalty_weight, cfg.epochs, cfg.lr)
        result = recalibrate_head(head, theta, x[train], y[train], run_cfg)
        u_hold = models.embed(theta, x[hold])
        pred = np.argmax(models.predict_source(result.head, u_hold), axis=1)
        rows.append(
            {
                "omega": omega,
                "proxy_error": float(np.mean(pred != y[hold])),
                "penalty_residual": result.final_penalty,
            }
        )
    return rows


def sweep_to_csv(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["omega", "proxy_error", "penalty_residual"])
        for row in rows:
            writer.writerow(
                [row["omega"], row["proxy_error"], repr(row["penalty_residual"])]
            )
