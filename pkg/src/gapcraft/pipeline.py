"""Two-stage fine-tuning pipeline, ablation baselines, gap-error tracking.

Stage 1 learns the target embedder: first the alignment epochs (Wasserstein
distance between embedded target and source batches under the fixed
coupling gradient), then the distortion epochs (pseudo-label conditional
entropy), sequentially.  Stage 2 freezes the embedder and fits the
transport-head predictor by negative log-likelihood.  The ablations are
structural reductions of the same code path: ``nft`` skips stage 1
entirely, ``fa_only`` drops the distortion epochs, so bit-identical
reproductions under shared seeds come for free.

During stage 1 there is no trained target predictor yet; checkpoint
held-out errors use the predictor induced by the pseudo-label statistics
(the row-normalized joint), which is cheap, deterministic, and tracks how
transferable the current embedder is.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import distortion, lipschitz, models, transport
from . import numgrad as ng
from .lipschitz import LipschitzConfig
from .models import MlpParams, TransportHeadParams
from .synthtasks import Dataset, Discretizer, TaskBundle, discretize
from .transport import SinkhornConfig

__all__ = [
    "PipelineConfig",
    "RunRecord",
    "RunLog",
    "PipelineResult",
    "UndefinedCorrelationError",
    "pretrain_source",
    "stage1",
    "stage2",
    "run_pipeline",
    "run_baseline",
    "correlate_gap_error",
    "induced_predictor_error",
    "baseline_table_to_csv",
    "nrmse",
]

PHASES = ("fa", "fld", "predictor")
VARIANTS = ("recraft", "nft", "fa_only")


class UndefinedCorrelationError(ValueError):
    """Too few distinct checkpoints to define a correlation."""


@dataclass(frozen=True)
class PipelineConfig:
    n0: int = 60  # predictor epochs
    n1: int = 60  # alignment epochs
    n2: int = 4  # distortion epochs
    pretrain_epochs: int = 300
    lr_pretrain: float = 0.5
    lr_fa: float = 0.2
    lr_fld: float = 0.1
    lr_predictor: float = 0.5
    batch_size: int | None = None  # None: full batch
    omega: float = 0.3
    sinkhorn: SinkhornConfig = field(default_factory=lambda: SinkhornConfig(0.1, 500, 1e-6))
    lipschitz: LipschitzConfig = field(
        default_factory=lambda: LipschitzConfig(0.3, 10.0, 300, 0.1, enforcement_margin=0.8)
    )
    recalibrate: bool = True
    seed: int = 0
    baseline: str = "recraft"
    scale: float = 1.0  # shrinks epoch counts for fast runs

    def __post_init__(self):
        if min(self.n0, self.n1, self.n2, self.pretrain_epochs) < 0:
            raise ValueError("epoch counts must be nonnegative")
        if min(self.lr_pretrain, self.lr_fa, self.lr_fld, self.lr_predictor) <= 0:
            raise ValueError("learning rates must be positive")
        if self.baseline not in VARIANTS:
            raise ValueError(f"baseline must be one of {VARIANTS}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def effective_epochs(self) -> tuple[int, int, int]:
        """(n1, n2, n0) after the variant reduction and scale factor."""
        n1 = 0 if self.baseline == "nft" else round(self.n1 * self.scale)
        n2 = (
            0
            if self.baseline in ("nft", "fa_only")
            else round(self.n2 * self.scale)
        )
        return int(n1), int(n2), int(round(self.n0 * self.scale))


@dataclass(frozen=True)
class RunRecord:
    epoch: int
    phase: str
    l_fa: float
    l_fld: float
    semantic_gap: float
    holdout_error: float
    train_nll: float
    wall_time: float

    def comparable(self) -> tuple:
        # NaN placeholders become None so tuple equality behaves
        clean = tuple(
            None if isinstance(v, float) and np.isnan(v) else v
            for v in (
                self.l_fa,
                self.l_fld,
                self.semantic_gap,
                self.holdout_error,
                self.train_nll,
            )
        )
        return (self.epoch, self.phase, *clean)


@dataclass
class RunLog:
    records: list[RunRecord] = field(default_factory=list)

    def append(self, record: RunRecord) -> None:
        if self.records:
            last = self.records[-1]
            key = (PHASES.index(record.phase), record.epoch)
            if key <= (PHASES.index(last.phase), last.epoch):
                raise ValueError("run log records must be strictly ordered")
        self.records.append(record)

    def phase(self, name: str) -> list[RunRecord]:
        return [r for r in self.records if r.phase == name]

    def comparable(self) -> list[tuple]:
        """Everything except wall time, for bit-level reproducibility checks."""
        return [r.comparable() for r in self.records]

    def to_jsonl(self, path) -> None:
        with Path(path).open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.__dict__) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "RunLog":
        log = cls()
        with Path(path).open() as fh:
            for line in fh:
                log.records.append(RunRecord(**json.loads(line)))
        return log

    def merged(self, other: "RunLog") -> "RunLog":
        return RunLog(self.records + other.records)


@dataclass(frozen=True)
class PipelineResult:
    theta: MlpParams
    source_head: MlpParams
    phi: MlpParams
    kernel: TransportHeadParams
    log: RunLog
    holdout_error: float
    source_proxy_error: float


def _rng_for(seed: int, *tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *tag]))


def _labels_as_classes(ds: Dataset, n_bins: int = 10) -> tuple[np.ndarray, Discretizer | None]:
    if np.issubdtype(ds.y.dtype, np.integer):
        return ds.y.astype(np.int64), None
    disc = Discretizer.fit(ds.y, n_bins)
    return discretize(ds.y, disc), disc


def nrmse(predicted, actual) -> float:
    """Root-mean-square error normalized by the targets' RMS magnitude."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    scale = float(np.sqrt(np.mean(actual**2)))
    return float(np.sqrt(np.mean((predicted - actual) ** 2)) / max(scale, 1e-12))


def _cross_entropy_tape(tape, logits, onehot: np.ndarray):
    neg_inv = tape.constant(np.array([[-1.0 / onehot.shape[0]]]))
    picked = ng.mul(ng.log_softmax(logits), tape.constant(onehot))
    return ng.mul(ng.sum(picked), neg_inv)


def pretrain_source(
    bundle: TaskBundle,
    cfg: PipelineConfig,
    hidden: Sequence[int] = (16,),
    feature_dim: int = 8,
) -> tuple[MlpParams, MlpParams, float]:
    """Train the source embedder and head jointly by cross-entropy.

    Returns (embedder, head, proxy error); the proxy set acts as the
    held-out split since it is an independent draw of the same
    distribution.
    """
    x, y = bundle.source.x, bundle.source.y.astype(np.int64)
    k = int(bundle.meta.get("n_classes", y.max() + 1))
    rng = _rng_for(cfg.seed, 1)
    theta = models.init_mlp([x.shape[1], *hidden, feature_dim], "tanh", rng)
    head = models.init_mlp([feature_dim, k], "tanh", rng)
    onehot = np.eye(k)[y]
    epochs = int(round(cfg.pretrain_epochs * cfg.scale))
    for _ in range(epochs):
        tape = ng.Tape()
        theta_leaves = models.mlp_leaves(tape, theta)
        head_leaves = models.mlp_leaves(tape, head)
        u = models.mlp_apply(theta, theta_leaves, tape.constant(x))
        logits = models.mlp_apply(head, head_leaves, u)
        loss = _cross_entropy_tape(tape, logits, onehot)
        grads = tape.backward(loss)
        theta = models.sgd_update(
            theta, models.grads_for_leaves(grads, theta_leaves), cfg.lr_pretrain
        )
        head = models.sgd_update(
            head, models.grads_for_leaves(grads, head_leaves), cfg.lr_pretrain
        )
    proxy_pred = np.argmax(
        models.predict_source(head, models.embed(theta, bundle.proxy.x)), axis=1
    )
    proxy_error = float(np.mean(proxy_pred != bundle.proxy.y))
    return theta, head, proxy_error


def induced_predictor_error(
    phi: MlpParams,
    source_head: MlpParams,
    target_train: Dataset,
    target_eval: Dataset,
    n_target_classes: int,
) -> float:
    """Held-out 0-1 error of the pseudo-label-induced predictor.

    The soft joint's row-normalized kernel composed with the source head is
    the natural label-transfer predictor available before stage 2 runs.
    """
    train_labels, disc = _labels_as_classes(target_train)
    stats = distortion.pseudo_label_stats(
        phi, source_head, target_train.x, train_labels, n_target_classes, "soft"
    )
    rows = stats.joint.sum(axis=1, keepdims=True)
    lam = np.where(
        rows > 0.0, stats.joint / np.maximum(rows, 1e-300), 1.0 / n_target_classes
    )
    p_eval = models.predict_source(source_head, models.embed(phi, target_eval.x)) @ lam
    pred = np.argmax(p_eval, axis=1)
    eval_labels = (
        discretize(target_eval.y, disc) if disc is not None else target_eval.y.astype(np.int64)
    )
    return float(np.mean(pred != eval_labels))


def _minibatches(
    n: int, batch_size: int | None, rng: np.random.Generator
) -> list[np.ndarray]:
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _fa_loss_value(
    phi: MlpParams, source_features: np.ndarray, target_x: np.ndarray,
    omega: float, cfg: SinkhornConfig,
) -> float:
    u = models.embed(phi, target_x)
    cost = transport.cost_matrix(u, source_features)
    res = transport.sinkhorn(
        cost,
        np.full(u.shape[0], 1.0 / u.shape[0]),
        np.full(source_features.shape[0], 1.0 / source_features.shape[0]),
        cfg,
    )
    return omega * res.w1_estimate


def stage1(
    phi: MlpParams,
    theta: MlpParams,
    source_head: MlpParams,
    proxy: Dataset,
    target: Dataset,
    cfg: PipelineConfig,
    target_eval: Dataset | None = None,
    n_target_classes: int | None = None,
) -> tuple[MlpParams, RunLog]:
    """Learn the target embedder: alignment epochs then distortion epochs.

    Runs the configured alignment epochs first (coupling recomputed every
    step, gradient under the fixed coupling), then the distortion epochs on
    the soft pseudo-label surrogate, exactly in that order.  One record per
    epoch lands in the log.
    """
    target_labels, _ = _labels_as_classes(target)
    kt = int(n_target_classes or target_labels.max() + 1)
    n1, n2, _ = cfg.effective_epochs()
    rng = _rng_for(cfg.seed, 2)
    source_features = models.embed(theta, proxy.x)
    log = RunLog()
    start = time.perf_counter()

    def checkpoint(epoch: int, phase: str, l_fa: float, l_fld: float) -> None:
        err = (
            induced_predictor_error(
                phi, source_head, target, target_eval, kt
            )
            if target_eval is not None
            else float("nan")
        )
        log.append(
            RunRecord(
                epoch,
                phase,
                l_fa,
                l_fld,
                l_fa + l_fld,
                err,
                float("nan"),
                time.perf_counter() - start,
            )
        )

    for epoch in range(1, n1 + 1):
        losses = []
        for idx in _minibatches(len(target), cfg.batch_size, rng):
            loss, grads, _ = transport.fa_loss_and_grad(
                phi, theta, target.x[idx], proxy.x, cfg.omega, cfg.sinkhorn
            )
            phi = models.sgd_update(phi, grads, cfg.lr_fa)
            losses.append(loss)
        stats = distortion.pseudo_label_stats(
            phi, source_head, target.x, target_labels, kt, "soft"
        )
        checkpoint(epoch, "fa", float(np.mean(losses)), distortion.fld_surrogate(stats))

    for epoch in range(1, n2 + 1):
        losses = []
        for idx in _minibatches(len(target), cfg.batch_size, rng):
            loss, grads = distortion.fld_loss_and_grad(
                phi, source_head, target.x[idx], target_labels[idx], kt
            )
            phi = models.sgd_update(phi, grads, cfg.lr_fld)
            losses.append(loss)
        l_fa = _fa_loss_value(phi, source_features, target.x, cfg.omega, cfg.sinkhorn)
        checkpoint(epoch, "fld", l_fa, float(np.mean(losses)))

    return phi, log


def _stage2_loss(
    kernel_mlp: MlpParams,
    u: np.ndarray,
    p_source: np.ndarray,
    onehot: np.ndarray,
):
    """Tape for -mean log p_target(label | u) through the kernel only."""
    n, kz = p_source.shape
    tape = ng.Tape()
    leaves = models.mlp_leaves(tape, kernel_mlp)
    eye = np.eye(kz)
    feature_cols = kernel_mlp.input_dim - kz
    p_tau = None
    for z in range(kz):
        xz = tape.constant(np.hstack([u[:, :feature_cols], np.tile(eye[z], (n, 1))]))
        lam_z = ng.softmax(models.mlp_apply(kernel_mlp, leaves, xz))
        weighted = ng.mul(lam_z, tape.constant(p_source[:, z : z + 1]))
        p_tau = weighted if p_tau is None else ng.add(p_tau, weighted)
    picked = ng.mul(ng.log(p_tau), tape.constant(onehot))
    neg_inv = tape.constant(np.array([[-1.0 / n]]))
    loss = ng.mul(ng.sum(picked), neg_inv)
    return tape, leaves, loss


def stage2(
    phi: MlpParams,
    source_head: MlpParams,
    kernel: TransportHeadParams,
    target: Dataset,
    cfg: PipelineConfig,
    target_eval: Dataset | None = None,
    frozen_gap: tuple[float, float] = (float("nan"), float("nan")),
) -> tuple[TransportHeadParams, RunLog]:
    """Fit the transport-head predictor on the frozen embedder.

    Maximizes the likelihood of the target labels under the composed
    predictor; only the kernel parameters move.
    """
    target_labels, disc = _labels_as_classes(target)
    u = models.embed(phi, target.x)
    p_source = models.predict_source(source_head, u)
    onehot = np.eye(kernel.n_target_classes)[target_labels]
    _, _, n0 = cfg.effective_epochs()
    rng = _rng_for(cfg.seed, 3)
    log = RunLog()
    start = time.perf_counter()
    l_fa, l_fld = frozen_gap
    for epoch in range(1, n0 + 1):
        nlls = []
        for idx in _minibatches(len(target), cfg.batch_size, rng):
            tape, leaves, loss = _stage2_loss(
                kernel.mlp, u[idx], p_source[idx], onehot[idx]
            )
            grads = tape.backward(loss)
            kernel = TransportHeadParams(
                models.sgd_update(
                    kernel.mlp, models.grads_for_leaves(grads, leaves), cfg.lr_predictor
                ),
                kernel.n_source_classes,
                kernel.n_target_classes,
            )
            nlls.append(float(loss.value[0, 0]))
        if target_eval is not None:
            eval_labels = (
                discretize(target_eval.y, disc)
                if disc is not None
                else target_eval.y.astype(np.int64)
            )
            pred = np.argmax(
                models.predict_target(
                    source_head, kernel, models.embed(phi, target_eval.x)
                ),
                axis=1,
            )
            err = float(np.mean(pred != eval_labels))
        else:
            err = float("nan")
        log.append(
            RunRecord(
                epoch,
                "predictor",
                l_fa,
                l_fld,
                l_fa + l_fld,
                err,
                float(np.mean(nlls)),
                time.perf_counter() - start,
            )
        )
    return kernel, log


def run_pipeline(
    bundle: TaskBundle,
    cfg: PipelineConfig,
    pretrained: tuple[MlpParams, MlpParams, float] | None = None,
) -> PipelineResult:
    """Full flow: pretrain, recalibrate, stage 1, stage 2, final evaluation.

    ``pretrained`` short-circuits the shared prefix so ablation variants of
    the same seed reuse identical source models.
    """
    if pretrained is None:
        pretrained = pretrain_source(bundle, cfg)
        if cfg.recalibrate:
            theta, head, proxy_error = pretrained
            lip = replace(cfg.lipschitz, omega=cfg.omega)
            result = lipschitz.recalibrate_head(
                head, theta, bundle.proxy.x, bundle.proxy.y, lip
            )
            pretrained = (theta, result.head, proxy_error)
    theta, head, proxy_error = pretrained

    target_labels, target_disc = _labels_as_classes(bundle.target)
    if target_disc is not None:
        kt = target_disc.n_bins
    else:
        kt = int(bundle.meta.get("n_target_classes", 0)) or int(target_labels.max() + 1)
    phi_rng = _rng_for(cfg.seed, 4)
    phi = models.init_mlp(
        [bundle.target.x.shape[1], 16, theta.output_dim], "tanh", phi_rng
    )
    phi, log1 = stage1(
        phi, theta, head, bundle.proxy, bundle.target, cfg, bundle.target_test, kt
    )
    frozen_fa = _fa_loss_value(
        phi, models.embed(theta, bundle.proxy.x), bundle.target.x, cfg.omega, cfg.sinkhorn
    )
    frozen_fld = distortion.fld_surrogate(
        distortion.pseudo_label_stats(phi, head, bundle.target.x, target_labels, kt, "soft")
    )
    kernel = models.init_transport_head(theta.output_dim, head.output_dim, kt)
    kernel, log2 = stage2(
        phi, head, kernel, bundle.target, cfg, bundle.target_test, (frozen_fa, frozen_fld)
    )
    phi_after = phi  # stage 2 never touches the embedder

    # classification scores 0-1 error; regression-labeled tasks train on
    # discretized labels and score normalized RMSE through the bin centers
    train_disc = _labels_as_classes(bundle.target)[1]
    pred = np.argmax(
        models.predict_target(head, kernel, models.embed(phi_after, bundle.target_test.x)),
        axis=1,
    )
    if train_disc is None:
        eval_labels, _ = _labels_as_classes(bundle.target_test)
        holdout = float(np.mean(pred != eval_labels))
    else:
        holdout = nrmse(train_disc.centers()[pred], bundle.target_test.y)
    return PipelineResult(theta, head, phi_after, kernel, log1.merged(log2), holdout, proxy_error)


def run_baseline(
    specs: dict,
    cfg: PipelineConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = VARIANTS,
) -> list[dict]:
    """Held-out error per (task, variant) over seeds; median and IQR.

    ``specs`` maps task names to TaskSpec-like factories of seeded bundles;
    the source model is shared across variants within a seed.
    """
    from .synthtasks import generate

    rows = []
    for task_name, spec in specs.items():
        per_variant: dict[str, list[float]] = {v: [] for v in variants}
        for seed in seeds:
            bundle = generate(replace(spec, seed=int(seed)))
            base_cfg = replace(cfg, seed=int(seed))
            shared = None
            for variant in variants:
                vcfg = replace(base_cfg, baseline=variant)
                if shared is None:
                    result = run_pipeline(bundle, vcfg)
                    shared = (result.theta, result.source_head, result.source_proxy_error)
                else:
                    result = run_pipeline(bundle, vcfg, pretrained=shared)
                per_variant[variant].append(result.holdout_error)
        for variant in variants:
            errs = np.array(per_variant[variant])
            rows.append(
                {
                    "task": task_name,
                    "variant": variant,
                    "median_error": float(np.median(errs)),
                    "iqr_low": float(np.quantile(errs, 0.25)),
                    "iqr_high": float(np.quantile(errs, 0.75)),
                    "n_seeds": len(seeds),
                    "bayes_error": float(bundle.meta["bayes_error"]),
                }
            )
    return rows


def baseline_table_to_csv(rows: list[dict], path) -> None:
    """Wide table, variants as rows and tasks as columns (median and IQR)."""
    import csv

    tasks = sorted({r["task"] for r in rows})
    variants = sorted({r["variant"] for r in rows}, key=VARIANTS.index)
    by_key = {(r["task"], r["variant"]): r for r in rows}
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["variant"]
        for t in tasks:
            header += [f"{t}_median", f"{t}_iqr_low", f"{t}_iqr_high"]
        writer.writerow(header)
        for v in variants:
            line = [v]
            for t in tasks:
                r = by_key[(t, v)]
                line += [r["median_error"], r["iqr_low"], r["iqr_high"]]
            writer.writerow(line)


def correlate_gap_error(log: RunLog, phases: Sequence[str] = ("fa", "fld")) -> tuple[float, list[dict]]:
    """Pearson correlation between the semantic gap and held-out error
    across stage-1 checkpoints, plus the plottable series."""
    records = [
        r
        for r in log.records
        if r.phase in phases
        and np.isfinite(r.semantic_gap)
        and np.isfinite(r.holdout_error)
    ]
    pairs = {(r.semantic_gap, r.holdout_error) for r in records}
    gaps = np.array([r.semantic_gap for r in records])
    errs = np.array([r.holdout_error for r in records])
    if len(pairs) < 2 or gaps.std() == 0.0 or errs.std() == 0.0:
        raise UndefinedCorrelationError(
            "need at least two distinct (gap, error) checkpoints with variance"
        )
    g = gaps - gaps.mean()
    e = errs - errs.mean()
    r = float((g @ e) / np.sqrt((g @ g) * (e @ e)))
    series = [
        {
            "epoch": rec.epoch,
            "phase": rec.phase,
            "semantic_gap": rec.semantic_gap,
            "holdout_error": rec.holdout_error,
        }
        for rec in records
    ]
    return r, series
