"""Operator surface: seeded, file-based subcommands over the library.

Every run writes its resolved configuration as JSON next to its outputs;
re-feeding that file through ``--config`` reproduces the run bit for bit.
Exit codes: 0 success, 1 domain error (bad inputs, failed run), 2 usage
error.  The GAPCRAFT_LOG environment variable (quiet|info|debug) controls
logging verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bound, lipschitz, models, pipeline, synthtasks
from .lipschitz import LipschitzConfig
from .pipeline import PipelineConfig, RunLog
from .synthtasks import TaskSpec
from .transport import SinkhornConfig

log = logging.getLogger("gapcraft")


class DomainError(RuntimeError):
    """Invalid inputs or a failed run; maps to exit code 1."""


def _setup_logging() -> None:
    levels = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    name = os.environ.get("GAPCRAFT_LOG", "info").lower()
    logging.basicConfig(
        level=levels.get(name, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved_config(args, out: Path) -> None:
    resolved = {
        k: v for k, v in vars(args).items() if k not in ("func", "config")
    }
    resolved["subcommand"] = args.subcommand
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2))


def _require(path, what: str) -> Path:
    if path is None:
        raise DomainError(f"{what} is required (flag or --config entry missing)")
    p = Path(path)
    if not p.exists():
        raise DomainError(f"{what} not found: {p}")
    return p


def _task_spec(args) -> TaskSpec:
    return TaskSpec(
        family=args.family,
        source_dim=args.source_dim,
        # gap_dial keeps the input space; ignore a conflicting target size
        target_dim=args.source_dim if args.family == "gap_dial" else args.target_dim,
        n_classes=args.classes,
        n_target_classes=args.target_classes or args.classes,
        n_source=args.n_source,
        n_proxy=args.n_proxy,
        n_target=args.n_target,
        n_target_test=args.n_target_test,
        gap_knob=args.gap_knob,
        label_noise=args.label_noise,
        seed=args.seed,
    )


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        n0=args.n0,
        n1=args.n1,
        n2=args.n2,
        lr_fa=args.lr_fa,
        lr_fld=args.lr_fld,
        lr_predictor=args.lr_predictor,
        batch_size=args.batch_size,
        omega=args.omega,
        sinkhorn=SinkhornConfig(args.epsilon, args.sinkhorn_iters, args.sinkhorn_tol),
        seed=args.seed,
        baseline=args.baseline,
        scale=args.scale,
    )


def _load_bundle(data_dir: Path) -> synthtasks.TaskBundle:
    parts = {}
    meta = {}
    for name in ("source", "proxy", "target", "target_test"):
        ds, m = synthtasks.load_dataset(_require(data_dir / f"{name}.csv", name))
        parts[name] = ds
        meta = m or meta
    return synthtasks.TaskBundle(
        parts["source"], parts["proxy"], parts["target"], parts["target_test"], meta
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    out = _out_dir(args)
    bundle = synthtasks.generate(_task_spec(args))
    for name, ds in (
        ("source", bundle.source),
        ("proxy", bundle.proxy),
        ("target", bundle.target),
        ("target_test", bundle.target_test),
    ):
        synthtasks.save_dataset(ds, out / f"{name}.csv", bundle.meta)
    _write_resolved_config(args, out)
    log.info("wrote task bundle to %s", out)
    return 0


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    bundle = _load_bundle(_require(args.data, "data directory"))
    cfg = _pipeline_config(args)
    theta, head, proxy_error = pipeline.pretrain_source(bundle, cfg)
    models.save_params(theta, out / "theta.json", role="source_embedder")
    models.save_params(head, out / "source_head.json", role="source_head")
    (out / "pretrain_summary.json").write_text(
        json.dumps({"proxy_error": proxy_error}, indent=2)
    )
    _write_resolved_config(args, out)
    log.info("pretrained source model: proxy error %.4f", proxy_error)
    return 0


def cmd_recalibrate(args) -> int:
    out = _out_dir(args)
    bundle = _load_bundle(_require(args.data, "data directory"))
    mdir = _require(args.models, "models directory")
    theta, _ = models.load_params(_require(mdir / "theta.json", "theta checkpoint"))
    head, _ = models.load_params(_require(mdir / "source_head.json", "head checkpoint"))
    cfg = LipschitzConfig(
        omega=args.omega,
        penalty_weight=args.penalty_weight,
        epochs=args.epochs,
        lr=args.lr,
        enforcement_margin=args.enforcement_margin,
    )
    result = lipschitz.recalibrate_head(head, theta, bundle.proxy.x, bundle.proxy.y, cfg)
    models.save_params(result.head, out / "source_head.json", role="source_head_recalibrated")
    models.save_params(theta, out / "theta.json", role="source_embedder")
    (out / "recalibrate_summary.json").write_text(
        json.dumps(
            {
                "initial_penalty": result.initial_penalty,
                "final_penalty": result.final_penalty,
            },
            indent=2,
        )
    )
    _write_resolved_config(args, out)
    return 0


def cmd_stage1(args) -> int:
    out = _out_dir(args)
    bundle = _load_bundle(_require(args.data, "data directory"))
    mdir = _require(args.models, "models directory")
    theta, _ = models.load_params(_require(mdir / "theta.json", "theta checkpoint"))
    head, _ = models.load_params(_require(mdir / "source_head.json", "head checkpoint"))
    cfg = _pipeline_config(args)
    kt = int(bundle.meta.get("n_target_classes", int(bundle.target.y.max()) + 1))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    phi = models.init_mlp(
        [bundle.target.x.shape[1], 16, theta.output_dim], "tanh", rng
    )
    phi, log1 = pipeline.stage1(
        phi, theta, head, bundle.proxy, bundle.target, cfg, bundle.target_test, kt
    )
    models.save_params(phi, out / "phi.json", role="target_embedder")
    log1.to_jsonl(out / "runlog.jsonl")
    _write_resolved_config(args, out)
    return 0


def cmd_stage2(args) -> int:
    out = _out_dir(args)
    bundle = _load_bundle(_require(args.data, "data directory"))
    mdir = _require(args.models, "models directory")
    head, _ = models.load_params(_require(mdir / "source_head.json", "head checkpoint"))
    phi, _ = models.load_params(_require(args.phi, "phi checkpoint"))
    cfg = _pipeline_config(args)
    kt = int(bundle.meta.get("n_target_classes", int(bundle.target.y.max()) + 1))
    kernel = models.init_transport_head(phi.output_dim, head.output_dim, kt)
    kernel, log2 = pipeline.stage2(
        phi, head, kernel, bundle.target, cfg, bundle.target_test
    )
    models.save_params(kernel.mlp, out / "kernel.json", role="transport_head")
    log2.to_jsonl(out / "runlog.jsonl")
    final = log2.records[-1].holdout_error if log2.records else float("nan")
    (out / "stage2_summary.json").write_text(
        json.dumps({"holdout_error": final}, indent=2)
    )
    _write_resolved_config(args, out)
    return 0


def cmd_verify_theorem(args) -> int:
    out = _out_dir(args)
    violations = []
    proof_violations = []
    worst_gap = float("inf")
    for seed in range(args.seed, args.seed + args.instances):
        inst = synthtasks.random_discrete_instance(seed)
        report = bound.evaluate_bound(inst)
        worst_gap = min(worst_gap, report.gap)
        if report.gap < -1e-9:
            violations.append(seed)
        terms = bound.verify_proof_terms(inst)
        if (
            terms.term_a_lhs > terms.term_a_rhs + 1e-9
            or terms.term_b_lhs > terms.term_b_rhs + 1e-9
        ):
            proof_violations.append(seed)
    summary = {
        "instances": args.instances,
        "violations": len(violations),
        "violating_seeds": violations,
        "proof_term_violations": len(proof_violations),
        "worst_gap": worst_gap,
    }
    (out / "verify_theorem.json").write_text(json.dumps(summary, indent=2))
    _write_resolved_config(args, out)
    print(json.dumps(summary, indent=2))
    return 0 if not violations and not proof_violations else 1


def cmd_bound_report(args) -> int:
    out = _out_dir(args)
    reports = {}
    for i in range(args.tasks):
        inst = synthtasks.random_discrete_instance(args.seed + i)
        reports[f"task_{args.seed + i}"] = bound.evaluate_bound(inst)
    payload = {name: r.to_dict() for name, r in reports.items()}
    (out / "bound_report.json").write_text(json.dumps(payload, indent=2))
    if args.bars:
        bound.reports_to_bars_csv(reports, out / "bars.csv")
    _write_resolved_config(args, out)
    print(json.dumps(payload, indent=2))
    return 0


def _parse_grid(grid: str) -> list[float]:
    try:
        lo, hi, step = (float(v) for v in grid.split(":"))
    except ValueError as exc:
        raise DomainError(f"grid must be lo:hi:step, got {grid!r}") from exc
    if step <= 0 or hi < lo:
        raise DomainError(f"grid must be increasing, got {grid!r}")
    values = []
    v = lo
    while v <= hi + 1e-12:
        values.append(round(v, 12))
        v += step
    return values


def cmd_sweep_omega(args) -> int:
    out = _out_dir(args)
    bundle = _load_bundle(_require(args.data, "data directory"))
    cfg = _pipeline_config(args)
    theta, head, _ = pipeline.pretrain_source(bundle, cfg)
    rows = lipschitz.sweep_omega(
        _parse_grid(args.grid),
        theta,
        head,
        bundle.proxy.x,
        bundle.proxy.y,
        LipschitzConfig(
            omega=0.3,
            penalty_weight=args.penalty_weight,
            epochs=args.epochs,
            lr=args.lr,
            enforcement_margin=args.enforcement_margin,
        ),
        seed=args.seed,
    )
    lipschitz.sweep_to_csv(rows, out / "sweep.csv")
    _write_resolved_config(args, out)
    return 0


def cmd_baseline(args) -> int:
    out = _out_dir(args)
    specs = {}
    for family in args.families.split(","):
        family = family.strip()
        spec = TaskSpec(family=family)
        if family in ("permuted_labels", "gap_dial"):
            spec = replace(
                spec,
                target_dim=spec.source_dim if family == "gap_dial" else spec.target_dim,
            )
        specs[family] = spec
    cfg = _pipeline_config(args)
    rows = pipeline.run_baseline(specs, cfg, seeds=range(args.seeds))
    pipeline.baseline_table_to_csv(rows, out / "baseline.csv")
    (out / "baseline.json").write_text(json.dumps(rows, indent=2))
    _write_resolved_config(args, out)
    print(json.dumps(rows, indent=2))
    return 0


def cmd_correlate(args) -> int:
    out = _out_dir(args)
    runlog = RunLog.from_jsonl(_require(args.runlog, "run log"))
    try:
        r, series = pipeline.correlate_gap_error(runlog)
    except pipeline.UndefinedCorrelationError as exc:
        raise DomainError(str(exc)) from exc
    with (out / "gap_error_series.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "phase", "semantic_gap", "holdout_error"]
        )
        writer.writeheader()
        writer.writerows(series)
    (out / "correlation.json").write_text(json.dumps({"pearson_r": r}, indent=2))
    _write_resolved_config(args, out)
    print(json.dumps({"pearson_r": r}, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_task_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--family", default="rotated", choices=synthtasks.FAMILIES[:3])
    p.add_argument("--source-dim", type=int, default=4)
    p.add_argument("--target-dim", type=int, default=12)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--target-classes", type=int, default=0)
    p.add_argument("--n-source", type=int, default=240)
    p.add_argument("--n-proxy", type=int, default=240)
    p.add_argument("--n-target", type=int, default=48)
    p.add_argument("--n-target-test", type=int, default=400)
    p.add_argument("--gap-knob", type=float, default=0.0)
    p.add_argument("--label-noise", type=float, default=0.1)


def _add_pipeline_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n0", type=int, default=60)
    p.add_argument("--n1", type=int, default=60)
    p.add_argument("--n2", type=int, default=4)
    p.add_argument("--lr-fa", type=float, default=0.2)
    p.add_argument("--lr-fld", type=float, default=0.1)
    p.add_argument("--lr-predictor", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--omega", type=float, default=0.3)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--sinkhorn-iters", type=int, default=500)
    p.add_argument("--sinkhorn-tol", type=float, default=1e-6)
    p.add_argument("--baseline", default="recraft", choices=pipeline.VARIANTS)
    p.add_argument("--scale", type=float, default=1.0)


def _add_recalibrate_args(p: argparse.ArgumentParser, with_omega: bool = True) -> None:
    if with_omega:
        p.add_argument("--omega", type=float, default=0.3)
    p.add_argument("--penalty-weight", type=float, default=10.0)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--enforcement-margin", type=float, default=0.8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gapcraft",
        description="Cross-modal transfer calculus: solvers, bound checks, pipeline.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="resolved-config JSON to re-run")

    p = sub.add_parser("gen", help="generate a synthetic task bundle")
    common(p)
    _add_task_args(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="train the source embedder and head")
    common(p)
    p.add_argument("--data", default=None)
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("recalibrate", help="Lipschitz-recalibrate the source head")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--models", default=None)
    _add_recalibrate_args(p)
    p.set_defaults(func=cmd_recalibrate)

    p = sub.add_parser("stage1", help="learn the target embedder (alignment + distortion)")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--models", default=None)
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("stage2", help="fit the transport-head target predictor")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--models", default=None)
    p.add_argument("--phi", default=None)
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_stage2)

    p = sub.add_parser("bound-report", help="decomposition reports on exact tasks")
    common(p)
    p.add_argument("--tasks", type=int, default=5)
    p.add_argument("--bars", action="store_true")
    p.set_defaults(func=cmd_bound_report)

    p = sub.add_parser("verify-theorem", help="brute-force the bound on random instances")
    common(p)
    p.add_argument("--instances", type=int, default=1000)
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("sweep-omega", help="recalibration sweep over omega candidates")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--grid", default="0.1:1.0:0.1")
    _add_pipeline_args(p)
    _add_recalibrate_args(p, with_omega=False)
    p.set_defaults(func=cmd_sweep_omega)

    p = sub.add_parser("baseline", help="compare recraft, fa_only, and nft")
    common(p)
    p.add_argument("--families", default="rotated,permuted_labels")
    p.add_argument("--seeds", type=int, default=5)
    _add_pipeline_args(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("correlate", help="gap-versus-error correlation from a run log")
    common(p)
    p.add_argument("--runlog", default=None)
    p.set_defaults(func=cmd_correlate)

    return parser


def _apply_config_file(argv: list[str], parser: argparse.ArgumentParser):
    """Parse argv, letting a --config JSON provide defaults for its subcommand."""
    args = parser.parse_args(argv)
    if args.config:
        stored = json.loads(_require(args.config, "config file").read_text())
        stored.pop("subcommand", None)
        explicit = {a.lstrip("-").replace("-", "_").split("=")[0] for a in argv if a.startswith("--")}
        for key, value in stored.items():
            if key not in explicit and hasattr(args, key):
                setattr(args, key, value)
    return args


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = _apply_config_file(argv, parser)
    except SystemExit as exc:  # argparse reports usage errors on stderr
        return 2 if exc.code not in (0, None) else 0
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
