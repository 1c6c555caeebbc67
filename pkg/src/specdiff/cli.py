"""Batch experiment front-end.

One JSON config per run, flags override fields, and every command writes its
artifacts plus a manifest into a single run directory.  Figures are rendered
next to each delimited artifact by default; pass --no-plot to skip them.

Subcommands: train, selfspec, fit-relax, sample, sweep, certify.
The default output root is $SPECDIFF_OUT, falling back to ./runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import certify, report
from .engine import (
    CostModel,
    RunMetrics,
    fit_relax_profile,
    metrics_to_json,
    parallel_efficiency,
    profile_from_json,
    profile_to_json,
    sample_free,
    sample_vanilla,
    self_spec_run,
    trace_from_csv,
    trace_to_csv,
    wall_clock_model,
    write_trajectory,
)
from .models import GmmTarget, default_gmm, net_from_json, net_to_json
from .schedule import build_linear_schedule, em_schedule, schedule_to_json
from .training import TrainConfig, fit_target_mlp, init_drafter, report_to_csv, train_drafter

OUT_ROOT_ENV = "SPECDIFF_OUT"


class CliError(Exception):
    """User-facing configuration or input problem; maps to exit code 2."""


@dataclass
class ExperimentConfig:
    """Resolved run settings: config file values with flag overrides applied."""

    target: object = "gmm"     # "gmm", inline mixture params, or checkpoint path
    drafter: object = "frozen"  # "oracle", "frozen", or checkpoint path
    data_gmm: object = None    # mixture behind training data; None = stock mixture
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    epsilon: float | None = None  # None: posterior variances; > 0: ε-family
    L: int = 4
    relax: str = "none"        # "none" or a profile JSON path
    lambda_min: float = 0.05
    seed: int = 0
    num_samples: int = 200
    num_runs: int = 12
    epochs: int = 400
    drafter_epochs: int = 300
    batch_size: int = 512
    lr: float = 1e-3
    hidden: int = 64
    draft_ratio: float = 1.0 / 28.0
    t_comm: float = 0.0

    def __post_init__(self) -> None:
        if self.L < 1:
            raise CliError("L must be >= 1")
        if self.epsilon is not None and not self.epsilon > 0.0:
            raise CliError("epsilon must be positive (or omitted for posterior variances)")
        if self.T < 2:
            raise CliError("T must be >= 2")


_OVERRIDE_FIELDS = [f for f in ExperimentConfig.__dataclass_fields__]


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    values: dict = {}
    if args.config is not None:
        doc = _read_json(args.config)
        unknown = set(doc) - set(_OVERRIDE_FIELDS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    for name in _OVERRIDE_FIELDS:
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            values[name] = flag_val
    return ExperimentConfig(**values)


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {p}")
    return json.loads(p.read_text())


def _read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"no such file: {p}")
    return p.read_text()


def resolve_mixture(spec) -> GmmTarget:
    if spec is None or spec == "gmm":
        return default_gmm()
    if isinstance(spec, dict):
        return GmmTarget(
            weights=np.asarray(spec["weights"], dtype=np.float64),
            means=np.asarray(spec["means"], dtype=np.float64),
            variances=np.asarray(spec["variances"], dtype=np.float64),
        )
    raise CliError(f"not a mixture spec: {spec!r}")


def resolve_target(spec):
    """Target model: inline mixture parameters or a net checkpoint path."""
    if isinstance(spec, str) and spec != "gmm":
        return net_from_json(_read_text(spec))
    return resolve_mixture(spec)


def resolve_drafter(spec):
    if spec in ("oracle", "frozen"):
        return spec
    if isinstance(spec, str):
        return net_from_json(_read_text(spec))
    raise CliError(f"not a drafter spec: {spec!r}")


def build_tables(cfg: ExperimentConfig):
    """(schedule, sde-or-None) for the configured variance mode."""
    if cfg.epsilon is None:
        return build_linear_schedule(cfg.T, cfg.beta_min, cfg.beta_max), None
    return em_schedule(cfg.T, cfg.beta_min, cfg.beta_max, epsilon=cfg.epsilon)


def _run_dir(args, command: str, seed: int) -> Path:
    if args.out is not None:
        path = Path(args.out)
    else:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        path = root / f"{command}-{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _finish_run(run_dir: Path, command: str, cfg: ExperimentConfig, artifacts: list) -> None:
    from . import __version__

    (run_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "version": __version__,
        "artifacts": sorted(artifacts + ["config.json"]),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for name in sorted(artifacts):
        print(f"wrote {run_dir / name}")


def _samples_csv(samples: np.ndarray) -> str:
    d = samples.shape[1]
    lines = [",".join(f"x{i}" for i in range(d))]
    for row in samples:
        lines.append(",".join("%.10g" % v for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    cfg = load_config(args)
    run_dir = _run_dir(args, "train", cfg.seed)
    artifacts = []
    if cfg.data_gmm is not None:
        mixture = resolve_mixture(cfg.data_gmm)
    elif isinstance(cfg.target, str) and cfg.target != "gmm":
        mixture = default_gmm()  # checkpoint targets fall back to the stock data mixture
    else:
        mixture = resolve_mixture(cfg.target)
    sched = build_linear_schedule(cfg.T, cfg.beta_min, cfg.beta_max)

    if args.what in ("target", "both") and isinstance(cfg.target, str) and cfg.target != "gmm":
        raise CliError("target is a checkpoint path; nothing to fit (use --what drafter)")
    if args.what in ("target", "both"):
        tcfg = TrainConfig(
            epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed, hidden=cfg.hidden
        )
        teacher, treport = fit_target_mlp(mixture, sched, tcfg)
        (run_dir / "target.json").write_text(net_to_json(teacher) + "\n")
        (run_dir / "target_loss.csv").write_text(report_to_csv(treport))
        artifacts += ["target.json", "target_loss.csv"]
        if treport.rows and not args.no_plot:
            report.plot_loss_curve(treport.rows, run_dir / "target_loss.png")
            artifacts.append("target_loss.png")
    else:
        teacher = resolve_target(cfg.target)
        if isinstance(teacher, GmmTarget):
            raise CliError("drafter training needs a net teacher; fit one first or pass its path")

    if args.what in ("drafter", "both"):
        dcfg = TrainConfig(
            epochs=cfg.drafter_epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed, hidden=cfg.hidden
        )
        drafter = init_drafter(mixture.dim, teacher.feature_dim, sched, dcfg)
        dreport = train_drafter(teacher, drafter, mixture, sched, dcfg)
        (run_dir / "drafter.json").write_text(net_to_json(drafter) + "\n")
        (run_dir / "drafter_loss.csv").write_text(report_to_csv(dreport))
        artifacts += ["drafter.json", "drafter_loss.csv"]
        if dreport.rows and not args.no_plot:
            report.plot_loss_curve(dreport.rows, run_dir / "drafter_loss.png")
            artifacts.append("drafter_loss.png")

    (run_dir / "schedule.json").write_text(schedule_to_json(sched) + "\n")
    artifacts.append("schedule.json")
    _finish_run(run_dir, "train", cfg, artifacts)
    return 0


def cmd_selfspec(args) -> int:
    cfg = load_config(args)
    run_dir = _run_dir(args, "selfspec", cfg.seed)
    target = resolve_target(cfg.target)
    sched, sde = build_tables(cfg)
    if sde is not None:
        raise CliError("profiling runs use posterior variances; drop epsilon")

    trace = []
    for s in range(cfg.seed, cfg.seed + cfg.num_runs):
        trace.extend(self_spec_run(target, cfg.L, sched, s))
    (run_dir / "trace.csv").write_text(trace_to_csv(trace))
    artifacts = ["trace.csv"]

    from scipy.stats import spearmanr

    steps = [r[0] for r in trace]
    deltas = [r[1] for r in trace]
    rho, p = spearmanr(steps, deltas)
    summary = {
        "runs": cfg.num_runs,
        "rows": len(trace),
        "trend_spearman_rho": float(rho),
        "trend_spearman_p": float(p),
        "mean_accept_prob": float(np.mean([r[2] for r in trace])),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    artifacts.append("summary.json")
    if not args.no_plot:
        report.plot_trace(trace, run_dir / "trace.png")
        artifacts.append("trace.png")
    _finish_run(run_dir, "selfspec", cfg, artifacts)
    return 0


def cmd_fit_relax(args) -> int:
    cfg = load_config(args)
    run_dir = _run_dir(args, "fit-relax", cfg.seed)
    trace = trace_from_csv(_read_text(args.trace))
    profile = fit_relax_profile(trace, lambda_min=cfg.lambda_min, T=cfg.T)
    (run_dir / "profile.json").write_text(profile_to_json(profile) + "\n")
    artifacts = ["profile.json"]
    if not args.no_plot:
        report.plot_profile(profile.lam, run_dir / "profile.png")
        artifacts.append("profile.png")
    _finish_run(run_dir, "fit-relax", cfg, artifacts)
    return 0


def _aggregate(metrics_list, T: int, L: int) -> RunMetrics:
    agg = RunMetrics(T=T, L=L)
    for m in metrics_list:
        agg.serial += m.serial
        agg.batches += m.batches
        agg.drafted += m.drafted
        agg.steps += m.steps
        for k, v in m.accepted_by_depth.items():
            agg.accepted_by_depth[k] = agg.accepted_by_depth.get(k, 0) + v
        for k, v in m.rejected_by_depth.items():
            agg.rejected_by_depth[k] = agg.rejected_by_depth.get(k, 0) + v
        agg.trace.extend(m.trace)
    return agg


def _free_runs(target, drafter, cfg: ExperimentConfig, sched, sde, relax, seeds):
    finals, metrics_list = [], []
    traj = None
    for s in seeds:
        traj, m = sample_free(target, drafter, cfg.L, sched, s, relax=relax, sde=sde)
        finals.append(traj[-1])
        metrics_list.append(m)
    return np.asarray(finals), metrics_list, traj


def cmd_sample(args) -> int:
    cfg = load_config(args)
    run_dir = _run_dir(args, "sample", cfg.seed)
    target = resolve_target(cfg.target)
    sched, sde = build_tables(cfg)
    seeds = range(cfg.seed, cfg.seed + cfg.num_samples)
    cost = CostModel(t_target=1.0, draft_ratio=cfg.draft_ratio, t_comm=cfg.t_comm)

    if args.mode == "vanilla":
        finals, metrics_list = [], []
        traj = None
        for s in seeds:
            traj, m = sample_vanilla(target, sched, s, sde=sde)
            finals.append(traj[-1])
            metrics_list.append(m)
        finals = np.asarray(finals)
        agg = _aggregate(metrics_list, sched.T, 0)
    else:
        relax = None
        if args.mode == "free-relax":
            if cfg.relax == "none":
                raise CliError("free-relax mode needs a relax profile path in the config")
            relax = profile_from_json(_read_text(cfg.relax))
        drafter = resolve_drafter(cfg.drafter)
        finals, metrics_list, traj = _free_runs(target, drafter, cfg, sched, sde, relax, seeds)
        agg = _aggregate(metrics_list, sched.T, cfg.L)

    decisions = agg.accepted + agg.rejected
    extra = {
        "mode": args.mode,
        "runs": cfg.num_samples,
        "efficiency": parallel_efficiency(agg),
        "modeled_speedup": wall_clock_model(agg, cost),
        "acceptance_rate": agg.accepted / decisions if decisions else None,
    }
    (run_dir / "samples.csv").write_text(_samples_csv(finals))
    (run_dir / "metrics.json").write_text(metrics_to_json(agg, extra) + "\n")
    write_trajectory(run_dir / "last_trajectory.bin", traj)
    artifacts = ["samples.csv", "metrics.json", "last_trajectory.bin"]
    if not args.no_plot:
        report.plot_samples(finals, run_dir / "samples.png")
        artifacts.append("samples.png")
    _finish_run(run_dir, "sample", cfg, artifacts)
    return 0


def _parse_values(axis: str, text: str) -> list:
    try:
        if axis == "L":
            return [int(v) for v in text.split(",") if v]
        return [float(v) for v in text.split(",") if v]
    except ValueError as exc:
        raise CliError(f"bad sweep values {text!r}: {exc}") from None


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    run_dir = _run_dir(args, "sweep", cfg.seed)
    target = resolve_target(cfg.target)
    values = _parse_values(args.axis, args.values)
    if not values:
        raise CliError("empty sweep")
    cost = CostModel(t_target=1.0, draft_ratio=cfg.draft_ratio, t_comm=cfg.t_comm)
    seeds = range(cfg.seed, cfg.seed + cfg.num_runs)

    if args.axis == "relax" and cfg.epsilon is not None:
        raise CliError("relax sweeps profile against posterior variances; drop epsilon")

    rows = []
    for value in values:
        sched, sde = build_tables(cfg)
        relax = None
        if args.axis == "L":
            point = ExperimentConfig(**{**asdict(cfg), "L": int(value)})
        elif args.axis == "epsilon":
            point = ExperimentConfig(**{**asdict(cfg), "epsilon": float(value)})
            sched, sde = build_tables(point)
        else:  # relax: sweep the profile floor, refitting per point
            point = ExperimentConfig(**{**asdict(cfg), "lambda_min": float(value)})
            trace = []
            for s in range(cfg.seed + 10_000, cfg.seed + 10_000 + cfg.num_runs):
                trace.extend(self_spec_run(target, point.L, sched, s))
            relax = fit_relax_profile(trace, lambda_min=point.lambda_min, T=sched.T)
        drafter = resolve_drafter(point.drafter)
        _, metrics_list, _ = _free_runs(target, drafter, point, sched, sde, relax, seeds)
        agg = _aggregate(metrics_list, sched.T, point.L)
        decisions = agg.accepted + agg.rejected
        rows.append(
            (
                value,
                parallel_efficiency(agg),
                wall_clock_model(agg, cost),
                agg.accepted / decisions if decisions else float("nan"),
            )
        )

    lines = [f"{args.axis},efficiency,speedup,acceptance"]
    for row in rows:
        lines.append("%.10g,%.10g,%.10g,%.10g" % row)
    (run_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    artifacts = ["sweep.csv"]
    if not args.no_plot:
        report.plot_sweep(rows, args.axis, run_dir / "sweep.png")
        artifacts.append("sweep.png")
    _finish_run(run_dir, "sweep", cfg, artifacts)
    return 0


def cmd_certify(args) -> int:
    cfg = load_config(args)
    run_dir = _run_dir(args, "certify", cfg.seed)
    names = args.checks.split(",") if args.checks else None
    try:
        results = certify.run_checks(names, seed_offset=args.seed_offset, sabotage=args.sabotage)
    except KeyError as exc:
        raise CliError(str(exc)) from None
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail} ({r.seconds:.1f}s)")
    all_passed = all(r.passed for r in results)
    doc = {
        "all_passed": all_passed,
        "seed_offset": args.seed_offset,
        "sabotage": args.sabotage,
        "checks": [
            {"name": r.name, "passed": r.passed, "seconds": round(r.seconds, 2), "detail": r.detail, "stats": r.stats}
            for r in results
        ],
    }
    (run_dir / "certify_report.json").write_text(json.dumps(doc, indent=2) + "\n")
    _finish_run(run_dir, "certify", cfg, ["certify_report.json"])
    print("certification " + ("PASSED" if all_passed else "FAILED"))
    return 0 if all_passed else 1


# ---------------------------------------------------------------------------
# Argument wiring


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--out", help="run directory (default: $SPECDIFF_OUT or ./runs)")
    p.add_argument("--no-plot", action="store_true", help="skip figure rendering")
    p.add_argument("--seed", type=int)
    p.add_argument("--target", help='"gmm" or a net checkpoint path')
    p.add_argument("--drafter", help='"oracle", "frozen", or a net checkpoint path')
    p.add_argument("--T", type=int, help="number of denoising steps")
    p.add_argument("--beta-min", type=float, dest="beta_min")
    p.add_argument("--beta-max", type=float, dest="beta_max")
    p.add_argument("--epsilon", type=float, help="reverse-kernel stochasticity (enables the SDE family)")
    p.add_argument("--L", type=int, help="speculation length")
    p.add_argument("--relax", help='"none" or a relax profile JSON path')
    p.add_argument("--lambda-min", type=float, dest="lambda_min")
    p.add_argument("--num-samples", type=int, dest="num_samples")
    p.add_argument("--num-runs", type=int, dest="num_runs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--drafter-epochs", type=int, dest="drafter_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--draft-ratio", type=float, dest="draft_ratio")
    p.add_argument("--t-comm", type=float, dest="t_comm")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit the target net and/or the drafter")
    p.add_argument("--what", choices=("target", "drafter", "both"), default="both")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("selfspec", help="offline profiling run producing the uncertainty trace")
    _add_common(p)
    p.set_defaults(fn=cmd_selfspec)

    p = sub.add_parser("fit-relax", help="fit a relaxation profile from a trace CSV")
    p.add_argument("--trace", required=True, help="trace CSV from selfspec")
    _add_common(p)
    p.set_defaults(fn=cmd_fit_relax)

    p = sub.add_parser("sample", help="draw samples (vanilla, free, or free-relax)")
    p.add_argument("--mode", choices=("vanilla", "free", "free-relax"), default="free")
    _add_common(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("sweep", help="grid run over L, epsilon, or the relax floor")
    p.add_argument("--axis", choices=("L", "epsilon", "relax"), required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    _add_common(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("certify", help="run the statistical certification suite")
    p.add_argument("--checks", help="comma-separated subset of check names")
    p.add_argument("--seed-offset", type=int, default=0, dest="seed_offset")
    p.add_argument("--sabotage", action="store_true", help="corrupt verification; losslessness must then fail")
    _add_common(p)
    p.set_defaults(fn=cmd_certify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
