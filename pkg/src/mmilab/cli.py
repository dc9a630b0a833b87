"""Command-line front end.

    mmilab gen        --config C --out DIR
    mmilab train-ml   --config C --out DIR [--iters N]
    mmilab run-regime --config C --out DIR [--regime R] [--E x] [--iters N]
    mmilab e-sweep    --config C --out DIR [--iters N]
    mmilab analyze    MODEL_A MODEL_B --out DIR

Exit codes: 0 ok, 2 configuration, 3 training, 4 starved reference, 5 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from mmilab import persist
from mmilab.analysis import compare_models, project_means
from mmilab.criteria import ReferenceStarvedError
from mmilab.gauss_hmm import ContractError, EmptyCompositionError
from mmilab.lattice import write_lattices
from mmilab.parallel import default_jobs
from mmilab.persist import ConfigError, FormatError, RunConfig
from mmilab.synth import generate_task
from mmilab.training import (EbwConfig, IterationRow, Regime, build_lattices, e_sweep, flat_start, run_regime,
                             train_ml)

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_STARVED, EXIT_IO = 0, 2, 3, 4, 5

log = logging.getLogger("mmilab")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def resolve_config(args) -> RunConfig:
    cfg = persist.load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.task = dataclasses.replace(cfg.task, seed=args.seed)
    if getattr(args, "iters", None) is not None:
        if args.iters < 0:
            raise ConfigError("--iters", "must be nonnegative")
        if args.command == "train-ml":
            cfg.ml_iters = args.iters
        else:
            cfg.iters = args.iters
    if getattr(args, "regime", None) is not None:
        try:
            cfg.regime = Regime(args.regime)
        except ValueError:
            raise ConfigError("--regime", f"invalid value {args.regime!r}") from None
    if getattr(args, "E", None) is not None:
        if not args.E >= 0:
            raise ConfigError("--E", "must be nonnegative")
        cfg.ebw = dataclasses.replace(cfg.ebw, E=args.E)
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if cfg.jobs <= 0:
        try:
            cfg.jobs = default_jobs()
        except ContractError as e:
            raise ConfigError("MMILAB_JOBS", str(e)) from None
    if args.out:
        cfg.out = args.out
    return cfg


def _write_resolved(cfg: RunConfig, out: Path) -> str:
    persist.write_text(out / "config.json", persist.dumps(persist.config_to_dict(cfg)))
    return "config.json"


def _load_bundle(cfg: RunConfig, out: Path):
    path = out / "task.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'mmilab gen' first")
    spec, task = persist.task_from_dict(persist.read_json(path))
    if spec != cfg.task:
        raise ConfigError("task", f"configuration differs from the bundle in {out}")
    return spec, task


def _load_mle(out: Path):
    path = out / "mle.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run 'mmilab train-ml' first")
    return persist.load_model(path)


def _emit(fields_: dict) -> None:
    """One tab-delimited key/value line per field on stdout."""
    for k, v in fields_.items():
        print(f"{k}\t{persist.fmt(v) if isinstance(v, (int, float, np.floating)) else v}")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    task = generate_task(cfg.task)
    persist.write_text(out / "task.json", persist.dumps(persist.task_to_dict(cfg.task, task)))
    names = ["task.json", _write_resolved(cfg, out)]
    persist.write_manifest(out, names)
    _emit({"train_utterances": len(task.train), "test_utterances": len(task.test),
           "train_frames": task.train.n_frames, "bundle": str(out / "task.json")})
    return EXIT_OK


def cmd_train_ml(cfg: RunConfig) -> int:
    from mmilab.evaluation import decode_method_a
    from mmilab import plots

    out = Path(cfg.out)
    _, task = _load_bundle(cfg, out)
    init = flat_start(task.true_model, task.train.all_frames())
    try:
        models, lls = train_ml(init, task.train, task.lexicon, cfg.ml_iters, cfg.lattice.silence, cfg.jobs)
    except (EmptyCompositionError, FloatingPointError) as e:
        raise TrainingError(str(e)) from e
    if not np.all(np.isfinite(lls)):
        raise TrainingError("non-finite log-likelihood during Baum-Welch")
    mle = models[-1]
    persist.save_model(mle, out / "mle.json")
    persist.write_csv(out / "ml_log.csv", ("iter", "ll_pf"), [[k, v] for k, v in enumerate(lls)])
    plots.line_plot(out / "ml_log.svg", range(len(lls)), {"log-likelihood per frame": lls},
                    "Baum-Welch iteration", "log-likelihood per frame", "Maximum-likelihood training")
    wer = decode_method_a(mle, task.train, task.lexicon, task.train_lm, cfg.lattice)[0].wer
    persist.write_manifest(out, ["task.json", "config.json", "mle.json", "ml_log.csv", "ml_log.svg"])
    _emit({"iterations": cfg.ml_iters, "ll_pf_initial": lls[0], "ll_pf_final": lls[-1], "train_wer": wer,
           "model": str(out / "mle.json")})
    return EXIT_OK


def _progress(row: IterationRow) -> None:
    c = row.criterion
    log.info("iter %d  log_mmi_pf %.6f  dist %.4f  (%.1fs)", row.iter, c.log_mmi_per_frame, row.param_dist,
             row.wall_time)


def _regime_plots(logbook, d: Path) -> List[str]:
    from mmilab import plots

    k = logbook.column("iter")
    crit = "mpe_criterion" if logbook.criterion == "mpe" else "log_mmi_pf"
    wer = {name: logbook.column(col) for name, col in (("train WER (A)", "train_wer_a"),
                                                       ("train WER (B/C)", "train_wer_b_or_c"),
                                                       ("test WER (A)", "test_wer"))}
    plots.twin_plot(d / "criterion_wer.svg", k, {crit: logbook.column(crit)}, wer, "iteration",
                    "approximate criterion" + (" (per frame)" if crit == "log_mmi_pf" else ""),
                    "WER (%)", f"{logbook.regime.value}: criterion and WER")
    plots.line_plot(d / "numden.svg", k, {"numerator": logbook.column("num_ll_pf"),
                                          "denominator": logbook.column("den_ll_pf")},
                    "iteration", "log-likelihood per frame", "Numerator and denominator log-likelihoods")
    plots.line_plot(d / "param_dist.svg", k, {"distance": logbook.column("param_dist")}, "iteration",
                    "distance from the ML model", "Parameter drift")
    names = ["criterion_wer.svg", "numden.svg", "param_dist.svg"]
    exact = logbook.column("exact_log_mmi_pf")
    if any(v is not None for v in exact):
        plots.line_plot(d / "approx_exact.svg", k, {"approximate": logbook.column("log_mmi_pf"),
                                                    "exact": exact},
                        "iteration", "log MMI per frame", "Approximate and exact MMI criteria")
        names.append("approx_exact.svg")
    return names


def cmd_run_regime(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _, task = _load_bundle(cfg, out)
    mle = _load_mle(out)
    ebw = dataclasses.replace(cfg.ebw, kappa=cfg.lattice.kappa)
    d = out / f"{cfg.criterion}-{cfg.regime.value}-E{persist.fmt(ebw.E)}"
    d.mkdir(parents=True, exist_ok=True)
    lattices = build_lattices(mle, task, task.train, cfg.lattice, None, "mle", cfg.jobs)
    write_lattices(d / "mle_lattices.txt", lattices[1])
    try:
        logbook = run_regime(cfg.regime, cfg.iters, task, mle, ebw, cfg.lattice, cfg.plan, cfg.criterion,
                             mle_lattices=lattices, jobs=cfg.jobs, progress=_progress)
    except ReferenceStarvedError:
        raise
    except (EmptyCompositionError, FloatingPointError) as e:
        raise TrainingError(str(e)) from e
    persist.write_iteration_csv(logbook, d / "iterations.csv")
    names = ["iterations.csv", "mle_lattices.txt"] + _regime_plots(logbook, d)
    for k, m in sorted(logbook.snapshots.items()):
        persist.save_model(m, d / f"model_{k:03d}.json")
        names.append(f"model_{k:03d}.json")
    persist.save_model(logbook.final_model, d / "model_final.json")
    names.append("model_final.json")
    names.append(_write_resolved(cfg, d))
    persist.write_manifest(d, names)
    last = logbook.rows[-1]
    _emit({"regime": cfg.regime.value, "criterion": cfg.criterion, "iterations": cfg.iters,
           "log_mmi_pf_initial": logbook.rows[0].criterion.log_mmi_per_frame,
           "log_mmi_pf_final": last.criterion.log_mmi_per_frame, "param_dist_final": last.param_dist,
           "output": str(d)})
    return EXIT_OK


def cmd_e_sweep(cfg: RunConfig) -> int:
    from mmilab import plots

    out = Path(cfg.out)
    _, task = _load_bundle(cfg, out)
    mle = _load_mle(out)
    ebw = dataclasses.replace(cfg.ebw, kappa=cfg.lattice.kappa)
    d = out / "e-sweep"
    d.mkdir(parents=True, exist_ok=True)
    plan = dataclasses.replace(cfg.plan, wer_every=0, exact_every=0)
    runs = e_sweep(cfg.e_values, cfg.iters, task, mle, ebw, cfg.lattice, plan, cfg.jobs)
    rows = []
    for E, lb in runs.items():
        for r in lb.rows:
            rows.append([E, r.iter, r.criterion.log_mmi_per_frame, r.param_dist])
    persist.write_csv(d / "e_sweep.csv", ("E", "iter", "log_mmi_pf", "param_dist"), rows)
    any_log = next(iter(runs.values()))
    plots.line_plot(d / "e_sweep.svg", any_log.column("iter"),
                    {f"E = {persist.fmt(E)}": lb.column("log_mmi_pf") for E, lb in runs.items()},
                    "iteration", "approximate log MMI per frame", "Criterion for several E")
    persist.write_manifest(d, ["e_sweep.csv", "e_sweep.svg", _write_resolved(cfg, d)])
    for E, lb in runs.items():
        mmi = np.array(lb.column("log_mmi_pf"))
        _emit({f"E={persist.fmt(E)}\tdecreases": int(np.sum(np.diff(mmi) < -1e-6))})
    return EXIT_OK


def cmd_analyze(path_a: str, path_b: str, out: str) -> int:
    from mmilab import plots

    a, b = persist.load_model(path_a), persist.load_model(path_b)
    try:
        cmp = compare_models(a, b)
    except ContractError as e:
        raise ConfigError("models", str(e)) from None
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    before, after = cmp.before, cmp.after
    basis = (before.eigenvectors[:, 0], before.eigenvectors[:, -1])
    pa = project_means(a, basis, before.centroid)
    pb = project_means(b, basis, before.centroid)
    persist.write_csv(d / "projection.csv", ("state", "model", "u_low", "u_high"),
                      [[j, "A", x, y] for j, (x, y) in enumerate(pa)] + [[j, "B", x, y] for j, (x, y) in enumerate(pb)])
    persist.write_csv(d / "volume_change.csv", ("state", "V"), [[j, v] for j, v in enumerate(cmp.volume.per_state)])
    report = {
        "format": "mmilab-analysis", "version": persist.FORMAT_VERSION,
        "log_volume_a": persist._num(before.log_volume), "log_volume_b": persist._num(after.log_volume),
        "log_volume_ratio": cmp.log_volume_ratio,
        "volume_ratio": math.exp(cmp.log_volume_ratio) if cmp.log_volume_ratio < 700 else None,
        "elongation_a": None if before.degenerate else before.elongation,
        "elongation_b": None if after.degenerate else after.elongation,
        "eigenvalues_a": persist._arr(before.eigenvalues), "eigenvalues_b": persist._arr(after.eigenvalues),
        "fraction_negative_v": cmp.volume.fraction_negative,
        "floored_a": cmp.floored_before, "floored_b": cmp.floored_after, "components": cmp.n_components,
    }
    persist.write_text(d / "analysis.json", persist.dumps(report))
    plots.scatter_plot(d / "projection.svg", {"A": pa, "B": pb}, "smallest-eigenvalue direction of A",
                       "largest-eigenvalue direction of A", "State means projected")
    plots.histogram(d / "volume_change.svg", cmp.volume.per_state, "V_j (log volume change)",
                    "Per-state variance volume change")
    persist.write_manifest(d, ["analysis.json", "projection.csv", "volume_change.csv", "projection.svg",
                               "volume_change.svg"])
    _emit({"log_volume_ratio": cmp.log_volume_ratio,
           "elongation_a": report["elongation_a"] if report["elongation_a"] is not None else "degenerate",
           "elongation_b": report["elongation_b"] if report["elongation_b"] is not None else "degenerate",
           "fraction_negative_v": cmp.volume.fraction_negative,
           "floored_b": cmp.floored_after, "components": cmp.n_components})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmilab", description="Desk-scale lattice MMI training experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-iteration progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, iters=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--out", help="bundle / output directory")
        sp.add_argument("--seed", type=int, help="override task.seed")
        sp.add_argument("--jobs", type=int, help="utterance-level worker threads (default MMILAB_JOBS or 1)")
        if iters:
            sp.add_argument("--iters", type=int, help="override the iteration count")

    common(sub.add_parser("gen", help="generate the synthetic task bundle"), iters=False)
    common(sub.add_parser("train-ml", help="flat start plus Baum-Welch"))
    sp = sub.add_parser("run-regime", help="EBW iterations under a lattice regime")
    common(sp)
    sp.add_argument("--regime", help="fixed | regenerate-all | regenerate-phone-marks")
    sp.add_argument("--E", type=float, help="override ebw.E")
    sp = sub.add_parser("e-sweep", help="fixed-lattice runs for several E")
    common(sp)
    sp = sub.add_parser("analyze", help="compare two model files")
    sp.add_argument("model_a")
    sp.add_argument("model_b")
    sp.add_argument("--out", required=True)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        if args.command == "analyze":
            return cmd_analyze(args.model_a, args.model_b, args.out)
        cfg = resolve_config(args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train-ml":
            return cmd_train_ml(cfg)
        if args.command == "run-regime":
            return cmd_run_regime(cfg)
        return cmd_e_sweep(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ReferenceStarvedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STARVED
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, FormatError, json.JSONDecodeError, KeyError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except ContractError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
