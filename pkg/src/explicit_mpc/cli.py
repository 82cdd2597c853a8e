"""Command-line entry point: one config-driven command per pipeline stage.

Every command reads the experiment template (optionally overridden by
``--config``), writes CSV/JSON artifacts into ``--out`` and stamps each
file with the config hash.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from ._io import write_json, write_matrix_csv
from .config import EXPERIMENTS, ConfigError, config_hash, load_config

log = logging.getLogger("explicit_mpc")

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class CliError(RuntimeError):
    pass


def _stamp(cfg, command):
    return {"config_hash": config_hash(cfg), "experiment": cfg["experiment"], "command": command,
            "package_version": __version__}


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {path}; run `{hint}` first")
    return path


def _require(cfg, *names):
    if cfg["experiment"] not in names:
        raise CliError(f"this command supports --experiment {' / '.join(names)}, not {cfg['experiment']}")


# --------------------------------------------------------------------------
# commands


def cmd_generate(cfg, out: Path, jobs: int):
    from .experiments import LINEAR_PROBLEMS, cstr_problem_from_config, cstr_sampling_from_config
    from .sampling import generate_cstr_dataset, generate_linear_dataset, grid_sample, split

    _require(cfg, "linear-singular", "linear-bemporad", "linear-quadcon", "cstr")
    stamp = _stamp(cfg, "generate")
    t0 = time.perf_counter()
    if cfg["experiment"] == "cstr":
        ds = generate_cstr_dataset(cstr_sampling_from_config(cfg), cstr_problem_from_config(cfg), n_jobs=jobs)
        split(ds, cfg["split"]["n_train"], seed=cfg["seed"])
    else:
        prob = LINEAR_PROBLEMS[cfg["experiment"]](cfg["problem"]["horizon"])
        ext, n = cfg["grid"]["extent"], cfg["grid"]["n"]
        ds = generate_linear_dataset(prob, grid_sample([(-ext, ext)] * prob.sys.n_states, [n] * prob.sys.n_states))
        ds.seed = cfg["seed"]
    ds.save(out / "dataset.csv", out / "dataset.json", header=stamp)
    log.info("wrote %d rows to %s in %.1f s", len(ds), out / "dataset.csv", time.perf_counter() - t0)
    return 0


def _load_dataset(out: Path):
    from .sampling import PolicyDataset

    return PolicyDataset.load(_need(out / "dataset.csv", "generate"), out / "dataset.json")


def cmd_embed(cfg, out: Path):
    from .manifold import InformedMetricConfig, dmaps, llr_residuals, pca, tune_scales
    from .pipeline import embed_cstr
    from .sampling import augment_dataset

    _require(cfg, "linear-singular", "linear-bemporad", "linear-quadcon", "cstr")
    stamp = _stamp(cfg, "embed")
    ds = _load_dataset(out)
    e = cfg["embedding"]
    summary = {}
    if cfg["experiment"] == "cstr":
        tr = ds.train_idx
        for tag in ("alpha", "beta", "gamma"):
            X = augment_dataset(ds, tag)
            ce = embed_cstr(X[tr], ds.U_star[tr], tag, e["policy_prefix"], e["c_in"], e["c_fn"],
                            e["n_eigs"], e["llr_threshold"], seed=cfg["seed"])
            ce.embedding.save(out / f"embedding_{tag}.csv", out / f"embedding_{tag}.json",
                              {**stamp, "llr_residuals": ce.llr.residuals.tolist(),
                               "llr_threshold": ce.llr.threshold, "rows": "train_idx"})
            _write_llr(out / f"llr_{tag}.csv", ce.llr, stamp)
            summary[tag] = {"kept": ce.kept, "llr_residuals": ce.llr.residuals.tolist(),
                            "eigenvalues": ce.embedding.eigenvalues.tolist()}
            log.info("%s: kept eigenvectors %s", tag, [k + 1 for k in ce.kept])
    else:
        F = ds.U_star[:, : e["policy_prefix"]]
        eps, xi = tune_scales(ds.X_star, F, e["c_in"], e["c_fn"], seed=cfg["seed"])
        emb = dmaps(ds.X_star, F, InformedMetricConfig(eps, xi, e["policy_prefix"]), alpha=e["alpha"],
                    n_eigs=e["n_eigs"])
        rep = llr_residuals(emb, e["n_eigs"], e["llr_threshold"])
        emb.save(out / "embedding.csv", out / "embedding.json", {**stamp, "llr_residuals": rep.residuals.tolist()})
        _write_llr(out / "llr.csv", rep, stamp)
        pc = pca(np.hstack([ds.X_star, ds.U_star]))
        write_matrix_csv(out / "pca.csv", [f"pc_{i + 1}" for i in range(pc.scores.shape[1])], pc.scores, stamp)
        write_json(out / "pca.json", {"explained_variance_ratio": pc.explained_variance_ratio,
                                      "singular_values": pc.singular_values}, stamp)
        summary = {"kept": rep.selected, "llr_residuals": rep.residuals, "eigenvalues": emb.eigenvalues,
                   "epsilon": eps, "xi": xi}
    write_json(out / "embed.json", summary, stamp)
    return 0


def _write_llr(path, rep, stamp):
    rows = np.column_stack([np.arange(1, len(rep.residuals) + 1), rep.residuals,
                            [k in rep.selected for k in range(len(rep.residuals))]])
    write_matrix_csv(path, ["eigenvector", "residual", "selected"], rows, {**stamp, "threshold": rep.threshold})


def cmd_fit(cfg, out: Path):
    from .experiments import linear_from_config

    _require(cfg, "linear-singular", "linear-bemporad", "linear-quadcon", "cstr")
    stamp = _stamp(cfg, "fit")
    if cfg["experiment"] != "cstr":
        res = linear_from_config(cfg)
        write_json(out / "reduced_law.json", {**res.metrics, "dmaps_2d_eigenvectors": [k + 1 for k in res.dmaps_2d],
                                              "llr_residuals": res.llr, "pca_explained_variance": res.pca_evr},
                   stamp)
        return 0
    return _fit_cstr(cfg, out, stamp)


def _fit_cstr(cfg, out, stamp):
    from .manifold import LlrReport, ManifoldEmbedding
    from .pipeline import CstrEmbedding, fit_cstr_pipelines

    ds = _load_dataset(out)
    reports = {}
    rows = []
    for tag in cfg["fit"]["parametrizations"]:
        jp = _need(out / f"embedding_{tag}.json", "embed")
        emb = ManifoldEmbedding.load(out / f"embedding_{tag}.csv", jp)
        meta = json.loads(jp.read_text())
        ce = CstrEmbedding(tag, emb, LlrReport(np.array(meta["llr_residuals"]), meta["llr_threshold"], emb.kept))
        rep = fit_cstr_pipelines(ds, tag, cfg["embedding"]["policy_prefix"], cfg["fit"]["mlp_epochs"],
                                 seed=cfg["seed"], embedding=ce)
        for kind, results in (("forward", rep.forward), ("inverse", rep.inverse), ("direct", [rep.direct])):
            for r in results:
                if r.controller is None:
                    log.error("%s %s %s failed: %s", tag, kind, r.name, r.error)
                    continue
                d = out / "models" / tag / (r.name if kind == "direct" else f"{kind}-{r.name}")
                r.controller.save(d)
                (d / "config_hash.txt").write_text(stamp["config_hash"] + "\n")
                if kind != "inverse":
                    rows.append([tag, d.name, r.metrics])
        reports[tag] = rep.to_dict()
    write_json(out / "fit_report.json", reports, stamp)
    with open(out / "fit_forward.csv", "w") as fh:
        keys = ["mse_step_1", "mse_step_5", "mse_step_10", "r2_u0_unsaturated", "r2_u0_interior"]
        fh.write("".join(f"# {k}: {v}\n" for k, v in stamp.items()))
        fh.write("parametrization,pipeline," + ",".join(keys) + "\n")
        for tag, name, m in rows:
            fh.write(f"{tag},{name}," + ",".join(repr(float(m[k])) for k in keys) + "\n")
    return 0


def cmd_simulate(cfg, out: Path, with_implicit: bool):
    from .controller import (ExplicitController, ImplicitController, compare_controllers,
                             simulate_closed_loop)
    from .dynamics import CstrParams
    from .experiments import cstr_problem_from_config

    _require(cfg, "cstr")
    stamp = _stamp(cfg, "simulate")
    s = cfg["simulate"]
    d = out / "models" / s["parametrization"] / f"forward-{s['stage1']}+{s['stage2']}"
    _need(d / "controller.json", "fit")
    ctrl = ExplicitController.load(d)
    prob = cstr_problem_from_config(cfg)
    implicit = ImplicitController(prob, s["parametrization"])
    schedule = tuple((int(a), float(b)) for a, b in s["schedule"])
    kw = dict(schedule=schedule, sigma=s["sigma"], steps=s["steps"], seed=cfg["seed"],
              dt=prob.dt, substeps=prob.substeps, noise_mode=s["noise_mode"])
    params = CstrParams()
    trace = simulate_closed_loop(params, ctrl, shadow=implicit if with_implicit else None, **kw)
    trace.to_csv(out / "trace.csv", stamp)
    report = {"diverged_explicit": trace.diverged, "steps": len(trace), "clamped_inputs": trace.meta["clamped_inputs"]}
    if with_implicit:
        itrace = simulate_closed_loop(params, implicit, **kw)
        itrace.to_csv(out / "trace_implicit.csv", stamp)
        report["diverged_implicit"] = itrace.diverged
        if len(itrace) == len(trace):
            report.update(compare_controllers(trace, itrace, s["transient"]))
    write_json(out / "simulate.json", report, stamp)
    if trace.diverged or report.get("diverged_implicit"):
        log.error("closed-loop simulation diverged")
        return EXIT_DIVERGED
    return 0


def cmd_bifurcation(cfg, out: Path):
    from .dynamics import CstrParams, compute_steady_states, fold_points, write_bifurcation_csv

    _require(cfg, "cstr")
    stamp = _stamp(cfg, "bifurcation")
    b = cfg["bifurcation"]
    p = CstrParams()
    scan = compute_steady_states(p, np.linspace(b["tc_hat_min"], b["tc_hat_max"], b["n"]))
    write_bifurcation_csv(out / "bifurcation.csv", scan, p, header=stamp)
    folds = fold_points(p)
    write_json(out / "folds.json", {"folds": [{"tc_hat": tc, "ca_hat": x[0], "tr_hat": x[1],
                                                "conversion": 1.0 - x[0] * 10.0 / p.ca0} for tc, x in folds]},
               stamp)
    log.info("found %d fold points", len(folds))
    return 0


def cmd_demo_fig1(cfg, out: Path):
    from .manifold import demo_informed_reparametrization

    _require(cfg, "fig1-demo")
    stamp = _stamp(cfg, "demo-fig1")
    d = cfg["demo"]
    r = demo_informed_reparametrization(d["n_grid"], d["extent"], d["c_in"], d["c_fn"], d["degree"])
    M = np.column_stack([r["points"], r["q"], r["phi"][:, :2]])
    write_matrix_csv(out / "fig1.csv", ["p1", "p2", "q", "phi_1", "phi_2"], M, stamp)
    write_json(out / "fig1.json", {k: r[k] for k in ("r2_phi1", "rss_phi1", "r2_p", "rss_p", "epsilon", "xi",
                                                     "eigenvalues")}, stamp)
    log.info("cubic R^2 on phi_1 %.4f, on (p1, p2) %.4f", r["r2_phi1"], r["r2_p"])
    return 0


def cmd_diagnostics(cfg, out: Path):
    from .dynamics import BEMPORAD_SYSTEM, SINGULAR_SYSTEM, linear_diagnostics

    stamp = _stamp(cfg, "diagnostics")
    res = {}
    for name, sys_ in (("linear-singular", SINGULAR_SYSTEM), ("linear-bemporad", BEMPORAD_SYSTEM)):
        eig, hsv = linear_diagnostics(sys_)
        res[name] = {"eigenvalues": np.real_if_close(eig).tolist(), "hankel_singular_values": hsv.tolist()}
    write_json(out / "diagnostics.json", res, stamp)
    return 0


COMMANDS = ("generate", "embed", "fit", "simulate", "bifurcation", "demo-fig1", "diagnostics")
DEFAULT_EXPERIMENT = {"bifurcation": "cstr", "demo-fig1": "fig1-demo", "diagnostics": "linear-singular",
                      "simulate": "cstr"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="explicit-mpc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--experiment", choices=EXPERIMENTS, default=None)
        sp.add_argument("--config", type=Path, default=None, help="YAML overrides of the experiment template")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers for generate")
        sp.add_argument("--out", type=Path, default=None, help="output directory (default runs/<experiment>)")
        sp.add_argument("--with-implicit", action="store_true", help="simulate: also run the on-line NMPC")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        experiment = args.experiment or (None if args.config else DEFAULT_EXPERIMENT.get(args.command))
        cfg = load_config(experiment, args.config, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path("runs") / cfg["experiment"]
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / f"config_{args.command}.json", {"config": cfg}, _stamp(cfg, args.command))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            if args.command == "generate":
                return cmd_generate(cfg, out, args.jobs)
            if args.command == "embed":
                return cmd_embed(cfg, out)
            if args.command == "fit":
                return cmd_fit(cfg, out)
            if args.command == "simulate":
                return cmd_simulate(cfg, out, args.with_implicit)
            if args.command == "bifurcation":
                return cmd_bifurcation(cfg, out)
            if args.command == "demo-fig1":
                return cmd_demo_fig1(cfg, out)
            return cmd_diagnostics(cfg, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
