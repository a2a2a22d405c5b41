"""CLI task implementations: run an experiment and persist its artifacts."""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
from pathlib import Path

import numpy as np

from hcontrol import experiments as ex
from hcontrol.densities import ObsModel, checkerboard_conditional_modes, gmrf_build
from hcontrol.flowmodel import (
    MLPVelocity,
    TrainConfig,
    load_weights,
    save_weights,
    train_mlp,
)
from hcontrol.guidance import GuidanceSpec
from hcontrol.harness import plotting
from hcontrol.harness.config import SCHEMA_VERSION, ConfigError
from hcontrol.metrics import bin_delta_traces
from hcontrol.rng import Streams
from hcontrol.schedule import Lattice

log = logging.getLogger(__name__)

SAMPLE_HEADER = ["seed", "x1", "x2"]
SWEEP_HEADER = ["method", "nfe", "seed", "posterior_hit", "manifold_hit", "mode_balance"]
SUMMARY_HEADER = ["method", "nfe", "posterior_hit_mean", "posterior_hit_std", "manifold_hit_mean", "seeds"]
DIAG_HEADER = ["outer_step", "sigma", "inner_iters_used", "stable_fraction", "mean_abs_dW", "nfe_forward", "nfe_backward"]

PROVENANCE = {
    "mlp": "6 affine layers, SiLU, sinusoidal time embedding with geometric frequencies in [1, 1000]",
    "sigma_sampling": "sigma = u**sigma_power with u ~ Uniform(0, 1) per training example",
    "sigma_dot": "+1 (forward-time derivative of the linear schedule)",
    "tfg_ugd": "reconstruction matching the documented call count n_recur*(n_iter+1)+1",
    "rng": "numpy SeedSequence(master_seed, spawn_key=(seed_index, crc32(stream_label))) with PCG64",
    "toy_posterior_oracle": "rejection sampling from the checkerboard prior with the Gaussian likelihood",
}


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return str(path)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_record(out: Path, cfg: dict, metrics: dict, artifacts: list, started: float, nfe=None) -> dict:
    record = {
        "schema_version": SCHEMA_VERSION,
        "task": cfg["task"],
        "config": cfg,
        "metrics": metrics,
        "nfe": nfe,
        "wall_clock_s": time.perf_counter() - started,
        "artifacts": sorted(str(Path(a).name) for a in artifacts),
        "provenance": dict(PROVENANCE, python=platform.python_version(), numpy=np.__version__),
    }
    record = _jsonable(record)
    (out / "results.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def _obs_model(cfg) -> ObsModel:
    d = cfg["density"]
    return ObsModel(y_obs=float(d["y_obs"]), sigma_y=float(d["sigma_y"]))


def _load_mlp(cfg, base: Path | None = None):
    path = Path(cfg["model"]["weights"])
    if not path.is_absolute() and base is not None and not path.exists():
        path = base / path
    if not path.exists():
        raise ConfigError(f"weights file {path} does not exist (run `hctl train` first)")
    return MLPVelocity(load_weights(path), dtype=cfg["model"]["dtype"])


def _gmrf(block):
    return gmrf_build(tuple(block["shape"]), block["beta1"], block["beta2"], block["tau_d"])


def cmd_train(cfg: dict, out: Path) -> dict:
    started = time.perf_counter()
    tc = TrainConfig(**cfg["train"])
    streams = Streams(cfg["seed"], 0)
    result = train_mlp(tc, streams("train"), progress_every=1000)
    weights = out / "weights.bin"
    save_weights(weights, result.params)
    loss_csv = write_csv(out / "loss.csv", ["iteration", "loss", "lr"],
                         zip(range(tc.iterations), result.losses, result.lrs))
    fig = plotting.loss_curve(result.losses, out / "loss.svg")
    model = MLPVelocity(result.params, dtype=cfg["model"]["dtype"])
    hit = ex.unconditional_hit_rate(model, cfg["model"]["hit_samples"], cfg["steps"], cfg["seed"])
    print(f"manifold-hit over {cfg['model']['hit_samples']} unconditional samples: {hit:.4f}")
    metrics = {
        "manifold_hit": hit,
        "train_seconds": result.seconds,
        "initial_loss": float(result.losses[:100].mean()),
        "final_loss": float(result.losses[-100:].mean()),
    }
    return write_record(out, cfg, metrics, [weights, loss_csv, fig], started)


def _toy_run_summary(run):
    p, se = run.pooled()
    return {
        "posterior_hit_per_seed": run.posterior_rates,
        "manifold_hit_per_seed": run.manifold_rates,
        "mode_balance_per_seed": [r.mode_balance for r in run.reports],
        "posterior_hit_mean": float(run.posterior_rates.mean()),
        "posterior_hit_std": float(run.posterior_rates.std(ddof=1)) if len(run.reports) > 1 else 0.0,
        "posterior_hit_pooled": p,
        "posterior_hit_pooled_se": se,
        "manifold_hit_mean": float(run.manifold_rates.mean()),
        "nfe": float(np.mean(run.nfe)),
        "spec": run.spec,
    }


def cmd_toy_fig(cfg: dict, out: Path) -> dict:
    started = time.perf_counter()
    model = _load_mlp(cfg, out)
    obs = _obs_model(cfg)
    modes = checkerboard_conditional_modes(obs)
    methods = {"oracle": None, **cfg["methods"]}
    metrics, artifacts = {}, []
    delta = {}
    for name, spec in methods.items():
        run = ex.run_toy_method(model, name, spec or {}, obs, cfg["seeds"], cfg["samples_per_seed"],
                                cfg["steps"], cfg["seed"], cfg["threads"])
        rows = [(i, p[0], p[1]) for i, pts in enumerate(run.points) for p in pts]
        artifacts.append(write_csv(out / f"samples_{name}.csv", SAMPLE_HEADER, rows))
        artifacts.append(plotting.toy_scatter(np.concatenate(run.points), out / f"scatter_{name}.svg",
                                              f"{name} (NFE {np.mean(run.nfe):.0f})", obs.y_obs, modes))
        metrics[name] = _toy_run_summary(run)
        if run.traces and run.traces[0]:
            sig = [d["sigma"] for d in run.diagnostics[0] if not np.isnan(d["mean_abs_dW"])]
            traces = [t for seed_t in run.traces for t in seed_t]
            sigmas = sig * len(run.traces)
            if len(sigmas) == len(traces):
                delta[name] = bin_delta_traces(sigmas, traces, cfg["band_edges"])
        if run.diagnostics and run.diagnostics[0]:
            artifacts.append(write_csv(out / f"diagnostics_{name}.csv", DIAG_HEADER,
                                       ([d[h] for h in DIAG_HEADER] for d in run.diagnostics[0])))
    for name, bands in delta.items():
        artifacts.append(plotting.delta_bands(bands, out / f"delta_w_{name}.svg"))
        metrics[name]["delta_w_bands"] = bands
    nfe = {k: v["nfe"] for k, v in metrics.items()}
    return write_record(out, cfg, metrics, artifacts, started, nfe)


def cmd_sweep(cfg: dict, out: Path) -> dict:
    started = time.perf_counter()
    model = _load_mlp(cfg, out)
    obs = _obs_model(cfg)
    sw = cfg["sweep"]
    specs = ex.sweep_specs(sw["J"], sw["n_recur"], sw["n_iter"], sw["mu"], sw["rho"])
    rows, summary, metrics = [], [], {}
    for name, spec in specs.items():
        run = ex.run_toy_method(model, name, spec, obs, cfg["seeds"], cfg["samples_per_seed"], cfg["steps"],
                                cfg["seed"], cfg["threads"])
        for i, rep in enumerate(run.reports):
            rows.append((name, run.nfe[i], i, rep.posterior_rate, rep.manifold_rate, rep.mode_balance))
        s = _toy_run_summary(run)
        summary.append((name, s["nfe"], s["posterior_hit_mean"], s["posterior_hit_std"], s["manifold_hit_mean"],
                        cfg["seeds"]))
        metrics[name] = s
    ref = ex.run_toy_method(model, "dps_stop_grad", GuidanceSpec("dps", jacobian_mode="stop_grad"), obs,
                            cfg["seeds"], cfg["samples_per_seed"], cfg["steps"], cfg["seed"], cfg["threads"])
    metrics["reference_dps_stop_grad"] = _toy_run_summary(ref)
    hc = [metrics[f"h_control_J{J}"] for J in sw["J"]]
    n_drop, n_big = ex.count_inversions([m["posterior_hit_mean"] for m in hc], [m["posterior_hit_std"] for m in hc])
    metrics["h_control_inversions"] = {"drops": n_drop, "drops_over_1std": n_big}
    artifacts = [
        write_csv(out / "sweep.csv", SWEEP_HEADER, rows),
        write_csv(out / "sweep_summary.csv", SUMMARY_HEADER, summary),
    ]
    curves = {}
    for label, prefix in (("h-control (J)", "h_control_J"), ("TFG-UGD (N_recur)", "tfg_ugd_R")):
        cells = [m for k, m in metrics.items() if k.startswith(prefix)]
        curves[label] = (np.array([c["nfe"] for c in cells]), np.array([c["posterior_hit_mean"] for c in cells]),
                         np.array([c["posterior_hit_std"] for c in cells]))
    artifacts.append(plotting.hit_vs_nfe(curves, out / "sweep.svg"))
    nfe = {k: v["nfe"] for k, v in metrics.items() if isinstance(v, dict) and "nfe" in v}
    return write_record(out, cfg, metrics, artifacts, started, nfe)


def cmd_gibbs_oracle(cfg: dict, out: Path) -> dict:
    started = time.perf_counter()
    d = cfg["density"]
    spec = gmrf_build(tuple(d["shape"]), d["beta1"], d["beta2"], d["tau_d"])
    g = cfg["gibbs"]
    mask = ex.default_mask(spec.lattice, g["observed_fraction"])
    common = dict(sigma=g["sigma"], chains=g["chains"], burn_in=g["burn_in"], ed_samples=g["ed_samples"],
                  permutations=g["permutations"], seed=cfg["seed"])
    metrics = {
        "posterior_sample": ex.gibbs_oracle_check(spec, mask, inner_recon="posterior_sample", **common),
        "mean": ex.gibbs_oracle_check(spec, mask, inner_recon="mean", **common),
        "empty_mask": ex.gibbs_oracle_check(spec, ex.default_mask(spec.lattice, 0.0),
                                            inner_recon="posterior_sample", **common),
    }
    rows = []
    for name, m in metrics.items():
        rows.append((name, m["max_abs_z"], m["cov_frobenius_rel_error"], m["cov_trace_ratio"],
                     m["energy_distance"], m["energy_null_q95"]))
    artifacts = [write_csv(out / "gibbs_oracle.csv",
                           ["case", "max_abs_z", "cov_frob_rel_err", "cov_trace_ratio", "energy_distance",
                            "energy_null_q95"], rows)]
    (out / "gmrf.json").write_text(spec.to_json() + "\n")
    artifacts.append(out / "gmrf.json")
    return write_record(out, cfg, metrics, artifacts, started)


def cmd_locality(cfg: dict, out: Path) -> dict:
    started = time.perf_counter()
    spec = _gmrf(cfg["locality"])
    loc = cfg["locality"]
    study = ex.locality_study(spec, loc["samples"], loc["sigmas"], cfg["steps"], cfg["seed"])
    artifacts, metrics = [], {}
    for source, axes in study.items():
        curves = {}
        metrics[source] = {}
        for ax, r in axes.items():
            n = r["rho"].shape[0]
            artifacts.append(write_csv(out / f"rho_{source}_{ax}.csv", [f"p{i}" for i in range(n)], r["rho"]))
            artifacts.append(plotting.rho_heatmap(r["rho"], out / f"rho_{source}_{ax}.svg", f"{source} axis {ax}"))
            artifacts.append(write_csv(out / f"eta_{source}_{ax}.csv", ["r", "eta"], enumerate(r["eta"])))
            curves[ax] = r["eta"]
            metrics[source][ax] = {k: r[k] for k in ("eta2", "floor", "n_lines", "max_beyond_band")}
        artifacts.append(plotting.eta_curves(curves, out / f"eta_{source}.svg"))
    (out / "gmrf.json").write_text(spec.to_json() + "\n")
    artifacts.append(out / "gmrf.json")
    metrics["band"] = spec.band
    return write_record(out, cfg, metrics, artifacts, started)


ABLATE_HEADER = ["readout", "freeze", "J_max", "realized_inner_iters", "mean_nfe", "score"]


def cmd_ablate(cfg: dict, out: Path) -> dict:
    started = time.perf_counter()
    ab = cfg["ablate"]
    if cfg["model"]["backend"] == "gaussian":
        spec = _gmrf(cfg["density"])
        mask = ex.default_mask(spec.lattice, ab["observed_fraction"])
        rows = ex.ablation_gaussian(spec, mask, ab, cfg["steps"], cfg["seed"])
        score = "energy_distance"
    else:
        model = _load_mlp(cfg, out)
        rows = ex.ablation_toy(model, _obs_model(cfg), ab, cfg["seeds"], cfg["samples_per_seed"], cfg["steps"],
                               cfg["seed"])
        score = "posterior_hit"
    table = [(r["readout"], r["freeze"], r["J_max"], r["realized_inner_iters"], r["mean_nfe"], r[score]) for r in rows]
    artifacts = [write_csv(out / "ablation.csv", ABLATE_HEADER, table)]
    return write_record(out, cfg, {"score": score, "cells": rows}, artifacts, started)


TASK_FUNCS = {
    "train": cmd_train,
    "toy-fig": cmd_toy_fig,
    "sweep": cmd_sweep,
    "gibbs-oracle": cmd_gibbs_oracle,
    "locality": cmd_locality,
    "ablate": cmd_ablate,
}
