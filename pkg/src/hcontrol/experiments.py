"""Experiment drivers shared by the CLI and the acceptance suite.

Nothing here touches the filesystem; the harness turns the returned
records into CSV tables, figures and ``results.json``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from hcontrol.densities import (
    GmrfSpec,
    ObsModel,
    checkerboard_posterior_sample,
    gmrf_conditional_oracle,
    gmrf_sample,
)
from hcontrol.flowmodel import GaussianVelocity
from hcontrol.guidance import (
    GuidanceSpec,
    HControlConfig,
    Observation,
    inner_gibbs,
    sample,
)
from hcontrol.locality import AXES, axis_diagnostic, eta_curve, eta_decay
from hcontrol.metrics import (
    energy_distance,
    energy_distance_from_matrix,
    manifold_hit,
    polyak_variance_ratio,
    posterior_hit,
)
from hcontrol.rng import Streams
from hcontrol.schedule import Lattice, SiteMask, build_schedule, partition_complement

TOY_LATTICE = Lattice.flat(2)


def toy_observation(obs: ObsModel) -> Observation:
    """Mask ``[1, 0]``: the first coordinate is observed with ``tau = sigma_y``."""
    mask = np.zeros(2, dtype=bool)
    mask[obs.coord] = True
    values = np.zeros(2)
    values[obs.coord] = obs.y_obs
    return Observation(mask, values, obs.sigma_y)


def unconditional_hit_rate(model, n: int, steps: int = 50, seed: int = 0) -> float:
    res = sample(model, build_schedule(steps), None, GuidanceSpec("none"), n, Streams(seed, 0), record=False)
    return manifold_hit(res.z)


@dataclass
class MethodRun:
    name: str
    spec: dict
    points: list[np.ndarray] = field(repr=False)
    reports: list = field(repr=False)
    nfe: list[float]
    diagnostics: list = field(default_factory=list, repr=False)
    traces: list = field(default_factory=list, repr=False)

    @property
    def posterior_rates(self) -> np.ndarray:
        return np.array([r.posterior_rate for r in self.reports])

    @property
    def manifold_rates(self) -> np.ndarray:
        return np.array([r.manifold_rate for r in self.reports])

    def pooled(self):
        """Pooled posterior-hit rate and its binomial standard error."""
        hits = sum(r.posterior_hits for r in self.reports)
        n = sum(r.n_samples for r in self.reports)
        p = hits / n
        return p, float(np.sqrt(p * (1 - p) / n))


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def run_toy_method(model, name: str, spec: GuidanceSpec | dict, obs: ObsModel, seeds: int,
                   per_seed: int, steps: int = 50, master_seed: int = 0, threads: int = 1) -> MethodRun:
    """Sample ``per_seed`` trajectories for each seed index; results sorted by seed."""
    if isinstance(spec, dict):
        spec = GuidanceSpec.from_dict(spec)
    schedule = build_schedule(steps)
    observation = toy_observation(obs)

    def one(i):
        streams = Streams(master_seed, i)
        if name == "oracle":
            pts = checkerboard_posterior_sample(per_seed, obs, streams("oracle"))
            return pts, posterior_hit(pts, obs), 0.0, [], []
        res = sample(model, schedule, observation, spec, per_seed, streams)
        return res.z, posterior_hit(res.z, obs), res.counter.mean_nfe, res.diagnostics, res.delta_traces

    out = _map(one, range(seeds), threads)
    return MethodRun(
        name,
        spec.to_dict() if name != "oracle" else {"variant": "oracle"},
        [o[0] for o in out],
        [o[1] for o in out],
        [o[2] for o in out],
        [o[3] for o in out],
        [o[4] for o in out],
    )


def sweep_specs(J_values, n_recur_values, n_iter=1, mu=0.5, rho=0.5) -> dict[str, GuidanceSpec]:
    specs = {}
    for J in J_values:
        specs[f"h_control_J{J}"] = GuidanceSpec(
            "h_control",
            hcontrol=HControlConfig(J_max=J, outer_mode="soft", patch_sizes=(1, 1, 1), freeze=False),
        )
    for r in n_recur_values:
        specs[f"tfg_ugd_R{r}"] = GuidanceSpec(
            "tfg_ugd", tfg={"n_recur": r, "n_iter": n_iter, "mu": mu, "rho": rho}
        )
    return specs


def count_inversions(means, stds):
    """Decreases along a curve, and how many of them exceed one std of either cell."""
    means = np.asarray(means)
    stds = np.asarray(stds)
    drops = np.flatnonzero(np.diff(means) < 0)
    big = [i for i in drops if means[i] - means[i + 1] > max(stds[i], stds[i + 1])]
    return len(drops), len(big)


def default_mask(lattice: Lattice, fraction: float, seed: int = 0) -> SiteMask:
    """Observe the first ``fraction`` of W-columns (a contiguous observed slab)."""
    bits = np.zeros(lattice.sites, dtype=np.int8)
    ncols = int(round(fraction * lattice.W))
    bits[:, :, :ncols] = 1
    return SiteMask(bits)


def hard_conditional(spec: GmrfSpec, mask: SiteMask, values):
    """Law of ``z0[~M]`` given exact ``z0[M] = values`` (the ``sigma -> 0`` limit)."""
    o = np.flatnonzero(mask.state_mask(1))
    c = np.flatnonzero(~mask.state_mask(1))
    S = spec.cov
    if o.size == 0:
        return np.zeros(c.size), S[np.ix_(c, c)].copy()
    cho = linalg.cho_factor(S[np.ix_(o, o)], lower=True)
    cross = S[np.ix_(c, o)]
    mean = cross @ linalg.cho_solve(cho, np.asarray(values)[o])
    cov = S[np.ix_(c, c)] - cross @ linalg.cho_solve(cho, cross.T)
    return mean, 0.5 * (cov + cov.T)


def gaussian_draws(mean, cov, n, rng):
    w, V = np.linalg.eigh(cov)
    L = V * np.sqrt(np.clip(w, 0.0, None))
    return mean + rng.standard_normal((n, len(mean))) @ L.T


def energy_permutation_test(X, Y, Y_null, permutations: int, rng):
    """Energy distance of ``X`` to ``Y`` against the oracle-vs-oracle permutation null.

    The null pools the two oracle sets ``Y`` and ``Y_null`` and re-splits
    them at random ``permutations`` times.
    """
    stat = energy_distance(X, Y)
    pooled = np.concatenate([Y, Y_null])
    dist = cdist(pooled, pooled)
    n = len(Y)
    null = np.empty(permutations)
    for p in range(permutations):
        idx = rng.permutation(len(pooled))
        null[p] = energy_distance_from_matrix(dist, idx[:n], idx[n:])
    return stat, float(np.quantile(null, 0.95)), null


def gibbs_oracle_check(spec: GmrfSpec, mask: SiteMask, sigma: float, chains: int, burn_in: int,
                       ed_samples: int, permutations: int, seed: int = 0,
                       inner_recon: str = "posterior_sample") -> dict:
    """Compare the inner chain's late-iterate law with the exact conditional.

    ``chains`` independent chains share one pin and run ``burn_in``
    iterations; their final clean predictions are independent draws of the
    chain's law at that iteration.
    """
    streams = Streams(seed, 0)
    model = GaussianVelocity.from_spec(spec)
    lattice = spec.lattice
    obs_mask = mask.state_mask(lattice.C)
    truth = gmrf_sample(spec, 1, streams("obs"))[0]
    obs = Observation(obs_mask, truth, None)
    pin_full = (1.0 - sigma) * obs.values + sigma * streams("pin").standard_normal(spec.dim)
    mean, cov = gmrf_conditional_oracle(spec, mask, pin_full[obs_mask], sigma)
    cfg = HControlConfig(J_max=burn_in, freeze=False, inner_recon=inner_recon, readout="last")
    start = np.zeros((chains, spec.dim))
    res = inner_gibbs(model, start, obs, sigma, cfg, [], streams("inner"), pin=pin_full,
                      recon_rng=streams("recon"))
    X = res.last[:, ~obs_mask]
    n = len(X)
    zscores = (X.mean(axis=0) - mean) / np.sqrt(np.diag(cov) / n)
    emp_cov = np.cov(X.T, ddof=1).reshape(len(mean), len(mean))
    frob = float(np.linalg.norm(emp_cov - cov) / np.linalg.norm(cov))
    orng = streams("oracle")
    Y = gaussian_draws(mean, cov, ed_samples, orng)
    Y_null = gaussian_draws(mean, cov, ed_samples, orng)
    stat, q95, _ = energy_permutation_test(X[:ed_samples], Y, Y_null, permutations, streams("eval"))
    return {
        "inner_recon": inner_recon,
        "sigma": sigma,
        "chains": chains,
        "burn_in": burn_in,
        "observed_sites": int(obs_mask.sum()),
        "free_sites": int((~obs_mask).sum()),
        "max_abs_z": float(np.max(np.abs(zscores))),
        "zscores": zscores.tolist(),
        "cov_frobenius_rel_error": frob,
        "cov_trace_ratio": float(np.trace(emp_cov) / np.trace(cov)),
        "energy_distance": stat,
        "energy_null_q95": q95,
    }


def locality_study(spec: GmrfSpec, n_samples: int, sigmas, steps: int = 50, seed: int = 0) -> dict:
    """Axis diagnostics on exact samples and on clean predictions along trajectories."""
    streams = Streams(seed, 0)
    lattice = spec.lattice
    sources = {"clean": gmrf_sample(spec, n_samples, streams("oracle"))}
    model = GaussianVelocity.from_spec(spec)
    schedule = build_schedule(steps)
    wanted = {round(float(s), 10) for s in sigmas}
    z = streams("init").standard_normal((n_samples, spec.dim))
    for k in range(steps):
        sig = schedule[k]
        zhat = model.clean_prediction(z, sig)
        if round(sig, 10) in wanted:
            sources[f"zhat_sigma{sig:.1f}"] = zhat
        z = z + (schedule[k + 1] - sig) * (z - zhat) / sig if schedule[k + 1] > 0 else zhat
    out = {}
    for name, data in sources.items():
        maps = axis_diagnostic(data, lattice)
        out[name] = {
            ax: {
                "rho": m.rho,
                "eta": eta_curve(m),
                "eta2": eta_decay(m, 2),
                "floor": m.floor,
                "n_lines": m.n_lines,
                "max_beyond_band": _beyond_band(m.rho, spec.band),
            }
            for ax, m in maps.items()
        }
    return out


def _beyond_band(rho, band):
    n = rho.shape[0]
    d = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    sel = d > band
    return float(rho[sel].max()) if sel.any() else 0.0


def ablation_gaussian(spec: GmrfSpec, mask: SiteMask, cfg: dict, steps: int = 50, seed: int = 0) -> list[dict]:
    """Readout x freeze grid of h-control on the GMRF with a hard observation."""
    streams = Streams(seed, 0)
    model = GaussianVelocity.from_spec(spec)
    lattice = spec.lattice
    truth = gmrf_sample(spec, 1, streams("obs"))[0]
    obs = Observation(mask.state_mask(1), truth, None)
    partition = partition_complement(mask, cfg["patch_sizes"])
    patches = partition.state_patches(lattice)
    mean, cov = hard_conditional(spec, mask, obs.values)
    oracle = gaussian_draws(mean, cov, cfg["oracle_samples"], streams("oracle"))
    schedule = build_schedule(steps)
    rows = []
    for readout in ("polyak", "last"):
        for freeze in (True, False):
            hc = HControlConfig(J_max=cfg["J_max"], kappa=cfg["kappa"], nu=cfg["nu"],
                                patch_sizes=tuple(cfg["patch_sizes"]), outer_mode="hard",
                                readout=readout, freeze=freeze)
            gspec = GuidanceSpec("h_control", window=tuple(cfg["window"]), hcontrol=hc)
            res = sample(model, schedule, obs, gspec, cfg["samples"], Streams(seed, 1), patches=patches)
            windowed = [d for d in res.diagnostics if d["inner_iters_used"] > 0 or d["nfe_forward"] > 1]
            realized = float(np.mean([d["inner_iters_used"] for d in windowed])) if windowed else 0.0
            X = res.z[:, ~obs.mask]
            rows.append({
                "readout": readout,
                "freeze": freeze,
                "J_max": cfg["J_max"],
                "realized_inner_iters": realized,
                "mean_nfe": res.counter.mean_nfe,
                "energy_distance": energy_distance(X[: cfg["oracle_samples"]], oracle),
                "spec": gspec.to_dict(),
            })
    ratio = polyak_variance_ratio(model, obs, 0.5, 16, cfg["repeats"], streams("eval"))
    for r in rows:
        r["polyak_variance_ratio_J16"] = ratio
    return rows


def ablation_toy(model, obs: ObsModel, cfg: dict, seeds: int, per_seed: int, steps: int = 50,
                 master_seed: int = 0) -> list[dict]:
    rows = []
    for readout in ("polyak", "last"):
        for freeze in (True, False):
            hc = HControlConfig(J_max=cfg["J_max"], kappa=cfg["kappa"], nu=cfg["nu"], patch_sizes=(1, 1, 1),
                                outer_mode="soft", readout=readout, freeze=freeze)
            gspec = GuidanceSpec("h_control", hcontrol=hc)
            run = run_toy_method(model, "h_control", gspec, obs, seeds, per_seed, steps, master_seed)
            diags = [d for seed_d in run.diagnostics for d in seed_d]
            rows.append({
                "readout": readout,
                "freeze": freeze,
                "J_max": cfg["J_max"],
                "realized_inner_iters": float(np.mean([d["inner_iters_used"] for d in diags])),
                "mean_nfe": float(np.mean(run.nfe)),
                "posterior_hit": float(run.posterior_rates.mean()),
                "posterior_hit_std": float(run.posterior_rates.std(ddof=1)) if seeds > 1 else 0.0,
                "spec": gspec.to_dict(),
            })
    return rows


__all__ = [
    "AXES",
    "MethodRun",
    "TOY_LATTICE",
    "ablation_gaussian",
    "ablation_toy",
    "count_inversions",
    "default_mask",
    "energy_permutation_test",
    "gaussian_draws",
    "gibbs_oracle_check",
    "hard_conditional",
    "locality_study",
    "run_toy_method",
    "sweep_specs",
    "toy_observation",
    "unconditional_hit_rate",
]
