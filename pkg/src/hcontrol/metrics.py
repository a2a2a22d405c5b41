"""Evaluation metrics for the toy and Gaussian experiments."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from hcontrol.densities import (
    CHECKERBOARD_CENTERS,
    ObsModel,
    checkerboard_conditional_modes,
    checkerboard_membership,
)
from hcontrol.guidance import HControlConfig, Observation, inner_gibbs

__all__ = [
    "BAND_EDGES",
    "ChainDiagnostics",
    "HitReport",
    "bin_delta_traces",
    "energy_distance",
    "manifold_hit",
    "polyak_variance_ratio",
    "posterior_hit",
]

BAND_EDGES = (0.0, 0.33, 0.66, 1.0)


def _points(points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("rate of an empty sample set is undefined")
    return pts


def manifold_hit(points) -> float:
    """Fraction of points inside a filled checkerboard square."""
    pts = _points(points)
    return float(np.mean(checkerboard_membership(pts) >= 0))


@dataclass
class HitReport:
    n_samples: int
    manifold_hits: int
    posterior_hits: int
    mode_counts: list[int]
    mode_centers: list[list[float]] = field(default_factory=list)

    @property
    def manifold_rate(self) -> float:
        return self.manifold_hits / self.n_samples

    @property
    def posterior_rate(self) -> float:
        return self.posterior_hits / self.n_samples

    @property
    def mode_balance(self) -> float:
        """Share of posterior hits landing in the first mode square (NaN without hits)."""
        if not self.posterior_hits:
            return float("nan")
        return self.mode_counts[0] / self.posterior_hits

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            manifold_rate=self.manifold_rate,
            posterior_rate=self.posterior_rate,
            mode_balance=self.mode_balance,
        )
        return d


def posterior_hit(points, obs: ObsModel) -> HitReport:
    """Count samples inside a conditional mode square and within 0.5 of the anchor."""
    pts = _points(points)
    member = checkerboard_membership(pts)
    modes = checkerboard_conditional_modes(obs)
    near = np.abs(pts[:, obs.coord] - obs.y_obs) < 0.5
    counts = [int(np.sum((member == m) & near)) for m in modes]
    return HitReport(
        n_samples=len(pts),
        manifold_hits=int(np.sum(member >= 0)),
        posterior_hits=int(sum(counts)),
        mode_counts=counts,
        mode_centers=[CHECKERBOARD_CENTERS[m].tolist() for m in modes],
    )


def energy_distance(X, Y) -> float:
    """Two-sample energy distance.

    Within-sample means run over all ``n**2`` ordered pairs, diagonal
    included (V-statistic), so the value is nonnegative and zero for
    identical samples.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    n, m = len(X), len(Y)
    if n < 2 or m < 2:
        raise ValueError("energy distance needs at least two points per sample")
    xy = cdist(X, Y).mean()
    xx = cdist(X, X).mean()
    yy = cdist(Y, Y).mean()
    return float(2.0 * xy - xx - yy)


def energy_distance_from_matrix(dist: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Energy distance between index sets ``a`` and ``b`` of a pooled distance matrix."""
    xy = dist[np.ix_(a, b)].mean()
    xx = dist[np.ix_(a, a)].mean()
    yy = dist[np.ix_(b, b)].mean()
    return float(2.0 * xy - xx - yy)


def polyak_variance_ratio(model, obs: Observation, sigma: float, J: int, repeats: int,
                          rng: np.random.Generator, inner_recon: str = "mean", pin=None,
                          start=None) -> float:
    """Across-chain variance of the Polyak readout over that of the last iterate.

    ``repeats`` independent inner chains share one pin and one starting
    clean prediction; freezing is off. The ratio is averaged over the
    unobserved coordinates.
    """
    if J < 1 or repeats < 50:
        raise ValueError("need J >= 1 and at least 50 repeats")
    D = obs.dim
    if pin is None:
        pin = (1.0 - sigma) * obs.values + sigma * rng.standard_normal(D)
    start = np.zeros(D) if start is None else np.asarray(start, dtype=float)
    zhat = np.broadcast_to(start, (repeats, D)).copy()
    cfg = HControlConfig(J_max=J, freeze=False, inner_recon=inner_recon, readout="polyak")
    res = inner_gibbs(model, zhat, obs, sigma, cfg, [], rng, pin=pin)
    free = ~obs.mask
    v_avg = res.readout[:, free].var(axis=0, ddof=1)
    v_last = res.last[:, free].var(axis=0, ddof=1)
    return float(np.mean(v_avg / v_last))


@dataclass
class ChainDiagnostics:
    band_edges: tuple[float, ...]
    band_traces: dict[str, list[float]]
    inner_iters: list[float]
    stable_fractions: list[float]


def _band_label(lo, hi):
    return f"[{lo:.2f},{hi:.2f})"


def bin_delta_traces(sigmas, traces, edges=BAND_EDGES) -> dict[str, np.ndarray]:
    """Mean ``|Delta_W|`` per inner iteration, pooled over outer steps in each noise band."""
    out = {}
    sigmas = np.asarray(sigmas, dtype=float)
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        last = i == len(edges) - 2
        sel = (sigmas >= lo) & ((sigmas <= hi) if last else (sigmas < hi))
        if not sel.any():
            continue
        block = np.array([traces[k] for k in np.flatnonzero(sel)], dtype=float)
        with np.errstate(all="ignore"):
            good = np.isfinite(block)
            tot = np.where(good, block, 0.0).sum(axis=0)
            cnt = good.sum(axis=0)
            out[_band_label(lo, hi)] = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)
    return out
