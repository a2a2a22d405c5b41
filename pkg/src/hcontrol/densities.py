"""Toy target densities with exact samplers and conditional oracles.

Two testbeds live here: the 2D eight-square checkerboard and a Gaussian
Markov random field (GMRF) on a small 3D lattice with a banded precision
matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from hcontrol.schedule import Lattice, SiteMask

__all__ = [
    "CHECKERBOARD_CENTERS",
    "GmrfSpec",
    "ObsModel",
    "checkerboard_conditional_modes",
    "checkerboard_logdensity",
    "checkerboard_posterior_sample",
    "checkerboard_sample",
    "gmrf_build",
    "gmrf_conditional_oracle",
    "gmrf_sample",
]

CHECKERBOARD_CENTERS = np.array(
    [
        (i + 0.5, j + 0.5)
        for i in range(-2, 2)
        for j in range(-2, 2)
        if (i + j) % 2 == 0
    ]
)
LOG_CELL_DENSITY = math.log(1.0 / 8.0)

# (i + 2, j + 2) -> center index of the filled cell with lower corner (i, j)
_CELL_LOOKUP = np.full((4, 4), -1, dtype=np.int64)
for _n, (_cx, _cy) in enumerate(CHECKERBOARD_CENTERS):
    _CELL_LOOKUP[int(_cx - 0.5) + 2, int(_cy - 0.5) + 2] = _n


@dataclass(frozen=True)
class ObsModel:
    """Noisy observation ``y ~ N(x[coord], sigma_y**2)`` of one coordinate."""

    y_obs: float = 0.5
    sigma_y: float = 0.2
    coord: int = 0

    def __post_init__(self):
        if not self.sigma_y > 0:
            raise ValueError("sigma_y must be positive")


def _square_index(points):
    """Integer cell coordinates, closed below and open above."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return np.floor(points).astype(np.int64)


def checkerboard_membership(points) -> np.ndarray:
    """Index into ``CHECKERBOARD_CENTERS`` of the filled square holding each point, or -1."""
    cells = _square_index(points)
    i, j = cells[:, 0], cells[:, 1]
    inside = (i >= -2) & (i <= 1) & (j >= -2) & (j <= 1) & ((i + j) % 2 == 0)
    return np.where(inside, _CELL_LOOKUP[np.clip(i + 2, 0, 3), np.clip(j + 2, 0, 3)], -1)


def checkerboard_logdensity(p) -> np.ndarray | float:
    """``log(1/8)`` inside a filled unit square, ``-inf`` elsewhere."""
    scalar = np.ndim(p) == 1
    inside = checkerboard_membership(p) >= 0
    out = np.where(inside, LOG_CELL_DENSITY, -np.inf)
    return float(out[0]) if scalar else out


def checkerboard_sample(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` points: uniform square choice, then uniform inside it."""
    if n < 1:
        raise ValueError("n must be >= 1")
    which = rng.integers(0, len(CHECKERBOARD_CENTERS), size=n)
    return CHECKERBOARD_CENTERS[which] - 0.5 + rng.random((n, 2))


def checkerboard_conditional_modes(obs: ObsModel) -> list[int]:
    """Filled squares whose extent along the observed coordinate contains ``y_obs``."""
    lo = CHECKERBOARD_CENTERS[:, obs.coord] - 0.5
    hit = (lo <= obs.y_obs) & (obs.y_obs < lo + 1.0)
    return [int(k) for k in np.flatnonzero(hit)]


def checkerboard_posterior_sample(
    n: int, obs: ObsModel, rng: np.random.Generator, batch: int = 65536
) -> np.ndarray:
    """Exact draws from ``p(x | y_obs)`` by rejection against the prior.

    The Gaussian likelihood is bounded by one, so accepting a prior draw
    with probability ``exp(-(y - x[coord])**2 / (2 sigma_y**2))`` is exact.
    """
    out = []
    have = 0
    while have < n:
        x = checkerboard_sample(batch, rng)
        r = (x[:, obs.coord] - obs.y_obs) / obs.sigma_y
        keep = rng.random(batch) < np.exp(-0.5 * r * r)
        out.append(x[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:n]


@dataclass(frozen=True)
class GmrfSpec:
    """Zero-mean GMRF ``N(0, Q^{-1})`` on a single-channel 3D lattice."""

    shape: tuple[int, int, int]
    beta1: float
    beta2: float
    tau_d: float
    Q: np.ndarray = field(repr=False, compare=False)
    cov: np.ndarray = field(repr=False, compare=False)
    band: int = 1

    @property
    def lattice(self) -> Lattice:
        return Lattice(1, *self.shape)

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def to_json(self) -> str:
        return json.dumps(
            {"shape": list(self.shape), "beta1": self.beta1, "beta2": self.beta2, "tau_d": self.tau_d}
        )

    @classmethod
    def from_json(cls, text: str) -> "GmrfSpec":
        doc = json.loads(text)
        return gmrf_build(tuple(doc["shape"]), doc["beta1"], doc["beta2"], doc["tau_d"])


def _axis_adjacency(shape, dist):
    L, H, W = shape
    D = L * H * W
    idx = np.arange(D).reshape(shape)
    A = np.zeros((D, D))
    for axis in range(3):
        if shape[axis] <= dist:
            continue
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, shape[axis] - dist)
        hi[axis] = slice(dist, None)
        a, b = idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()
        A[a, b] = 1.0
        A[b, a] = 1.0
    return A


def gmrf_build(shape, beta1: float, beta2: float = 0.0, tau_d: float = 1.0) -> GmrfSpec:
    """``Q = tau_d I - beta1 A1 - beta2 A2`` with axis-neighbour adjacencies.

    ``A1`` links sites one step apart along an axis, ``A2`` two steps apart.
    Requires strict diagonal dominance of Q on the given lattice, i.e.
    ``tau_d`` above the largest off-diagonal row sum (at most
    ``6 beta1 + 6 beta2`` in the interior).
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"shape must be three positive extents, got {shape!r}")
    if not tau_d > 0:
        raise ValueError("tau_d must be positive")
    D = int(np.prod(shape))
    off = beta1 * _axis_adjacency(shape, 1) + beta2 * _axis_adjacency(shape, 2)
    if not tau_d > np.abs(off).sum(axis=1).max():
        raise ValueError("tau_d must exceed the off-diagonal row sums of Q (diagonal dominance)")
    Q = tau_d * np.eye(D) - off
    try:
        cho = linalg.cho_factor(Q, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("precision matrix is not positive definite") from exc
    cov = linalg.cho_solve(cho, np.eye(D))
    cov = 0.5 * (cov + cov.T)
    band = 2 if beta2 != 0 else (1 if beta1 != 0 else 0)
    Q.setflags(write=False)
    cov.setflags(write=False)
    return GmrfSpec(shape, float(beta1), float(beta2), float(tau_d), Q, cov, band)


def gmrf_sample(spec: GmrfSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` exact draws from ``N(0, Sigma)`` as an ``(n, D)`` array."""
    chol = np.linalg.cholesky(spec.cov)
    return rng.standard_normal((n, spec.dim)) @ chol.T


def gmrf_conditional_oracle(
    spec: GmrfSpec, mask: SiteMask, pin, sigma: float
) -> tuple[np.ndarray, np.ndarray]:
    """Exact law of ``z0`` on the unobserved sites given a noised pin.

    The pin is ``zbar = (1 - sigma) z0[M] + sigma xi``. Returns the mean and
    covariance of ``z0[~M] | zbar`` by Schur complement.
    """
    if not 0.0 < sigma < 1.0:
        raise ValueError("sigma must lie in (0, 1)")
    obs = mask.state_mask(1)
    o, c = np.flatnonzero(obs), np.flatnonzero(~obs)
    pin = np.asarray(pin, dtype=float).reshape(-1)
    if pin.size != o.size:
        raise ValueError(f"pin needs {o.size} values, got {pin.size}")
    S = spec.cov
    if o.size == 0:
        return np.zeros(c.size), S[np.ix_(c, c)].copy()
    if c.size == 0:
        return np.zeros(0), np.zeros((0, 0))
    s_bar = (1.0 - sigma) ** 2 * S[np.ix_(o, o)] + sigma**2 * np.eye(o.size)
    cross = (1.0 - sigma) * S[np.ix_(c, o)]
    cho = linalg.cho_factor(s_bar, lower=True)
    mean = cross @ linalg.cho_solve(cho, pin)
    cov = S[np.ix_(c, c)] - cross @ linalg.cho_solve(cho, cross.T)
    return mean, 0.5 * (cov + cov.T)
