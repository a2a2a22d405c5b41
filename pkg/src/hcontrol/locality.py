"""Block-precision diagnostic of conditional dependence along lattice axes.

For one axis at a time, every (sample, off-axis position) pair gives a
line of ``|axis|`` multichannel tokens. The precision matrix of the
standardised lines, cut into ``C x C`` blocks, yields block partial
correlations whose top singular value measures how strongly two
positions depend on each other given the rest of the line.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from hcontrol.schedule import Lattice

__all__ = [
    "AXES",
    "BlockPrecision",
    "LineStack",
    "PartialCorrelationMap",
    "block_partial_correlation",
    "block_precision",
    "build_line_stack",
    "eta_curve",
    "eta_decay",
    "noise_floor",
    "partial_correlation_map",
]

log = logging.getLogger(__name__)

AXES = ("L", "H", "W")
RIDGE = 1e-6
STD_FLOOR = 1e-12
EIG_FLOOR = 1e-12


@dataclass
class LineStack:
    """Standardised line stack of shape ``(N_s, |axis|, C)``."""

    axis: str
    data: np.ndarray = field(repr=False)
    flagged: np.ndarray = field(repr=False)

    @property
    def n_lines(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def design(self) -> np.ndarray:
        return self.data.reshape(self.n_lines, -1)


def build_line_stack(samples, lattice: Lattice, axis: str) -> LineStack:
    """Permute ``axis`` forward, merge sample and off-axis indices into rows.

    Columns of the ``(N_s, |axis| C)`` design matrix are standardised to
    zero mean and unit variance over rows; a zero-variance column divides
    by 1e-12 and is flagged.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    x = lattice.reshape(np.asarray(samples, dtype=float))
    if x.ndim != 5 or x.shape[0] < 1:
        raise ValueError("samples must be an (N, D) array with N >= 1")
    a = 2 + AXES.index(axis)
    off = [i for i in (2, 3, 4) if i != a]
    x = np.transpose(x, (0, off[0], off[1], a, 1))
    n_axis, C = x.shape[3], x.shape[4]
    F = x.reshape(-1, n_axis * C)
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    flagged = std < STD_FLOOR
    if flagged.any():
        log.warning("%d zero-variance coordinates on axis %s", int(flagged.sum()), axis)
    F = (F - mean) / np.where(flagged, STD_FLOOR, std)
    return LineStack(axis, F.reshape(-1, n_axis, C), flagged.reshape(n_axis, C))


@dataclass
class BlockPrecision:
    cov: np.ndarray = field(repr=False)
    precision: np.ndarray = field(repr=False)
    length: int
    channels: int
    n_lines: int
    ridge: float = RIDGE

    def block(self, beta: int, gamma: int) -> np.ndarray:
        C = self.channels
        return self.precision[beta * C:(beta + 1) * C, gamma * C:(gamma + 1) * C]


def block_precision(stack: LineStack, ridge: float = RIDGE) -> BlockPrecision:
    """Ridge-regularised sample precision of the line design matrix."""
    F = stack.design()
    n, p = F.shape
    if n <= p:
        raise ValueError(f"need more lines ({n}) than line coordinates ({p})")
    cov = F.T @ F / (n - 1)
    cov = 0.5 * (cov + cov.T)
    cov += ridge * np.trace(cov) / p * np.eye(p)
    try:
        cho = linalg.cho_factor(cov, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("regularised line covariance is not positive definite") from exc
    prec = linalg.cho_solve(cho, np.eye(p))
    prec = 0.5 * (prec + prec.T)
    return BlockPrecision(cov, prec, stack.length, stack.channels, n, ridge)


def _inv_sqrt(block: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (block + block.T))
    if w.min() <= 0:
        raise np.linalg.LinAlgError("diagonal precision block is not positive definite")
    w = np.maximum(w, EIG_FLOOR)
    return (V / np.sqrt(w)) @ V.T


def block_partial_correlation(bp: BlockPrecision, beta: int, gamma: int) -> np.ndarray:
    """``-O_bb^{-1/2} O_bg O_gg^{-1/2}`` for positions ``beta`` and ``gamma``."""
    return -_inv_sqrt(bp.block(beta, beta)) @ bp.block(beta, gamma) @ _inv_sqrt(bp.block(gamma, gamma))


@dataclass
class PartialCorrelationMap:
    rho: np.ndarray
    n_lines: int
    channels: int

    @property
    def floor(self) -> float:
        return noise_floor(self.channels, self.n_lines)


def partial_correlation_map(bp: BlockPrecision) -> PartialCorrelationMap:
    """Top canonical partial correlation for every pair of axis positions."""
    n = bp.length
    isq = [_inv_sqrt(bp.block(b, b)) for b in range(n)]
    rho = np.eye(n)
    for b in range(n):
        for g in range(b + 1, n):
            R = -isq[b] @ bp.block(b, g) @ isq[g]
            top = np.linalg.svd(R, compute_uv=False)[0]
            rho[b, g] = rho[g, b] = min(max(top, 0.0), 1.0)
    return PartialCorrelationMap(rho, bp.n_lines, bp.channels)


def eta_decay(pcm, r: float, with_flag: bool = False):
    """Share of squared off-diagonal ``rho_1`` mass at distance greater than ``r``.

    With no off-diagonal mass the value is 0 and the flag (returned when
    ``with_flag``) is True.
    """
    if r < 0:
        raise ValueError("r must be >= 0")
    rho = pcm.rho if isinstance(pcm, PartialCorrelationMap) else np.asarray(pcm)
    n = rho.shape[0]
    dist = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    sq = rho**2
    total = sq[dist > 0].sum()
    if total == 0:
        return (0.0, True) if with_flag else 0.0
    value = 1.0 if r == 0 else float(sq[dist > r].sum() / total)
    return (value, False) if with_flag else value


def eta_curve(pcm) -> np.ndarray:
    """``eta(r)`` for ``r = 0 .. |axis| - 1``."""
    rho = pcm.rho if isinstance(pcm, PartialCorrelationMap) else np.asarray(pcm)
    return np.array([eta_decay(rho, r) for r in range(rho.shape[0])])


def noise_floor(C: int, n_lines: float) -> float:
    """Typical top canonical correlation of unrelated ``C``-vectors: ``2 sqrt(C / N_s)``."""
    if n_lines <= 0:
        raise ValueError("n_lines must be positive")
    return 2.0 * float(np.sqrt(C / n_lines))


def axis_diagnostic(samples, lattice: Lattice, axes=AXES) -> dict[str, PartialCorrelationMap]:
    """Partial-correlation maps for each requested axis with more than one position."""
    out = {}
    for ax in axes:
        if lattice.sites[AXES.index(ax)] < 2:
            continue
        out[ax] = partial_correlation_map(block_precision(build_line_stack(samples, lattice, ax)))
    return out
