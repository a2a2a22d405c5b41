"""Online moments and the per-patch Delta-Welford stability gate."""

from __future__ import annotations

import numpy as np

__all__ = ["DeltaGate", "PatchWelford", "Welford"]


class Welford:
    """Elementwise running mean and sum of squared deviations.

    Every field has the array shape given at construction, so one object
    tracks many independent streams at once.
    """

    def __init__(self, shape=()):
        self.n = np.zeros(shape)
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def push(self, x, where=None) -> None:
        """Feed one value per stream (Welford's recurrence)."""
        x = np.asarray(x, dtype=float)
        if where is None:
            where = np.ones(self.n.shape, dtype=bool)
        n = self.n + where
        delta = np.where(where, x - self.mean, 0.0)
        self.mean = self.mean + np.divide(delta, n, out=np.zeros_like(delta), where=n > 0)
        self.m2 = self.m2 + delta * np.where(where, x - self.mean, 0.0)
        self.n = n

    def push_batch(self, values, where=None) -> None:
        """Feed a block of values per stream along the last axis (Chan merge)."""
        values = np.asarray(values, dtype=float)
        k = values.shape[-1]
        if k == 0:
            return
        if where is None:
            where = np.ones(self.n.shape, dtype=bool)
        bmean = values.mean(axis=-1)
        bm2 = ((values - bmean[..., None]) ** 2).sum(axis=-1)
        nb = np.where(where, float(k), 0.0)
        n = self.n + nb
        delta = bmean - self.mean
        frac = np.divide(nb, n, out=np.zeros_like(n), where=n > 0)
        self.mean = np.where(where, self.mean + delta * frac, self.mean)
        self.m2 = np.where(where, self.m2 + bm2 + delta * delta * self.n * frac, self.m2)
        self.n = n

    @property
    def variance(self) -> np.ndarray:
        """Population variance ``M2 / n`` (zero for empty streams)."""
        return np.divide(self.m2, self.n, out=np.zeros_like(self.m2), where=self.n > 0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.variance, 0.0))


class DeltaGate:
    """Two-consecutive-readings stability test on ``|Delta_W|``.

    A stream is stable when both the current and the previous reading sit
    strictly below ``kappa`` times the running peak of ``|Delta_W|``. With
    fewer than two readings the peak is treated as +inf and nothing is
    stable.
    """

    def __init__(self, kappa: float, shape=()):
        if not 0.0 < kappa <= 1.0:
            raise ValueError("kappa must lie in (0, 1]")
        self.kappa = kappa
        self.readings = np.zeros(shape, dtype=np.int64)
        self.current = np.full(shape, np.nan)
        self.previous = np.full(shape, np.nan)
        self.peak = np.zeros(shape)
        self.stable = np.zeros(shape, dtype=bool)

    def observe(self, delta, where=None) -> np.ndarray:
        delta = np.abs(np.asarray(delta, dtype=float))
        if where is None:
            where = np.ones(self.readings.shape, dtype=bool)
        self.previous = np.where(where, self.current, self.previous)
        self.current = np.where(where, delta, self.current)
        self.readings = self.readings + where
        self.peak = np.where(where, np.maximum(self.peak, delta), self.peak)
        thr = self.kappa * self.peak
        with np.errstate(invalid="ignore"):
            stable = (self.readings >= 2) & (self.current < thr) & (self.previous < thr)
        self.stable = np.where(where, stable, self.stable)
        return self.stable


class PatchWelford:
    """Pooled Welford stream per (chain, patch) with Delta-Welford gating.

    Each inner iteration feeds the ``|P_g|`` values of patch ``g``; the
    running population std ``sigma_W`` is read after every iteration and
    its first difference drives a :class:`DeltaGate`.
    """

    def __init__(self, n_chains: int, n_patches: int, kappa: float = 0.1):
        shape = (n_chains, n_patches)
        self.moments = Welford(shape)
        self.gate = DeltaGate(kappa, shape)
        self.sigma = np.full(shape, np.nan)
        self.sigma_prev = np.full(shape, np.nan)
        self.delta = np.full(shape, np.nan)

    @property
    def delta_max(self) -> np.ndarray:
        return self.gate.peak

    @property
    def stable(self) -> np.ndarray:
        return self.gate.stable

    def update(self, patch_values, rows=None) -> np.ndarray:
        """Feed one iteration; ``patch_values[g]`` has shape ``(len(rows), |P_g|)``."""
        B, G = self.sigma.shape
        rows = np.arange(B) if rows is None else np.asarray(rows)
        active = np.zeros(B, dtype=bool)
        active[rows] = True
        for g, vals in enumerate(patch_values):
            block = np.zeros((B, vals.shape[-1]))
            block[rows] = vals
            w = Welford(())
            w.n, w.mean, w.m2 = self.moments.n[:, g], self.moments.mean[:, g], self.moments.m2[:, g]
            w.push_batch(block, where=active)
            self.moments.n[:, g], self.moments.mean[:, g], self.moments.m2[:, g] = w.n, w.mean, w.m2
        where = np.broadcast_to(active[:, None], (B, G))
        sigma = self.moments.std
        self.sigma_prev = np.where(where, self.sigma, self.sigma_prev)
        self.sigma = np.where(where, sigma, self.sigma)
        have_prev = where & np.isfinite(self.sigma_prev)
        self.delta = np.where(have_prev, self.sigma - self.sigma_prev, self.delta)
        self.gate.observe(np.where(have_prev, self.delta, 0.0), where=have_prev)
        return self.gate.stable
