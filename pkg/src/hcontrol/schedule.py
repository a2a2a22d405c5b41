"""Noise schedules, lattice geometry, site masks and patch partitions.

States are stored flat. A lattice of shape ``(C, L, H, W)`` maps to a
vector of length ``D = C*L*H*W`` in row-major order, so the flat index of
channel ``c`` at site ``(l, h, w)`` is ``c*L*H*W + (l*H + h)*W + w``.
Batched states are ``(B, D)`` arrays. The 2D toy problem is the lattice
``(1, 1, 1, 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Lattice",
    "NoiseSchedule",
    "PatchPartition",
    "SiteMask",
    "build_schedule",
    "mask_compose",
    "partition_complement",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Sampling-order noise levels ``1 = sigma_0 > ... > sigma_K = 0``."""

    sigmas: tuple[float, ...]

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=float)
        if s.size < 2:
            raise ValueError("schedule needs at least two levels")
        if s[0] != 1.0 or s[-1] != 0.0:
            raise ValueError("schedule must start at 1.0 and end at 0.0")
        if np.any(np.diff(s) >= 0):
            raise ValueError("schedule must be strictly decreasing")

    @property
    def steps(self) -> int:
        return len(self.sigmas) - 1

    def __len__(self):
        return len(self.sigmas)

    def __getitem__(self, k):
        return self.sigmas[k]

    def slope(self, k: int) -> float:
        """Discrete slope (sigma_{k+1} - sigma_k) * K of step ``k``."""
        return (self.sigmas[k + 1] - self.sigmas[k]) * self.steps


def build_schedule(K: int, kind: str = "linear") -> NoiseSchedule:
    """Linear sampling schedule ``sigma_k = 1 - k/K``."""
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    K = int(K)
    sigmas = [1.0 - k / K for k in range(K + 1)]
    sigmas[0], sigmas[-1] = 1.0, 0.0
    return NoiseSchedule(tuple(sigmas))


@dataclass(frozen=True)
class Lattice:
    """Shape ``(C, L, H, W)`` of a lattice state."""

    C: int = 1
    L: int = 1
    H: int = 1
    W: int = 1

    def __post_init__(self):
        if min(self.shape) < 1:
            raise ValueError(f"lattice extents must be positive, got {self.shape}")

    @classmethod
    def flat(cls, D: int) -> "Lattice":
        """Single-channel lattice holding a flat vector of length ``D``."""
        return cls(1, 1, 1, D)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.C, self.L, self.H, self.W)

    @property
    def sites(self) -> tuple[int, int, int]:
        return (self.L, self.H, self.W)

    @property
    def n_sites(self) -> int:
        return self.L * self.H * self.W

    @property
    def dim(self) -> int:
        return self.C * self.n_sites

    def state_indices(self, site_idx) -> np.ndarray:
        """Flat state indices of all channels at the given flat site indices."""
        site_idx = np.asarray(site_idx, dtype=np.intp)
        offsets = np.arange(self.C, dtype=np.intp)[:, None] * self.n_sites
        return (offsets + site_idx[None, :]).ravel()

    def reshape(self, z: np.ndarray) -> np.ndarray:
        """View a ``(..., D)`` array as ``(..., C, L, H, W)``."""
        z = np.asarray(z)
        return z.reshape(z.shape[:-1] + self.shape)


@dataclass(frozen=True)
class SiteMask:
    """Binary observation mask over lattice sites, broadcast over channels."""

    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 3:
            raise ValueError("mask bits must have shape (L, H, W)")
        if not np.all((bits == 0) | (bits == 1)):
            raise ValueError("mask bits must be 0 or 1")
        bits = bits.astype(bool)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_flat(cls, bits, lattice: Lattice) -> "SiteMask":
        return cls(np.asarray(bits).reshape(lattice.sites))

    @classmethod
    def full(cls, lattice: Lattice, value: int) -> "SiteMask":
        return cls(np.full(lattice.sites, value, dtype=np.int8))

    @property
    def shape(self):
        return self.bits.shape

    def complement(self) -> "SiteMask":
        return SiteMask(~self.bits)

    def state_mask(self, C: int = 1) -> np.ndarray:
        """Boolean vector of length ``C*L*H*W``, True at observed entries."""
        return np.tile(self.bits.ravel(), C)

    def __eq__(self, other):
        return isinstance(other, SiteMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())


@dataclass(frozen=True)
class PatchPartition:
    """Disjoint site patches covering the unobserved support."""

    patch_sizes: tuple[int, int, int]
    patches: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def count(self) -> int:
        return len(self.patches)

    def state_patches(self, lattice: Lattice) -> list[np.ndarray]:
        """Patches expressed as flat state indices (all channels)."""
        return [lattice.state_indices(p) for p in self.patches]


def partition_complement(mask: SiteMask, patch_sizes) -> PatchPartition:
    """Tile the lattice with origin-anchored boxes and keep unobserved sites.

    Boxes that contain no unobserved site are dropped, so ``count`` is the
    number of nonempty patches.
    """
    sizes = tuple(int(p) for p in patch_sizes)
    if len(sizes) != 3 or min(sizes) < 1:
        raise ValueError(f"patch sizes must be three positive integers, got {patch_sizes!r}")
    L, H, W = mask.shape
    free = ~mask.bits
    site_id = np.arange(L * H * W).reshape(L, H, W)
    pl, ph, pw = sizes
    patches = []
    for l0 in range(0, L, pl):
        for h0 in range(0, H, ph):
            for w0 in range(0, W, pw):
                box = (slice(l0, l0 + pl), slice(h0, h0 + ph), slice(w0, w0 + pw))
                idx = site_id[box][free[box]]
                if idx.size:
                    idx = np.sort(idx)
                    idx.setflags(write=False)
                    patches.append(idx)
    return PatchPartition(sizes, tuple(patches))


def mask_compose(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``mask*a + (1-mask)*b`` with a boolean state mask broadcast over rows."""
    a = np.asarray(a)
    b = np.asarray(b)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask.shape[-1] != a.shape[-1]:
        raise ValueError(f"mask length {mask.shape[-1]} does not match state dim {a.shape[-1]}")
    return np.where(mask, a, b)
