"""Flow-matching samplers with training-free guidance.

Every sampler integrates the deterministic Euler scheme

    z_{k+1} = z_k + (sigma_{k+1} - sigma_k) (z_k - zhat0) / sigma_k

and differs only in how the clean prediction ``zhat0`` fed to the step is
corrected inside the guidance window ``[start, stop)``. States are
``(B, D)`` batches, one row per independent trajectory.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from hcontrol.flowmodel import UnsupportedOperation
from hcontrol.rng import Streams
from hcontrol.schedule import Lattice, NoiseSchedule, PatchPartition, SiteMask, mask_compose
from hcontrol.welford import PatchWelford

__all__ = [
    "GuidanceSpec",
    "HControlConfig",
    "InnerResult",
    "NfeCounter",
    "Observation",
    "SampleResult",
    "TfgConfig",
    "VARIANTS",
    "dps_step",
    "euler_step",
    "hcontrol_sample",
    "inner_gibbs",
    "outer_hard_replace",
    "outer_soft_pull",
    "renoise",
    "run_baseline",
    "sample",
    "tfg_ugd_step",
    "weighted_h_step",
]

VARIANTS = ("none", "hard_replace", "soft_pull", "dps", "weighted_h", "tfg_ugd", "h_control")

# d(sigma)/dt in forward time; the schedule runs t from 0 (clean) to 1 (noise)
SIGMA_DOT = 1.0


@dataclass(frozen=True)
class Observation:
    """Partial evidence: state mask, observed values and confidence ``tau``.

    ``tau=None`` stands for the hard limit ``tau -> 0``.
    """

    mask: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    tau: float | None = None

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if mask.shape != values.shape:
            raise ValueError("mask and values must have the same length")
        if not np.all(np.isfinite(values[mask])):
            raise ValueError("observed values must be finite")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive (use None for the hard limit)")
        values = np.where(mask, values, 0.0)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_sites(cls, mask: SiteMask, values, lattice: Lattice, tau=None) -> "Observation":
        return cls(mask.state_mask(lattice.C), values, tau)

    @property
    def dim(self) -> int:
        return self.mask.size


@dataclass
class HControlConfig:
    J_max: int = 10
    kappa: float = 0.1
    nu: float = 0.9
    patch_sizes: tuple[int, int, int] = (4, 4, 4)
    outer_mode: str = "hard"
    inner_recon: str = "mean"
    readout: str = "polyak"
    freeze: bool = True

    def __post_init__(self):
        self.patch_sizes = tuple(int(p) for p in self.patch_sizes)
        if self.J_max < 0:
            raise ValueError("J_max must be >= 0")
        if not (0 < self.kappa <= 1 and 0 < self.nu <= 1):
            raise ValueError("kappa and nu must lie in (0, 1]")
        if self.outer_mode not in ("hard", "soft"):
            raise ValueError(f"unknown outer_mode {self.outer_mode!r}")
        if self.inner_recon not in ("mean", "posterior_sample"):
            raise ValueError(f"unknown inner_recon {self.inner_recon!r}")
        if self.readout not in ("polyak", "last"):
            raise ValueError(f"unknown readout {self.readout!r}")


@dataclass
class TfgConfig:
    n_recur: int = 2
    n_iter: int = 1
    mu: float = 0.5
    rho: float = 0.5

    def __post_init__(self):
        if self.n_recur < 1 or self.n_iter < 0:
            raise ValueError("n_recur must be >= 1 and n_iter >= 0")

    @property
    def calls_per_step(self) -> int:
        return self.n_recur * (self.n_iter + 1) + 1


@dataclass
class GuidanceSpec:
    """Which guidance to apply, where, and with which parameters.

    ``window=None`` means every outer step. ``pull_scale`` multiplies the
    soft-pull and default DPS coefficient ``sigma * sigma_dot / tau**2``.
    """

    variant: str = "none"
    window: tuple[int, int] | None = None
    pull_scale: float = 1.0
    zeta: float | None = None
    jacobian_mode: str = "full_vjp"
    alpha: float = 1.0
    tfg: TfgConfig = field(default_factory=TfgConfig)
    hcontrol: HControlConfig = field(default_factory=HControlConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.jacobian_mode not in ("full_vjp", "stop_grad"):
            raise ValueError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        if self.window is not None:
            s, e = (int(v) for v in self.window)
            if not 0 <= s <= e:
                raise ValueError(f"invalid window {self.window!r}")
            self.window = (s, e)
        if isinstance(self.tfg, dict):
            self.tfg = TfgConfig(**self.tfg)
        if isinstance(self.hcontrol, dict):
            self.hcontrol = HControlConfig(**self.hcontrol)

    def resolved_window(self, K: int) -> tuple[int, int]:
        s, e = (0, K) if self.window is None else self.window
        if e > K:
            raise ValueError(f"window {self.window} exceeds {K} steps")
        return s, e

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["window"] = None if self.window is None else list(self.window)
        d["hcontrol"]["patch_sizes"] = list(self.hcontrol.patch_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GuidanceSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown guidance fields: {sorted(unknown)}")
        if d.get("window") is not None:
            d["window"] = tuple(d["window"])
        return cls(**d)


@dataclass
class NfeCounter:
    """Model-evaluation bookkeeping.

    ``forward``/``backward`` count batched calls (one per trajectory when
    every row is evaluated); the ``row_*`` fields count evaluated rows so
    per-trajectory means stay exact under per-chain early exit.
    """

    forward: int = 0
    backward: int = 0
    row_forward: int = 0
    row_backward: int = 0
    batch: int = 0

    @property
    def nfe(self) -> int:
        return self.forward + self.backward

    def add_forward(self, rows: int) -> None:
        self.forward += 1
        self.row_forward += int(rows)

    def add_backward(self, rows: int) -> None:
        self.backward += 1
        self.row_backward += int(rows)

    @property
    def mean_nfe(self) -> float:
        """Average model calls per trajectory."""
        if not self.batch:
            return float(self.nfe)
        return (self.row_forward + self.row_backward) / self.batch

    def as_dict(self) -> dict[str, float]:
        return {
            "forward": self.forward,
            "backward": self.backward,
            "nfe": self.nfe,
            "mean_nfe": self.mean_nfe,
        }


def _denoise(model, z, sigma, counter: NfeCounter | None):
    if counter is not None:
        counter.add_forward(len(z))
    return model.clean_prediction(z, sigma)


def euler_step(z_k, zhat_final, sigma_k: float, sigma_k1: float) -> np.ndarray:
    """One Euler step of the flow ODE driven by a clean prediction.

    A step that lands on ``sigma_k1 = 0`` returns the clean prediction
    itself, which is what the formula reduces to in exact arithmetic.
    """
    if not sigma_k > 0:
        raise ValueError("sigma_k must be positive")
    if sigma_k1 == 0.0:
        return np.array(zhat_final, dtype=float, copy=True)
    z_k = np.asarray(z_k, dtype=float)
    return z_k + (sigma_k1 - sigma_k) * (z_k - zhat_final) / sigma_k


def renoise(z, sigma_from: float, sigma_to: float, rng: np.random.Generator) -> np.ndarray:
    """Forward kernel of the straight-line interpolant from a lower to a higher level."""
    if not (0 <= sigma_from <= sigma_to <= 1 and sigma_from < 1):
        raise ValueError("renoise needs 0 <= sigma_from <= sigma_to <= 1 and sigma_from < 1")
    a = (1.0 - sigma_to) / (1.0 - sigma_from)
    std = math.sqrt(max(sigma_to**2 - (a * sigma_from) ** 2, 0.0))
    return a * np.asarray(z) + std * rng.standard_normal(np.shape(z))


def pull_coefficient(obs: Observation, sigma: float, sigma_dot: float = SIGMA_DOT, scale: float = 1.0):
    """``scale * sigma * sigma_dot / tau**2``."""
    if obs.tau is None:
        raise ValueError("soft guidance needs a finite tau")
    return scale * sigma * sigma_dot / obs.tau**2


def outer_soft_pull(u, zhat0, obs: Observation, sigma: float, sigma_dot: float = SIGMA_DOT, scale: float = 1.0):
    """Velocity with a soft pull of the clean prediction toward the observation."""
    c = pull_coefficient(obs, sigma, sigma_dot, scale)
    return u + c * np.where(obs.mask, zhat0 - obs.values, 0.0)


def outer_hard_replace(zhat0, obs: Observation) -> np.ndarray:
    return mask_compose(np.broadcast_to(obs.values, np.shape(zhat0)), zhat0, obs.mask)


def dps_step(model, z, sigma: float, obs: Observation, zeta: float, jacobian_mode: str = "full_vjp",
             counter: NfeCounter | None = None, zhat0=None):
    """Additive velocity correction ``zeta * J^T M (zhat0 - values)``.

    With ``jacobian_mode="stop_grad"`` the denoiser Jacobian ``J`` is
    replaced by the identity and no backward call is made.
    """
    if zhat0 is None:
        zhat0 = _denoise(model, z, sigma, counter)
    residual = np.where(obs.mask, zhat0 - obs.values, 0.0)
    if jacobian_mode == "stop_grad":
        grad = residual
    elif jacobian_mode == "full_vjp":
        if not getattr(model, "has_input_gradient", False):
            raise UnsupportedOperation("full_vjp DPS needs input gradients")
        if counter is not None:
            counter.add_backward(len(z))
        grad = model.input_vjp(z, sigma, residual)
    else:
        raise ValueError(f"unknown jacobian_mode {jacobian_mode!r}")
    return zeta * grad


def weighted_h_step(u, z, sigma: float, warped, alpha: float, mask=None):
    """Interpolate between ``u`` and the hard pull ``(z - warped) / sigma``.

    The weight is ``sigma**alpha``; with ``mask`` the pull acts only on
    observed entries.
    """
    lam = sigma**alpha
    pull = lam * ((z - warped) / sigma - u)
    if mask is not None:
        pull = np.where(mask, pull, 0.0)
    return u + pull


def tfg_ugd_step(model, z, sigma_k: float, sigma_k1: float, obs: Observation, cfg: TfgConfig,
                 rng: np.random.Generator, counter: NfeCounter | None = None):
    """One outer step of a recurrent mean/variance guidance scheme.

    Each of the ``n_recur`` rounds denoises once, then runs ``n_iter``
    guidance iterations: a z-space step ``-rho * sigma * J^T r`` (one
    backward call each) and an x0-space step ``-mu * r`` on the residual
    ``r = M (zhat0 - values)``. Every round except the last advances to
    ``sigma_k1`` and re-noises back to ``sigma_k``. A final forward call
    projects the guided clean prediction back through the denoiser at the
    guided state before the Euler step. Calls per step:
    ``n_recur * (n_iter + 1) + 1``.
    """
    x = np.asarray(z, dtype=float)
    for r in range(cfg.n_recur):
        zhat = _denoise(model, x, sigma_k, counter)
        zhat_raw = zhat
        x_eval = x
        for _ in range(cfg.n_iter):
            residual = np.where(obs.mask, zhat - obs.values, 0.0)
            if counter is not None:
                counter.add_backward(len(x))
            g = model.input_vjp(x_eval, sigma_k, residual)
            x = x - cfg.rho * sigma_k * g
            zhat = zhat - cfg.mu * residual
        if r < cfg.n_recur - 1:
            x = renoise(euler_step(x, zhat, sigma_k, sigma_k1), sigma_k1, sigma_k, rng)
    # re-project the guided x0 along the noise direction of the last denoise
    eps_hat = (x - (1.0 - sigma_k) * zhat_raw) / sigma_k
    zhat = _denoise(model, (1.0 - sigma_k) * zhat + sigma_k * eps_hat, sigma_k, counter)
    return euler_step(x, zhat, sigma_k, sigma_k1)


@dataclass
class InnerResult:
    readout: np.ndarray
    iterations: np.ndarray
    abs_delta: np.ndarray
    stable_fraction: np.ndarray
    last: np.ndarray = field(repr=False)


def inner_gibbs(model, zhat_obs, obs: Observation, sigma: float, cfg: HControlConfig,
                patches: list[np.ndarray], rng: np.random.Generator,
                counter: NfeCounter | None = None, pin=None,
                recon_rng: np.random.Generator | None = None, keep_iterates: bool = False,
                frozen_log: list | None = None) -> InnerResult:
    """Block-conditional pseudo-Gibbs refinement at a fixed noise level.

    ``patches`` holds flat state indices of each patch of the unobserved
    support. The pin on observed entries is drawn once from ``rng`` unless
    given. Returns the Polyak average (or last iterate) of the clean
    predictions, realised iterations per chain, and per-iteration traces
    of the mean ``|Delta_W|`` and stable-patch fraction (NaN where no
    chain was active or no reading existed).
    """
    zhat_obs = np.asarray(zhat_obs, dtype=float)
    B, D = zhat_obs.shape
    J = int(cfg.J_max)
    if not 0 < sigma <= 1:
        raise ValueError("sigma must lie in (0, 1]")
    if cfg.inner_recon == "posterior_sample" and not hasattr(model, "posterior_sample"):
        raise UnsupportedOperation("posterior_sample reconstruction needs an exact Gaussian backend")
    recon_rng = rng if recon_rng is None else recon_rng
    mask = obs.mask
    if pin is None:
        xi_obs = rng.standard_normal((B, D))
        pin = (1.0 - sigma) * obs.values + sigma * xi_obs
    pin = np.broadcast_to(np.asarray(pin, dtype=float), (B, D))
    iters = np.zeros(B, dtype=np.int64)
    abs_delta = np.full(J, np.nan)
    stable_frac = np.full(J, np.nan)
    if J == 0:
        out = zhat_obs.copy()
        return InnerResult(out, iters, abs_delta, stable_frac, out)

    G = len(patches)
    welford = PatchWelford(B, G, cfg.kappa)
    prev = zhat_obs.copy()
    polyak = np.zeros_like(prev)
    active = np.ones(B, dtype=bool)
    free = ~mask
    iterates = [] if keep_iterates else None
    for j in range(1, J + 1):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        xi = rng.standard_normal((B, D))[rows]
        zp = (1.0 - sigma) * prev[rows] + sigma * xi
        zj = np.where(free, zp, pin[rows])
        if counter is not None:
            counter.add_forward(rows.size)
        if cfg.inner_recon == "mean":
            new = model.clean_prediction(zj, sigma)
        else:
            new = model.posterior_sample(zj, sigma, recon_rng)
        if G:
            welford.update([new[:, p] for p in patches], rows)
            fin = np.isfinite(welford.delta[rows])
            if fin.any():
                abs_delta[j - 1] = float(np.mean(np.abs(welford.delta[rows][fin])))
        if cfg.freeze and G:
            stable = welford.stable[rows]
            for g, p in enumerate(patches):
                hold = stable[:, g]
                if hold.any():
                    new[np.ix_(hold, p)] = prev[np.ix_(rows[hold], p)]
            frac = stable.mean(axis=1)
            stable_frac[j - 1] = float(frac.mean())
            if frozen_log is not None:
                frozen_log.append((j, rows.copy(), stable.copy()))
        else:
            frac = np.zeros(rows.size)
            if G:
                stable_frac[j - 1] = 0.0
        polyak[rows] += (new - polyak[rows]) / j
        prev[rows] = new
        iters[rows] = j
        if iterates is not None:
            iterates.append((rows.copy(), new.copy()))
        if cfg.freeze and G:
            done = frac > cfg.nu
            active[rows[done]] = False
    readout = polyak if cfg.readout == "polyak" else prev
    res = InnerResult(readout, iters, abs_delta, stable_frac, prev)
    if iterates is not None:
        res.iterates = iterates
    return res


@dataclass
class SampleResult:
    z: np.ndarray
    counter: NfeCounter
    diagnostics: list[dict[str, Any]] = field(default_factory=list)
    delta_traces: list[np.ndarray] = field(default_factory=list, repr=False)


def _default_zeta(spec: GuidanceSpec, obs: Observation, sigma: float) -> float:
    if spec.zeta is not None:
        return spec.zeta
    return pull_coefficient(obs, sigma, SIGMA_DOT, spec.pull_scale)


def sample(model, schedule: NoiseSchedule, obs: Observation | None, spec: GuidanceSpec, n: int,
           streams: Streams, patches: list[np.ndarray] | None = None, z_init=None,
           record: bool = True) -> SampleResult:
    """Run ``n`` trajectories from pure noise under ``spec``.

    Random numbers come from named streams: ``init`` for the starting
    noise, ``pin`` for the noised observation, ``inner`` for re-noising in
    the inner chain, ``recon`` for posterior reconstruction draws and
    ``tfg`` for recurrence noise.
    """
    K = schedule.steps
    s, e = spec.resolved_window(K)
    dim = model.dim
    counter = NfeCounter(batch=n)
    if z_init is None:
        z = streams("init").standard_normal((n, dim))
    else:
        z = np.array(z_init, dtype=float)
    if spec.variant != "none" and s < e and obs is None:
        raise ValueError(f"variant {spec.variant!r} needs an observation")
    if spec.variant == "h_control" and patches is None:
        patches = [np.flatnonzero(~obs.mask)] if (~obs.mask).any() else []
    diagnostics = []
    traces = []
    for k in range(K):
        sig, sig_next = schedule[k], schedule[k + 1]
        f0, b0 = counter.forward, counter.backward
        inner_used = 0.0
        stable = float("nan")
        trace = None
        guided = spec.variant != "none" and s <= k < e
        if not guided:
            z = euler_step(z, _denoise(model, z, sig, counter), sig, sig_next)
        elif spec.variant == "hard_replace":
            zhat = outer_hard_replace(_denoise(model, z, sig, counter), obs)
            z = euler_step(z, zhat, sig, sig_next)
        elif spec.variant == "soft_pull":
            zhat = _denoise(model, z, sig, counter)
            u = outer_soft_pull((z - zhat) / sig, zhat, obs, sig, SIGMA_DOT, spec.pull_scale)
            z = euler_step(z, z - sig * u, sig, sig_next)
        elif spec.variant == "dps":
            zhat = _denoise(model, z, sig, counter)
            corr = dps_step(model, z, sig, obs, _default_zeta(spec, obs, sig), spec.jacobian_mode, counter, zhat)
            u = (z - zhat) / sig + corr
            z = euler_step(z, z - sig * u, sig, sig_next)
        elif spec.variant == "weighted_h":
            zhat = _denoise(model, z, sig, counter)
            u = weighted_h_step((z - zhat) / sig, z, sig, obs.values, spec.alpha, obs.mask)
            z = euler_step(z, z - sig * u, sig, sig_next)
        elif spec.variant == "tfg_ugd":
            z = tfg_ugd_step(model, z, sig, sig_next, obs, spec.tfg, streams("tfg"), counter)
        elif spec.variant == "h_control":
            cfg = spec.hcontrol
            zhat = _denoise(model, z, sig, counter)
            if cfg.outer_mode == "hard":
                zhat_obs = outer_hard_replace(zhat, obs)
            else:
                u = outer_soft_pull((z - zhat) / sig, zhat, obs, sig, SIGMA_DOT, spec.pull_scale)
                zhat_obs = z - sig * u
            xi_obs = streams("pin").standard_normal((n, dim))
            pin = (1.0 - sig) * obs.values + sig * xi_obs
            inner = inner_gibbs(model, zhat_obs, obs, sig, cfg, patches, streams("inner"), counter,
                                pin=pin, recon_rng=streams("recon"))
            final = mask_compose(zhat_obs, inner.readout, obs.mask)
            z = euler_step(z, final, sig, sig_next)
            inner_used = float(inner.iterations.mean())
            fr = inner.stable_fraction[np.isfinite(inner.stable_fraction)]
            stable = float(fr[-1]) if fr.size else float("nan")
            trace = inner.abs_delta
        if record:
            mean_dw = float("nan")
            if trace is not None and np.isfinite(trace).any():
                mean_dw = float(np.nanmean(trace))
            diagnostics.append({
                "outer_step": k,
                "sigma": sig,
                "inner_iters_used": inner_used,
                "stable_fraction": stable,
                "mean_abs_dW": mean_dw,
                "nfe_forward": counter.forward - f0,
                "nfe_backward": counter.backward - b0,
            })
            if trace is not None:
                traces.append(trace)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("sampler produced non-finite states")
    return SampleResult(z, counter, diagnostics, traces)


def hcontrol_sample(model, schedule: NoiseSchedule, obs: Observation, spec: GuidanceSpec, n: int,
                    streams: Streams, partition: PatchPartition | None = None,
                    lattice: Lattice | None = None, **kw) -> SampleResult:
    """Algorithm-level h-control sampler over a patch partition of ``1 - M``."""
    if spec.variant != "h_control":
        raise ValueError("hcontrol_sample needs an h_control spec")
    patches = None
    if partition is not None:
        lattice = lattice or Lattice.flat(obs.dim)
        patches = partition.state_patches(lattice)
    return sample(model, schedule, obs, spec, n, streams, patches=patches, **kw)


def run_baseline(model, schedule: NoiseSchedule, obs: Observation | None, spec: GuidanceSpec, n: int,
                 streams: Streams, **kw) -> SampleResult:
    """Dispatch any non-h-control variant."""
    if spec.variant == "h_control":
        raise ValueError("use hcontrol_sample for h_control")
    return sample(model, schedule, obs, spec, n, streams, **kw)
