"""Velocity models: a small MLP trained by flow matching and an exact Gaussian model.

Both backends share one calling convention. States are ``(B, D)`` arrays,
the noise level is a scalar or a length-``B`` vector, and the clean
prediction is ``z - sigma * velocity(z, sigma)``.
"""

from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from hcontrol.densities import GmrfSpec, checkerboard_sample

__all__ = [
    "GaussianVelocity",
    "MLPVelocity",
    "MlpParams",
    "TrainConfig",
    "TrainingDiverged",
    "UnsupportedOperation",
    "cosine_lr",
    "init_mlp",
    "load_weights",
    "save_weights",
    "time_embedding",
    "train_mlp",
]

log = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"HCTL"
WEIGHTS_VERSION = 1
FREQ_MIN, FREQ_MAX = 1.0, 1000.0


class UnsupportedOperation(RuntimeError):
    """Raised when a backend lacks a requested capability."""


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"training loss became non-finite at iteration {iteration}")
        self.iteration = iteration


def time_embedding(sigma, dim: int) -> np.ndarray:
    """Sinusoidal embedding with geometrically spaced frequencies in [1, 1000]."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    freqs = np.geomspace(FREQ_MIN, FREQ_MAX, dim // 2)
    arg = sigma[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class MlpParams:
    """Affine layers ``h @ W + b`` with SiLU between them."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def state_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def emb_dim(self) -> int:
        return self.dims[0] - self.state_dim

    def flat(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(state_dim: int, hidden: int = 256, emb_dim: int = 64, layers: int = 6, rng=None) -> MlpParams:
    """Uniform fan-in initialisation, as in the usual linear-layer default."""
    rng = np.random.default_rng(rng)
    dims = [state_dim + emb_dim] + [hidden] * (layers - 1) + [state_dim]
    ws, bs = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(din)
        ws.append(rng.uniform(-bound, bound, size=(din, dout)))
        bs.append(rng.uniform(-bound, bound, size=dout))
    return MlpParams(ws, bs)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def mlp_forward(params: MlpParams, x: np.ndarray, emb: np.ndarray, keep: bool = False):
    """Forward pass; with ``keep`` also returns the activations for backprop."""
    h = np.concatenate([x, emb.astype(x.dtype, copy=False)], axis=1)
    cache = [] if keep else None
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w
        a += b
        if i == n - 1:
            return (a, cache) if keep else a
        s = _sigmoid(a)
        if keep:
            cache.append((h, a, s))
        h = a * s
    raise AssertionError("unreachable")


def mlp_backward(params: MlpParams, cache, out_h, g_out, need_params: bool = True):
    """Reverse pass through the affine+SiLU chain.

    ``out_h`` is the input of the final layer (the last hidden activation).
    Returns ``(grads, g_input)`` where ``grads`` alternates weight and bias
    gradients layer by layer and ``g_input`` is the gradient wrt the
    concatenated network input.
    """
    n = len(params.weights)
    grads = [None] * (2 * n)
    g = g_out
    h_in = out_h
    for i in range(n - 1, -1, -1):
        w = params.weights[i]
        if need_params:
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ w.T
        if i == 0:
            break
        h_prev, a, s = cache[i - 1]
        # d silu / da = s * (1 + a * (1 - s))
        g *= s * (1.0 + a * (1.0 - s))
        h_in = h_prev
    return grads, g


def _final_hidden(cache):
    h, a, s = cache[-1]
    return a * s


class MLPVelocity:
    """Velocity field backed by a trained MLP."""

    backend = "mlp"
    has_input_gradient = True

    def __init__(self, params: MlpParams, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params = params.astype(self.dtype)
        self.dim = params.state_dim
        self.emb_dim = params.emb_dim

    def _inputs(self, z, sigma):
        z = np.asarray(z, dtype=float)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"expected (B, {self.dim}) states, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite state passed to the velocity model")
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (z.shape[0],))
        if np.any((sig < 0) | (sig > 1)):
            raise ValueError("sigma must lie in [0, 1]")
        return z, sig

    def velocity(self, z, sigma, cond=None) -> np.ndarray:
        z, sig = self._inputs(z, sigma)
        emb = time_embedding(sig, self.emb_dim)
        out = mlp_forward(self.params, z.astype(self.dtype), emb)
        return out.astype(float)

    def clean_prediction(self, z, sigma, cond=None) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z - np.reshape(sigma, (-1, 1)) * self.velocity(z, sigma, cond)

    def input_vjp(self, z, sigma, cotangent, cond=None) -> np.ndarray:
        """``v^T d(zhat0)/dz`` through the hand-written reverse pass."""
        z, sig = self._inputs(z, sigma)
        v = np.asarray(cotangent, dtype=float)
        emb = time_embedding(sig, self.emb_dim)
        _, cache = mlp_forward(self.params, z.astype(self.dtype), emb, keep=True)
        g_out = (sig[:, None] * v).astype(self.dtype)
        _, g_in = mlp_backward(self.params, cache, _final_hidden(cache), g_out, need_params=False)
        return v - g_in[:, : self.dim].astype(float)


class GaussianVelocity:
    """Bayes-optimal velocity for a zero-mean Gaussian prior ``N(0, Sigma)``.

    ``K(sigma) = (1-sigma) Sigma ((1-sigma)^2 Sigma + sigma^2 I)^{-1}`` gives
    the exact denoiser ``E[z0 | z_sigma = z] = K z``.
    """

    backend = "gaussian"
    has_input_gradient = True

    def __init__(self, cov: np.ndarray):
        self.cov = np.asarray(cov, dtype=float)
        self.dim = self.cov.shape[0]
        self._K: dict[float, np.ndarray] = {}
        self._post_chol: dict[float, np.ndarray] = {}

    @classmethod
    def from_spec(cls, spec: GmrfSpec) -> "GaussianVelocity":
        return cls(spec.cov)

    def denoiser(self, sigma: float) -> np.ndarray:
        sigma = float(sigma)
        K = self._K.get(sigma)
        if K is None:
            a = 1.0 - sigma
            A = a * a * self.cov + sigma * sigma * np.eye(self.dim)
            # K = a Sigma A^{-1}; Sigma and A are symmetric and commute
            K = linalg.solve(A, a * self.cov, assume_a="pos").T
            self._K[sigma] = K
        return K

    def posterior_cov(self, sigma: float) -> np.ndarray:
        """Covariance of ``z0 | z_sigma``: ``Sigma - K (1-sigma) Sigma``."""
        K = self.denoiser(sigma)
        P = self.cov - (1.0 - float(sigma)) * K @ self.cov
        return 0.5 * (P + P.T)

    def _scalar_sigma(self, sigma):
        s = np.unique(np.asarray(sigma, dtype=float))
        if s.size != 1:
            raise ValueError("the Gaussian backend takes one noise level per call")
        s = float(s[0])
        if not 0.0 <= s <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")
        return s

    def clean_prediction(self, z, sigma, cond=None) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite state passed to the velocity model")
        s = self._scalar_sigma(sigma)
        if s == 0.0:
            return z.copy()
        return z @ self.denoiser(s).T

    def velocity(self, z, sigma, cond=None) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        s = self._scalar_sigma(sigma)
        if s == 0.0:
            return np.zeros_like(z)
        return (z - self.clean_prediction(z, s)) / s

    def input_vjp(self, z, sigma, cotangent, cond=None) -> np.ndarray:
        s = self._scalar_sigma(sigma)
        return np.asarray(cotangent, dtype=float) @ self.denoiser(s)

    def posterior_sample(self, z, sigma, rng: np.random.Generator) -> np.ndarray:
        """Exact draw from ``N(K z, Sigma_post)`` per row."""
        s = self._scalar_sigma(sigma)
        mean = self.clean_prediction(z, s)
        L = self._post_chol.get(s)
        if L is None:
            P = self.posterior_cov(s)
            w, V = np.linalg.eigh(P)
            L = V * np.sqrt(np.clip(w, 0.0, None))
            self._post_chol[s] = L
        return mean + rng.standard_normal(mean.shape) @ L.T


@dataclass
class TrainConfig:
    iterations: int = 30_000
    batch: int = 512
    lr: float = 3e-3
    weight_decay: float = 1e-4
    hidden: int = 256
    emb_dim: int = 64
    layers: int = 6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"
    sigma_power: float = 2.0
    ema: float = 0.0

    def __post_init__(self):
        for name in ("iterations", "batch", "lr", "hidden", "emb_dim", "layers"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        if not self.sigma_power > 0:
            raise ValueError("sigma_power must be positive")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema must lie in [0, 1)")


def cosine_lr(it: int, total: int, base: float) -> float:
    """Cosine decay from ``base`` at ``it = 0`` towards zero at ``it = total``."""
    return 0.5 * base * (1.0 + math.cos(math.pi * it / total))


def flow_matching_loss(params: MlpParams, z0, eps, sigma, grad: bool = True):
    """Mean squared velocity error against the target ``eps - z0``."""
    dtype = params.weights[0].dtype
    s = sigma[:, None].astype(dtype)
    zt = (1 - s) * z0 + s * eps
    target = eps - z0
    emb = time_embedding(sigma, params.emb_dim).astype(dtype)
    B = z0.shape[0]
    if not grad:
        u = mlp_forward(params, zt, emb)
        r = u - target
        return float(np.sum(r * r) / B)
    u, cache = mlp_forward(params, zt, emb, keep=True)
    r = u - target
    loss = float(np.sum(r * r) / B)
    grads, _ = mlp_backward(params, cache, _final_hidden(cache), (2.0 / B) * r)
    return loss, grads


@dataclass
class TrainResult:
    params: MlpParams
    losses: np.ndarray = field(repr=False)
    lrs: np.ndarray = field(repr=False)
    seconds: float = 0.0


def train_mlp(cfg: TrainConfig, rng: np.random.Generator | None = None, progress_every: int = 0) -> TrainResult:
    """Fit the checkerboard velocity field with AdamW and cosine decay.

    Noise levels are ``u ** sigma_power`` with ``u ~ Uniform(0, 1)`` per
    example. The default power 2 puts more training mass at low noise, where
    the sharp square edges are resolved.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    dtype = np.dtype(cfg.dtype)
    params = init_mlp(2, cfg.hidden, cfg.emb_dim, cfg.layers, rng).astype(dtype)
    flat = params.flat()
    m = [np.zeros_like(p) for p in flat]
    v = [np.zeros_like(p) for p in flat]
    avg = [p.copy() for p in flat] if cfg.ema else None
    losses = np.empty(cfg.iterations)
    lrs = np.empty(cfg.iterations)
    b1, b2 = cfg.beta1, cfg.beta2
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        z0 = checkerboard_sample(cfg.batch, rng).astype(dtype)
        eps = rng.standard_normal((cfg.batch, 2)).astype(dtype)
        sigma = rng.random(cfg.batch) ** cfg.sigma_power
        loss, grads = flow_matching_loss(params, z0, eps, sigma)
        if not math.isfinite(loss):
            raise TrainingDiverged(it)
        lr = cosine_lr(it, cfg.iterations, cfg.lr)
        losses[it], lrs[it] = loss, lr
        c1 = 1.0 - b1 ** (it + 1)
        c2 = 1.0 - b2 ** (it + 1)
        for p, g, mi, vi in zip(flat, grads, m, v):
            mi *= b1
            mi += (1.0 - b1) * g
            vi *= b2
            vi += (1.0 - b2) * (g * g)
            p *= 1.0 - lr * cfg.weight_decay
            p -= (lr / c1) * mi / (np.sqrt(vi / c2) + cfg.eps)
        if avg is not None:
            for a, p in zip(avg, flat):
                a += (1.0 - cfg.ema) * (p - a)
        if progress_every and (it + 1) % progress_every == 0:
            log.info("iter %d loss %.4f lr %.2e", it + 1, loss, lr)
    seconds = time.perf_counter() - t0
    if avg is not None:
        params = MlpParams(avg[0::2], avg[1::2])
    return TrainResult(params.astype(np.float64), losses, lrs, seconds)


def save_weights(path, params: MlpParams) -> None:
    """Binary layout: magic, u32 version, u32 layer count, u32 dims, then float64 data."""
    dims = params.dims
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(params.weights)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_weights(path) -> MlpParams:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    dims = struct.unpack_from(f"<{n + 1}I", data, 12)
    off = 12 + 4 * (n + 1)
    ws, bs = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, "<f8", din * dout, off).reshape(din, dout)
        off += 8 * din * dout
        b = np.frombuffer(data, "<f8", dout, off)
        off += 8 * dout
        ws.append(w.astype(np.float64))
        bs.append(b.astype(np.float64))
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in weights file")
    return MlpParams(ws, bs)
