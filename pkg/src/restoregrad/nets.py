"""The three learnable modules: noise estimator, prior encoder, posterior encoder.

Each network is a small 1-D convolutional stack whose parameters live in a
plain ``dict[str, np.ndarray]`` (a parameter store). ``apply`` accepts
either raw arrays (plain evaluation) or autodiff leaf tensors (training),
so the same code path serves both.

Signals are ``(batch, length)``; internally activations are channels-last.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ParamStore = dict  # name -> np.ndarray

# pre-activation clamp of the exponential variance head
LOGSTD_CLAMP = 30.0


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64):
    """Normal(0, std) resampled until every entry lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def timestep_embedding(t_hat, dim: int = 64) -> np.ndarray:
    """Sinusoidal embedding of continuous timesteps, frequencies 1 .. 1e4."""
    t_hat = np.atleast_1d(np.asarray(t_hat, dtype=np.float64))
    half = dim // 2
    freqs = 10.0 ** (4.0 * np.arange(half) / (half - 1))
    arg = t_hat[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.size(v) for v in params.values()))


def _dtype_of(params: Mapping) -> np.dtype:
    first = next(iter(params.values()))
    return first.data.dtype if isinstance(first, Tensor) else np.asarray(first).dtype


def _as_input(x, dtype):
    if isinstance(x, Tensor):
        return x
    return np.asarray(x, dtype=dtype)


def _col(x):
    """(B, L) -> (B, L, 1)."""
    shape = x.shape
    if isinstance(x, Tensor):
        return ad.reshape(x, shape + (1,))
    return x.reshape(shape + (1,))


@dataclass
class DiagGaussian:
    """Zero-mean Gaussian with diagonal covariance.

    ``variances`` and ``std`` may be arrays or tensors of shape (B, d) or (d,).
    """

    variances: object
    std: object

    @classmethod
    def from_std(cls, std) -> "DiagGaussian":
        return cls(std * std, std)

    @classmethod
    def from_variances(cls, variances) -> "DiagGaussian":
        v = np.asarray(variances)
        if np.any(v <= 0):
            raise ValueError("variances must be strictly positive")
        return cls(v, np.sqrt(v))

    @property
    def d(self) -> int:
        return int(np.shape(getattr(self.variances, "data", self.variances))[-1])

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(
            np.asarray(getattr(self.variances, "data", self.variances)),
            np.asarray(getattr(self.std, "data", self.std)),
        )


def sample_diag(g: DiagGaussian, rng: np.random.Generator | None = None, u=None):
    """Reparameterized draw std * u with u ~ N(0, I).

    Pass ``u`` to reuse a fixed standard-normal draw; the result is then a
    differentiable function of ``g.std``.
    """
    std_data = getattr(g.std, "data", g.std)
    if u is None:
        if rng is None:
            raise ValueError("need an rng or an explicit u")
        u = rng.standard_normal(np.shape(std_data))
    u = np.asarray(u, dtype=np.result_type(np.asarray(std_data).dtype, np.float32))
    return g.std * u


@dataclass
class NoiseEstimator:
    """Residual dilated conv net predicting the diffusion noise.

    Input is (x_t, y) stacked as two channels; the timestep embedding goes
    through a two-layer MLP and is added per block after a projection. The
    output head is zero-initialised.
    """

    channels: int = 32
    dilations: tuple = (1, 2, 4, 8)
    emb_dim: int = 64
    mlp_dim: int = 128
    kernel: int = 3

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> ParamStore:
        C, K, M = self.channels, self.kernel, self.mlp_dim
        p = {
            "in.w": trunc_normal(rng, (K, 2, C), dtype=dtype),
            "in.b": np.zeros(C, dtype),
            "temb.w1": trunc_normal(rng, (self.emb_dim, M), dtype=dtype),
            "temb.b1": np.zeros(M, dtype),
            "temb.w2": trunc_normal(rng, (M, M), dtype=dtype),
            "temb.b2": np.zeros(M, dtype),
        }
        for i in range(len(self.dilations)):
            p[f"block{i}.proj.w"] = trunc_normal(rng, (M, C), dtype=dtype)
            p[f"block{i}.proj.b"] = np.zeros(C, dtype)
            p[f"block{i}.conv1.w"] = trunc_normal(rng, (K, C, C), dtype=dtype)
            p[f"block{i}.conv1.b"] = np.zeros(C, dtype)
            p[f"block{i}.conv2.w"] = trunc_normal(rng, (K, C, C), dtype=dtype)
            p[f"block{i}.conv2.b"] = np.zeros(C, dtype)
        p["out.w"] = np.zeros((1, C, 1), dtype)
        p["out.b"] = np.zeros(1, dtype)
        return p

    def apply(self, params: Mapping, x_t, y, t_hat):
        dtype = _dtype_of(params)
        x_t = _as_input(x_t, dtype)
        y = _as_input(y, dtype)
        if x_t.shape != y.shape:
            raise ValueError(f"length mismatch: x_t {x_t.shape} vs y {y.shape}")
        if x_t.ndim != 2:
            raise ValueError("expected (batch, length) signals")
        B = x_t.shape[0]
        t_hat = np.broadcast_to(np.asarray(t_hat, dtype=np.float64), (B,))
        P = params
        h = ad.concat([_col(x_t), _col(y)], axis=2)
        h = ad.conv1d(h, P["in.w"], P["in.b"])
        e = timestep_embedding(t_hat, self.emb_dim).astype(dtype)
        e = ad.silu(ad.matmul(e, P["temb.w1"]) + P["temb.b1"])
        e = ad.silu(ad.matmul(e, P["temb.w2"]) + P["temb.b2"])
        C = self.channels
        for i, dil in enumerate(self.dilations):
            cond = ad.matmul(e, P[f"block{i}.proj.w"]) + P[f"block{i}.proj.b"]
            z = h + ad.reshape(cond, (B, 1, C))
            z = ad.conv1d(ad.silu(z), P[f"block{i}.conv1.w"], P[f"block{i}.conv1.b"], dil)
            z = ad.conv1d(ad.silu(z), P[f"block{i}.conv2.w"], P[f"block{i}.conv2.b"])
            h = h + z
        out = ad.conv1d(ad.silu(h), P["out.w"], P["out.b"])
        return ad.reshape(out, x_t.shape)


@dataclass
class VarianceEncoder:
    """Conv encoder mapping its inputs to a per-sample diagonal variance.

    std = exp(clamp(v)) + sigma_min, variance = std**2. ``in_channels`` is
    1 for the prior net (y) and 2 for the posterior net (x0, y).
    """

    in_channels: int = 1
    channels: int = 16
    dilations: tuple = (1, 2, 4)
    kernel: int = 3
    sigma_min: float = 0.1

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> ParamStore:
        C, K = self.channels, self.kernel
        p = {
            "in.w": trunc_normal(rng, (K, self.in_channels, C), dtype=dtype),
            "in.b": np.zeros(C, dtype),
        }
        for i in range(len(self.dilations)):
            p[f"block{i}.conv.w"] = trunc_normal(rng, (K, C, C), dtype=dtype)
            p[f"block{i}.conv.b"] = np.zeros(C, dtype)
        p["out.w"] = trunc_normal(rng, (1, C, 1), dtype=dtype)
        p["out.b"] = np.zeros(1, dtype)
        return p

    def apply(self, params: Mapping, *signals) -> DiagGaussian:
        if len(signals) != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input signal(s), got {len(signals)}")
        dtype = _dtype_of(params)
        signals = [_as_input(s, dtype) for s in signals]
        shape = signals[0].shape
        if any(s.shape != shape for s in signals):
            raise ValueError("input signals differ in length")
        P = params
        h = ad.concat([_col(s) for s in signals], axis=2) if len(signals) > 1 else _col(signals[0])
        h = ad.conv1d(h, P["in.w"], P["in.b"])
        for i, dil in enumerate(self.dilations):
            h = h + ad.conv1d(ad.relu(h), P[f"block{i}.conv.w"], P[f"block{i}.conv.b"], dil)
        v = ad.conv1d(ad.relu(h), P["out.w"], P["out.b"])
        v = ad.clip(ad.reshape(v, shape), -LOGSTD_CLAMP, LOGSTD_CLAMP)
        std = ad.exp(v) + self.sigma_min
        return DiagGaussian.from_std(std)


def prior_net(sigma_min: float = 0.1) -> VarianceEncoder:
    return VarianceEncoder(in_channels=1, sigma_min=sigma_min)


def posterior_net(sigma_min: float = 0.1) -> VarianceEncoder:
    return VarianceEncoder(in_channels=2, sigma_min=sigma_min)


def estimate_noise(net: NoiseEstimator, params: Mapping, x_t, y, t_hat):
    return net.apply(params, x_t, y, t_hat)


def encode_prior(net: VarianceEncoder, params: Mapping, y) -> DiagGaussian:
    return net.apply(params, y)


def encode_posterior(net: VarianceEncoder, params: Mapping, x0, y) -> DiagGaussian:
    return net.apply(params, x0, y)
