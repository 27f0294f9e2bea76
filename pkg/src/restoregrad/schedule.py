"""Diffusion variance schedules and their per-timestep constants.

Timesteps are 1-indexed in the public API (t = 1..T) and stored in
0-indexed arrays, so ``sched.alpha_bars[t - 1]`` is the cumulative
product up to step t. The convention alpha_bar_0 = 1 makes the t = 1
posterior variance exactly zero.

Everything here is float64 regardless of the model precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    post_vars: np.ndarray = field(repr=False)
    gammas: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alpha_bar_T(self) -> float:
        return float(self.alpha_bars[-1])

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.array(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(betas)) or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        post_vars = (1.0 - prev) / (1.0 - alpha_bars) * betas
        gammas = np.empty_like(betas)
        gammas[0] = 1.0 / (2.0 * alphas[0])
        if len(betas) > 1:
            gammas[1:] = betas[1:] ** 2 / (
                2.0 * post_vars[1:] * alphas[1:] * (1.0 - alpha_bars[1:])
            )
        for arr in (betas, alphas, alpha_bars, post_vars, gammas):
            arr.setflags(write=False)
        return cls(betas, alphas, alpha_bars, post_vars, gammas)

    def to_config(self) -> str:
        """Comma-separated betas with round-trip precision."""
        return ",".join(repr(float(b)) for b in self.betas)

    @classmethod
    def from_config(cls, text: str) -> "NoiseSchedule":
        return cls.from_betas([float(tok) for tok in text.split(",") if tok.strip()])


@dataclass(frozen=True)
class InferenceSchedule:
    """A short sampling schedule plus the continuous training timestep of each step."""

    sched: NoiseSchedule
    t_hat: np.ndarray

    @property
    def S(self) -> int:
        return self.sched.T


def linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    for name, val in (("beta_min", beta_min), ("beta_max", beta_max)):
        if not math.isfinite(val):
            raise ValueError(f"{name} must be finite")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_min, beta_max, T))


def inference_schedule(train: NoiseSchedule, betas_infer) -> InferenceSchedule:
    """Align a short schedule to a trained one by interpolating on sqrt(alpha_bar).

    For each inference step s, t_hat[s] is the (1-indexed, fractional)
    training step whose sqrt(alpha_bar) equals the inference one, found
    by linear interpolation between neighbouring training steps.
    """
    infer = NoiseSchedule.from_betas(betas_infer)
    if infer.T > train.T:
        raise ValueError(f"inference schedule has {infer.T} steps, training only {train.T}")
    tr = np.sqrt(train.alpha_bars)
    tol = 1e-12
    t_hat = np.empty(infer.T)
    for s, ab in enumerate(np.sqrt(infer.alpha_bars)):
        if ab > tr[0] + tol or ab < tr[-1] - tol:
            raise ValueError(
                f"step {s + 1}: alpha_bar {ab**2:.6g} outside training range "
                f"[{train.alpha_bars[-1]:.6g}, {train.alpha_bars[0]:.6g}]"
            )
        if ab >= tr[0]:
            t_hat[s] = 1.0
            continue
        if ab <= tr[-1]:
            t_hat[s] = float(train.T)
            continue
        # tr is strictly decreasing; first index with tr[i] <= ab
        i = int(np.argmax(tr <= ab))
        frac = (tr[i - 1] - ab) / (tr[i - 1] - tr[i])
        t_hat[s] = i + frac  # (i - 1) + 1 for 1-indexing, plus the fraction
    t_hat.setflags(write=False)
    return InferenceSchedule(infer, t_hat)


def full_inference(train: NoiseSchedule) -> InferenceSchedule:
    """The training schedule itself, with integer timesteps."""
    t_hat = np.arange(1, train.T + 1, dtype=np.float64)
    t_hat.setflags(write=False)
    return InferenceSchedule(train, t_hat)


def forward_sample(x0, eps, t, sched: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` may be an int or an integer array with one timestep per row of
    ``x0``. Works on plain arrays and on autodiff tensors.
    """
    from .autodiff import Tensor

    if np.shape(_raw(x0)) != np.shape(_raw(eps)):
        raise ValueError(f"shape mismatch: x0 {np.shape(_raw(x0))} vs eps {np.shape(_raw(eps))}")
    t_arr = np.asarray(t)
    if not np.issubdtype(t_arr.dtype, np.integer):
        raise ValueError("timestep must be an integer")
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"timestep out of range 1..{sched.T}")
    ab = sched.alpha_bars[t_arr - 1]
    ndim = np.ndim(_raw(x0))
    if t_arr.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (ndim - 1))
    dtype = np.result_type(_raw(x0).dtype, np.float32)
    a = np.sqrt(ab).astype(dtype)
    b = np.sqrt(1.0 - ab).astype(dtype)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return x0 * a + eps * b
    return a * np.asarray(x0) + b * np.asarray(eps)


def _raw(x):
    return getattr(x, "data", x) if not isinstance(x, np.ndarray) else x


# the two schedules used for fast sampling at inference time
SIX_STEP = (1e-4, 1e-3, 0.01, 0.05, 0.2, 0.35)
THREE_STEP = (0.05, 0.2, 0.35)
