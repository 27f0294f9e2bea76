"""Ancestral reverse-process sampling with a pluggable diagonal prior."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nets import DiagGaussian
from .priors import PriorSpec
from .schedule import InferenceSchedule, NoiseSchedule, full_inference


class SamplingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    steps: InferenceSchedule
    prior_source: PriorSpec
    seed: int = 0


def _as_infer(sched) -> InferenceSchedule:
    if isinstance(sched, InferenceSchedule):
        return sched
    if isinstance(sched, NoiseSchedule):
        return full_inference(sched)
    raise TypeError(f"expected a schedule, got {type(sched).__name__}")


def reverse_sample(
    theta: Callable,
    prior: DiagGaussian,
    y,
    sched,
    rng: np.random.Generator,
    trace: list | None = None,
) -> np.ndarray:
    """Run the reverse chain from x_S ~ N(0, S_prior) down to x_0.

    Each step uses the noise estimate at the step's aligned timestep; fresh
    prior noise scaled by the posterior std is added on every step except
    the last. ``theta(x_t, y, t_hat)`` may return an array or tensor.
    If ``trace`` is a list, (step, t_hat, x_after_step) tuples are appended,
    starting with the initial draw at step S.
    """
    infer = _as_infer(sched)
    s = infer.sched
    y = np.asarray(y, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[None, :]
    std = np.broadcast_to(np.asarray(prior.std, dtype=np.float64), y.shape)
    x = std * rng.standard_normal(y.shape)
    if trace is not None:
        trace.append((s.T, float(infer.t_hat[-1]), x[0].copy()))
    for step in range(s.T, 0, -1):
        i = step - 1
        out = theta(x, y, float(infer.t_hat[i]))
        eps_hat = np.asarray(getattr(out, "data", out), dtype=np.float64)
        coef = s.betas[i] / np.sqrt(1.0 - s.alpha_bars[i])
        x = (x - coef * eps_hat) / np.sqrt(s.alphas[i])
        if step > 1:
            x = x + np.sqrt(s.post_vars[i]) * (std * rng.standard_normal(y.shape))
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state after reverse step {step} (t_hat={infer.t_hat[i]:.3f})")
        if trace is not None:
            trace.append((step - 1, float(infer.t_hat[i]), x[0].copy()))
    return x[0] if squeeze else x


def fast_reverse_sample(theta, prior, y, infer: InferenceSchedule, rng, trace=None) -> np.ndarray:
    if not isinstance(infer, InferenceSchedule):
        raise TypeError("fast sampling needs an aligned InferenceSchedule")
    return reverse_sample(theta, prior, y, infer, rng, trace)


def sample_with_config(theta, psi, y, cfg: SamplerConfig, trace=None) -> np.ndarray:
    """Resolve the configured prior for ``y`` and sample. ``psi`` may be None
    unless the prior source is the learned one."""
    prior = cfg.prior_source.resolve(y, psi)
    rng = np.random.default_rng(cfg.seed)
    return reverse_sample(theta, prior, y, cfg.steps, rng, trace)


def write_trajectory(path, trace: list) -> None:
    """One CSV row per reverse step: step, t_hat, rms, then every sample value."""
    d = len(trace[0][2])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t_hat", "rms"] + [f"x{j}" for j in range(d)])
        for step, t_hat, x in trace:
            rms = float(np.sqrt(np.mean(x**2)))
            w.writerow([step, repr(t_hat), repr(rms)] + [repr(float(v)) for v in x])
