"""Non-learned diffusion priors: the standard Gaussian and an energy-envelope prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import DiagGaussian

KINDS = ("standard", "handcrafted", "learned")


def standard_prior(d: int, batch: int | None = None) -> DiagGaussian:
    if d < 1:
        raise ValueError("d must be >= 1")
    shape = (d,) if batch is None else (batch, d)
    return DiagGaussian.from_variances(np.ones(shape))


def frame_rms(y: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """RMS of each full frame along the last axis; shape (..., n_frames)."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[-1]
    if n < frame_len:
        raise ValueError(f"signal of length {n} is shorter than one frame ({frame_len})")
    n_frames = 1 + (n - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = y[..., idx]  # (..., n_frames, frame_len)
    return np.sqrt(np.mean(frames**2, axis=-1))


def energy_std(y, frame_len: int = 32, hop: int = 16, floor: float = 0.1) -> np.ndarray:
    """Per-sample std from the normalized frame RMS of ``y``.

    Frame RMS is divided by its maximum (so the loudest frame gets std 1),
    clipped below at ``floor`` and held constant over each hop. Samples past
    the last hop boundary take the last frame's value. An all-zero signal
    gets std 1 everywhere.
    """
    if not (frame_len >= hop >= 1):
        raise ValueError("need frame_len >= hop >= 1")
    if not 0.0 < floor < 1.0:
        raise ValueError("floor must lie in (0, 1)")
    y = np.asarray(y, dtype=np.float64)
    rms = frame_rms(y, frame_len, hop)
    peak = rms.max(axis=-1, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    norm = np.where(peak > 0, rms / safe, 1.0)
    std_frames = np.maximum(norm, floor)
    n = y.shape[-1]
    which = np.minimum(np.arange(n) // hop, rms.shape[-1] - 1)
    return std_frames[..., which]


def energy_prior(y, frame_len: int = 32, hop: int = 16, floor: float = 0.1) -> DiagGaussian:
    std = energy_std(y, frame_len, hop, floor)
    return DiagGaussian(std**2, std)


@dataclass(frozen=True)
class PriorSpec:
    """Which prior the sampler draws from, with the handcrafted prior's framing."""

    kind: str = "learned"
    frame_len: int = 32
    hop: int = 16
    floor: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prior kind {self.kind!r}")

    def resolve(self, y, psi=None) -> DiagGaussian:
        """Prior for a batch of conditioners ``y``; ``psi`` is the bound prior net."""
        y = np.asarray(y)
        if self.kind == "standard":
            return DiagGaussian.from_variances(np.ones(y.shape))
        if self.kind == "handcrafted":
            return energy_prior(y, self.frame_len, self.hop, self.floor)
        if psi is None:
            raise ValueError("learned prior needs a prior network")
        return psi(y).detach()
