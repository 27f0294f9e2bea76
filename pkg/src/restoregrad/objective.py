"""Loss terms of the learned-prior diffusion objective.

All per-sample terms reduce over the last (signal) axis and return one
value per batch row; the composite losses average over the batch. Inputs
can be numpy arrays or autodiff tensors.

Terms, with v the posterior variances and p the prior variances:

    LR = alpha_bar_T * ||x0||^2_{1/v} + sum(log v)
    DM = ||eps - eps_hat||^2_{1/v}
    PM = sum(log(p / v) + v / p)          # >= d, equal iff p == v
    total = eta * LR + DM + lambda * PM
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import DiagGaussian, sample_diag
from .schedule import NoiseSchedule, forward_sample


@dataclass
class Bound:
    """A network paired with the parameter store it is evaluated with."""

    net: object
    params: Mapping

    def __call__(self, *args):
        return self.net.apply(self.params, *args)

    def with_params(self, params: Mapping) -> "Bound":
        return Bound(self.net, params)


@dataclass
class LossBreakdown:
    lr: float
    dm: float
    pm: float
    total: float
    eta: float
    lam: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)
    terms: dict = field(default_factory=dict, repr=False, compare=False)

    def recomputed_total(self) -> float:
        return self.eta * self.lr + self.dm + self.lam * self.pm

    def as_dict(self) -> dict:
        return {"total": self.total, "lr": self.lr, "dm": self.dm, "pm": self.pm}


def _val(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_positive(v):
    if np.any(_val(v) <= 0):
        raise ValueError("variances must be strictly positive")


def weighted_norm(x, variances):
    """sum_i x_i^2 / v_i over the last axis."""
    if np.shape(_val(x)) != np.shape(_val(variances)):
        raise ValueError(f"length mismatch: {np.shape(_val(x))} vs {np.shape(_val(variances))}")
    _check_positive(variances)
    return ad.sum(ad.div(ad.mul(x, x), variances), axis=-1)


def log_det(variances):
    _check_positive(variances)
    return ad.sum(ad.log(variances), axis=-1)


def lr_loss(x0, post: DiagGaussian, alpha_bar_T: float):
    return ad.scale(weighted_norm(x0, post.variances), alpha_bar_T) + log_det(post.variances)


def dm_loss(eps, eps_hat, post: DiagGaussian):
    return weighted_norm(ad.sub(eps, eps_hat), post.variances)


def pm_loss(post: DiagGaussian, prior: DiagGaussian):
    """log(|S_prior| / |S_post|) + tr(S_prior^-1 S_post), exactly as printed."""
    p, q = prior.variances, post.variances
    if np.shape(_val(p)) != np.shape(_val(q)):
        raise ValueError("prior and posterior dimensions differ")
    _check_positive(p)
    _check_positive(q)
    ratio = ad.div(q, p)
    return ad.sum(ad.sub(ratio, ad.log(ratio)), axis=-1)


def true_kl(post: DiagGaussian, prior: DiagGaussian):
    """KL(post || prior) for zero-mean diagonal Gaussians: (PM - d) / 2."""
    d = post.d
    return 0.5 * (_val(pm_loss(post, prior)) - d)


def draw_noise(rng: np.random.Generator, batch: int, d: int, T: int):
    """One iteration's randomness: timesteps then standard-normal latents."""
    t = rng.integers(1, T + 1, size=batch)
    u = rng.standard_normal((batch, d))
    return t, u


def _shape2(x0):
    shape = np.shape(_val(x0))
    if len(shape) != 2:
        raise ValueError("expected (batch, length) signals")
    return shape


def _finish(lr, dm, pm, eta, lam) -> LossBreakdown:
    lr_m = ad.mean(lr) if lr is not None else None
    dm_m = ad.mean(dm)
    pm_m = ad.mean(pm) if pm is not None else None
    total = dm_m
    if lr_m is not None and eta:
        total = total + ad.scale(lr_m, eta)
    if pm_m is not None and lam:
        total = total + ad.scale(pm_m, lam)
    return LossBreakdown(
        lr=float(_val(lr_m)) if lr_m is not None else 0.0,
        dm=float(_val(dm_m)),
        pm=float(_val(pm_m)) if pm_m is not None else 0.0,
        total=float(_val(total)),
        eta=float(eta),
        lam=float(lam),
        graph=total if isinstance(total, Tensor) else None,
        terms={k: v for k, v in (("lr", lr_m), ("dm", dm_m), ("pm", pm_m)) if v is not None},
    )


def simplified_loss(
    theta: Bound,
    phi: Bound,
    psi: Bound,
    x0,
    y,
    sched: NoiseSchedule,
    eta: float,
    lam: float,
    rng: np.random.Generator,
) -> LossBreakdown:
    """One iteration of the joint training objective.

    Draws t ~ U{1..T} and eps ~ N(0, S_post) (reparameterized through the
    posterior std), forms x_t by direct sampling and evaluates all terms.
    """
    B, d = _shape2(x0)
    t, u = draw_noise(rng, B, d, sched.T)
    prior = psi(y)
    post = phi(x0, y)
    eps = sample_diag(post, u=u)
    x_t = forward_sample(x0, eps, t, sched)
    eps_hat = theta(x_t, y, t.astype(np.float64))
    lr = lr_loss(x0, post, sched.alpha_bar_T)
    dm = dm_loss(eps, eps_hat, post)
    pm = pm_loss(post, prior)
    return _finish(lr, dm, pm, eta, lam)


def no_posterior_loss(
    theta: Bound,
    psi: Bound,
    x0,
    y,
    sched: NoiseSchedule,
    eta: float,
    rng: np.random.Generator,
) -> LossBreakdown:
    """Ablation without the posterior encoder: the prior plays its role."""
    B, d = _shape2(x0)
    t, u = draw_noise(rng, B, d, sched.T)
    prior = psi(y)
    eps = sample_diag(prior, u=u)
    x_t = forward_sample(x0, eps, t, sched)
    eps_hat = theta(x_t, y, t.astype(np.float64))
    lr = lr_loss(x0, prior, sched.alpha_bar_T)
    dm = dm_loss(eps, eps_hat, prior)
    return _finish(lr, dm, None, eta, 0.0)


def fixed_prior_loss(
    theta: Bound,
    prior: DiagGaussian,
    x0,
    y,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> LossBreakdown:
    """Denoising loss under a non-learned prior (standard or handcrafted).

    With identity variances this is the plain conditional-DDPM loss
    ||eps - eps_theta(x_t, y, t)||^2 averaged over the batch.
    """
    B, d = _shape2(x0)
    t, u = draw_noise(rng, B, d, sched.T)
    eps = sample_diag(prior, u=u)
    x_t = forward_sample(x0, eps, t, sched)
    eps_hat = theta(x_t, y, t.astype(np.float64))
    dm = dm_loss(eps, eps_hat, prior)
    return _finish(None, dm, None, 0.0, 0.0)


def latent_kl_term(x0, post: DiagGaussian, sched: NoiseSchedule):
    """KL(q(x_T | x0) || N(0, S)) = a_T/2 ||x0||^2_{S^-1} - d/2 (a_T + log(1 - a_T))."""
    aT = sched.alpha_bar_T
    d = post.d
    return 0.5 * aT * _val(weighted_norm(x0, post.variances)) - 0.5 * d * (
        aT + math.log(1.0 - aT)
    )


def elbo_terms(
    theta: Bound,
    phi: Bound,
    psi: Bound,
    x0,
    y,
    sched: NoiseSchedule,
    n_mc: int,
    rng: np.random.Generator,
) -> dict:
    """Per-component Monte-Carlo estimate of the negative modified ELBO.

    Components (batch means):
      lr     a_T/2 ||x0||^2_{1/v} + 1/2 log|S_post|
      dm     sum_t gamma_t E||eps - eps_theta(x_t, y, t)||^2_{1/v}
      pm     1/2 (log|S_prior|/|S_post| + tr(S_prior^-1 S_post))
      const  d/2 log(2 pi beta_1) - d/2 (a_T + log(1 - a_T))
    The remaining parameter-free constant is omitted. The log|S_post| part
    of the t=1 reconstruction term is already the second LR summand, so
    only its parameter-free part enters ``const``.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    x0 = np.asarray(_val(x0))
    y = np.asarray(_val(y))
    B, d = _shape2(x0)
    prior = psi(y).detach()
    post = phi(x0, y).detach()
    v = post.variances
    aT = sched.alpha_bar_T
    lr = 0.5 * aT * _val(weighted_norm(x0, v)) + 0.5 * _val(log_det(v))
    pm = 0.5 * _val(pm_loss(post, prior))
    dm = np.zeros(B)
    for _ in range(n_mc):
        u = rng.standard_normal((B, d))
        eps = post.std * u
        for t in range(1, sched.T + 1):
            x_t = forward_sample(x0, eps, t, sched)
            eps_hat = _val(theta(x_t, y, float(t)))
            dm += sched.gammas[t - 1] * _val(dm_loss(eps, eps_hat, post))
    dm /= n_mc
    const = 0.5 * d * math.log(2 * math.pi * sched.betas[0]) - 0.5 * d * (
        aT + math.log(1.0 - aT)
    )
    terms = {
        "lr": float(np.mean(lr)),
        "dm": float(np.mean(dm)),
        "pm": float(np.mean(pm)),
        "const": float(const),
    }
    terms["total"] = terms["lr"] + terms["dm"] + terms["pm"] + terms["const"]
    return terms


def exact_elbo(theta, phi, psi, x0, y, sched, n_mc: int, rng) -> float:
    """Negative modified ELBO (lower is better), up to a parameter-free constant."""
    return elbo_terms(theta, phi, psi, x0, y, sched, n_mc, rng)["total"]


def loss_for_mode(
    mode: str,
    models: Mapping[str, Bound],
    x0,
    y,
    sched: NoiseSchedule,
    eta: float,
    lam: float,
    rng: np.random.Generator,
    fixed_prior: Callable | None = None,
) -> LossBreakdown:
    """Dispatch the training loss for one of the four training modes."""
    if mode == "restoregrad":
        return simplified_loss(models["theta"], models["phi"], models["psi"], x0, y, sched, eta, lam, rng)
    if mode == "no_posterior":
        return no_posterior_loss(models["theta"], models["psi"], x0, y, sched, eta, rng)
    if mode in ("standard_prior", "handcrafted_prior"):
        if fixed_prior is None:
            raise ValueError(f"mode {mode} needs a fixed prior constructor")
        return fixed_prior_loss(models["theta"], fixed_prior(_val(y)), x0, y, sched, rng)
    raise ValueError(f"unknown mode {mode!r}")
