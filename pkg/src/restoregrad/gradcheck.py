"""Finite-difference check of every training loss on a tiny problem."""

from __future__ import annotations

import time

import numpy as np

from .autodiff import finite_diff_check
from .objective import Bound, no_posterior_loss, simplified_loss
from .schedule import linear_schedule
from .trainer import TrainConfig, build_nets, stream

LOSSES = ("lr", "dm", "pm", "total", "ablation")


def _split(flat):
    out: dict = {}
    for k, v in flat.items():
        g, name = k.split("/", 1)
        out.setdefault(g, {})[name] = v
    return out


def problem(d: int = 8, T: int = 5, batch: int = 2, seed: int = 0):
    """Random float64 parameters (head included, so every path carries
    gradient) and a fixed batch. Returns (flat params, loss closure)."""
    cfg = TrainConfig(T=T, precision="float64", seed=seed)
    nets = build_nets(cfg)
    rng = stream(seed, 9, 0)
    flat = {}
    for g in ("theta", "psi", "phi"):
        for k, v in nets[g].init_params(rng, np.float64).items():
            flat[f"{g}/{k}"] = v + 0.05 * rng.standard_normal(v.shape)
    x0 = rng.standard_normal((batch, d))
    y = x0 + 0.3 * rng.standard_normal((batch, d))
    sched = linear_schedule(T, 1e-4, 0.035 if T > 1 else 1e-4)

    def loss(which: str):
        def fn(params):
            p = _split(params)
            b = {g: Bound(nets[g], p[g]) for g in p}
            r = np.random.default_rng(seed)
            if which == "ablation":
                return no_posterior_loss(b["theta"], b["psi"], x0, y, sched, cfg.eta, r).graph
            br = simplified_loss(b["theta"], b["phi"], b["psi"], x0, y, sched, cfg.eta, cfg.lam, r)
            return br.graph if which == "total" else br.terms[which]

        return fn

    return flat, loss


def run(d: int = 8, T: int = 5, seed: int = 0, max_coords: int = 8) -> dict:
    """Worst relative error per loss plus the overall worst and wall time."""
    t0 = time.perf_counter()
    flat, loss = problem(d, T, seed=seed)
    out = {}
    for i, name in enumerate(LOSSES):
        params = flat if name != "ablation" else {k: v for k, v in flat.items() if not k.startswith("phi/")}
        out[name] = finite_diff_check(loss(name), params, max_coords=max_coords, rng=np.random.default_rng([seed, i]))
    out["worst"] = max(out[n] for n in LOSSES)
    out["seconds"] = time.perf_counter() - t0
    return out
