"""Training loop, Adam, EMA and evaluation for the four training modes.

Modes:
  restoregrad        noise estimator + prior net + posterior net, joint loss
  no_posterior       noise estimator + prior net, posterior ablation loss
  standard_prior     noise estimator only, identity prior (plain conditional DDPM)
  handcrafted_prior  noise estimator only, fixed energy-envelope prior

All randomness is derived from (config.seed, stream, counter), so any
step can be recomputed from the step number alone.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .nets import NoiseEstimator, posterior_net, prior_net
from .objective import Bound, LossBreakdown, loss_for_mode
from .priors import PriorSpec, energy_prior, standard_prior
from .sampler import reverse_sample
from .schedule import SIX_STEP, THREE_STEP, full_inference, inference_schedule, linear_schedule
from .signals import DatasetSpec, build_split, mse, si_snr, ssnr

log = logging.getLogger(__name__)

MODES = ("restoregrad", "no_posterior", "standard_prior", "handcrafted_prior")
METRICS_HEADER = ["step", "loss_total", "loss_lr", "loss_dm", "loss_pm", "eval_sisnr", "eval_ssnr"]
DIVERGENCE_LIMIT = 1e6

# rng stream ids
_INIT, _PERM, _STEP, _EVAL = 1, 2, 3, 4


@dataclass
class TrainConfig:
    mode: str = "restoregrad"
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.035
    eta: float = 0.1
    lam: float = 0.5
    sigma_min: float = 0.1
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    n_steps: int = 2000
    ema_decay: float = 0.0
    seed: int = 0
    eval_every: int = 500
    eval_count: int = 64
    eval_steps: str = "6"
    precision: str = "float32"
    prior_frame_len: int = 32
    prior_hop: int = 16
    prior_floor: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.batch_size < 1 or self.n_steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size, eval_every must be >= 1 and n_steps >= 0")
        if self.eval_steps not in ("full", "6", "3"):
            raise ValueError("eval_steps must be full, 6 or 3")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def groups(self) -> tuple:
        return {
            "restoregrad": ("theta", "psi", "phi"),
            "no_posterior": ("theta", "psi"),
            "standard_prior": ("theta",),
            "handcrafted_prior": ("theta",),
        }[self.mode]

    @property
    def prior_kind(self) -> str:
        return {
            "restoregrad": "learned",
            "no_posterior": "learned",
            "standard_prior": "standard",
            "handcrafted_prior": "handcrafted",
        }[self.mode]

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(self.prior_kind, self.prior_frame_len, self.prior_hop, self.prior_floor)

    def schedule(self):
        return linear_schedule(self.T, self.beta_min, self.beta_max)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def stream(seed: int, stream_id: int, counter: int) -> np.random.Generator:
    """Counter-based generator for (seed, stream, counter)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream_id, counter])))


def build_nets(cfg: TrainConfig) -> dict:
    return {
        "theta": NoiseEstimator(),
        "psi": prior_net(cfg.sigma_min),
        "phi": posterior_net(cfg.sigma_min),
    }


def init_params(cfg: TrainConfig) -> dict:
    """Parameter stores for the mode's networks; each net has its own init
    stream so every mode starts from the same noise-estimator weights."""
    nets = build_nets(cfg)
    out = {}
    for k, g in enumerate(("theta", "psi", "phi")):
        if g in cfg.groups:
            out[g] = nets[g].init_params(stream(cfg.seed, _INIT, k), cfg.dtype)
    return out


# ---------------------------------------------------------------- optimizer


def adam_init(params: Mapping[str, np.ndarray]) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params, grads, moments, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new (params, moments)."""
    t = moments["t"] + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        g = g.astype(p.dtype, copy=False)
        m = beta1 * moments["m"][k] + (1.0 - beta1) * g
        v = beta2 * moments["v"][k] + (1.0 - beta2) * (g * g)
        new_p[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[k] = m
        new_v[k] = v
    return new_p, {"t": t, "m": new_m, "v": new_v}


def ema_update(shadow, params, decay: float) -> dict:
    return {k: decay * shadow[k] + (1.0 - decay) * params[k] for k in params}


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    config: TrainConfig
    dataset: DatasetSpec
    step: int
    params: dict  # group -> name -> array
    moments: dict  # group -> adam moments
    ema: dict | None  # group -> name -> array

    @classmethod
    def fresh(cls, cfg: TrainConfig, dataset: DatasetSpec) -> "TrainState":
        params = init_params(cfg)
        moments = {g: adam_init(p) for g, p in params.items()}
        ema = {g: {k: v.copy() for k, v in p.items()} for g, p in params.items()} if cfg.ema_decay else None
        return cls(cfg, dataset, 0, params, moments, ema)

    def eval_params(self) -> dict:
        return self.ema if self.ema is not None else self.params


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, breakdown: LossBreakdown | None, reason: str, rows=None):
        self.step = step
        self.breakdown = breakdown
        self.reason = reason
        self.rows = rows or []
        parts = f" {breakdown.as_dict()}" if breakdown is not None else ""
        super().__init__(f"training diverged at step {step}: {reason}{parts}")


class Trainer:
    """Holds the data and schedule for one run and advances a TrainState."""

    def __init__(self, cfg: TrainConfig, dataset: DatasetSpec, data=None):
        self.cfg = cfg
        self.dataset = dataset
        self.sched = cfg.schedule()
        self.nets = build_nets(cfg)
        if data is None:
            x0, y, _ = build_split(dataset, "train")
            tx0, ty, _ = build_split(dataset, "test")
            data = (x0, y, tx0, ty)
        dt = cfg.dtype
        self.x0, self.y = data[0].astype(dt), data[1].astype(dt)
        self.test_x0, self.test_y = data[2], data[3]
        self.steps_per_epoch = max(1, dataset.n_train // cfg.batch_size)
        self._perm_cache: dict[int, np.ndarray] = {}
        self._fixed_prior = None
        if cfg.mode == "standard_prior":
            self._fixed_prior = lambda y: standard_prior(y.shape[-1], y.shape[0])
        elif cfg.mode == "handcrafted_prior":
            spec = cfg.prior_spec()

            def handcrafted(y, spec=spec, dt=dt):
                g = energy_prior(y, spec.frame_len, spec.hop, spec.floor)
                return type(g)(g.variances.astype(dt), g.std.astype(dt))

            self._fixed_prior = handcrafted

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.steps_per_epoch)
        perm = self._perm_cache.get(epoch)
        if perm is None:
            perm = stream(self.cfg.seed, _PERM, epoch).permutation(self.dataset.n_train)
            self._perm_cache = {epoch: perm}
        B = min(self.cfg.batch_size, self.dataset.n_train)
        return perm[k * B : (k + 1) * B]

    def bound(self, params: Mapping[str, Mapping]) -> dict:
        return {g: Bound(self.nets[g], p) for g, p in params.items()}

    def loss(self, params: Mapping[str, Mapping], step: int) -> LossBreakdown:
        """Mode loss for ``step``'s batch and randomness; ``params`` may hold tensors."""
        idx = self.batch_indices(step)
        rng = stream(self.cfg.seed, _STEP, step)
        c = self.cfg
        return loss_for_mode(
            c.mode, self.bound(params), self.x0[idx], self.y[idx], self.sched, c.eta, c.lam, rng, self._fixed_prior
        )

    def step(self, state: TrainState) -> LossBreakdown:
        """Advance ``state`` by one optimizer step in place and return the loss."""
        c = self.cfg
        tape = ad.Tape()
        try:
            with tape:
                leaves = {
                    g: {k: ad.Tensor(v, requires_grad=True, name=f"{g}/{k}") for k, v in p.items()}
                    for g, p in state.params.items()
                }
                br = self.loss(leaves, state.step)
        except ad.NonFiniteError as exc:
            tape.clear()
            raise TrainingDiverged(state.step, None, str(exc)) from exc
        if not math.isfinite(br.total) or abs(br.total) > DIVERGENCE_LIMIT:
            tape.clear()
            raise TrainingDiverged(state.step, br, "loss out of range")
        flat = {f"{g}/{k}": t for g, p in leaves.items() for k, t in p.items()}
        grads = ad.backward(tape, br.graph, flat)
        tape.clear()
        br.graph = None
        br.terms = {}
        for g in state.params:
            gg = {k: grads[f"{g}/{k}"] for k in state.params[g]}
            state.params[g], state.moments[g] = adam_step(
                state.params[g], gg, state.moments[g], c.lr, c.adam_beta1, c.adam_beta2, c.adam_eps
            )
            if state.ema is not None:
                state.ema[g] = ema_update(state.ema[g], state.params[g], c.ema_decay)
        state.step += 1
        return br

    def quick_eval(self, state: TrainState) -> tuple[float, float]:
        n = min(self.cfg.eval_count, len(self.test_x0))
        row = evaluate_params(
            self.cfg, state.eval_params(), self.test_x0[:n], self.test_y[:n], self.cfg.eval_steps, seed=self.cfg.seed
        )
        return row["si_snr"], row["ssnr"]

    def run(self, state: TrainState | None = None, n_steps: int | None = None, rows: list | None = None):
        """Train until ``n_steps`` total steps; returns (state, metric rows)."""
        state = state or TrainState.fresh(self.cfg, self.dataset)
        n_steps = self.cfg.n_steps if n_steps is None else n_steps
        rows = [] if rows is None else rows
        acc = np.zeros(4)
        count = 0
        while state.step < n_steps:
            try:
                br = self.step(state)
            except TrainingDiverged as exc:
                exc.rows = rows
                raise
            acc += (br.total, br.lr, br.dm, br.pm)
            count += 1
            if state.step % self.cfg.eval_every == 0 or state.step == n_steps:
                si, ss = self.quick_eval(state)
                m = acc / count
                rows.append([state.step, *m.tolist(), si, ss])
                log.info("step %d total %.4f lr %.4f dm %.4f pm %.4f si-snr %.2f", state.step, *m, si)
                acc[:] = 0
                count = 0
        return state, rows


def train(cfg: TrainConfig, dataset: DatasetSpec, metrics_path=None):
    """Run training from scratch; returns (final TrainState, metric rows).

    Raises TrainingDiverged (carrying the rows logged so far) when the loss
    leaves the finite range.
    """
    state, rows = Trainer(cfg, dataset).run()
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return state, rows


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])
    return buf.getvalue()


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv(rows))


# ---------------------------------------------------------------- evaluation


def sampling_schedule(cfg: TrainConfig, steps: str):
    sched = cfg.schedule()
    if steps == "full":
        return full_inference(sched)
    if steps == "6":
        return inference_schedule(sched, SIX_STEP)
    if steps == "3":
        return inference_schedule(sched, THREE_STEP)
    raise ValueError(f"unknown inference schedule {steps!r}")


def restore(cfg: TrainConfig, params: Mapping[str, Mapping], x0, y, steps: str, seed: int, chunk: int = 128):
    """Sample restorations of ``y`` with the mode's prior. Returns float64 (N, d)."""
    nets = build_nets(cfg)
    theta = Bound(nets["theta"], params["theta"])
    psi = Bound(nets["psi"], params["psi"]) if "psi" in params else None
    spec = cfg.prior_spec()
    infer = sampling_schedule(cfg, steps)
    rng = stream(seed, _EVAL, 0)
    out = []
    for lo in range(0, len(y), chunk):
        yc = np.asarray(y[lo : lo + chunk], dtype=np.float64)
        prior = spec.resolve(yc, psi)
        out.append(reverse_sample(theta, prior, yc, infer, rng))
    return np.concatenate(out, axis=0) if out else np.zeros((0, np.shape(y)[-1]))


def evaluate_params(cfg, params, x0, y, steps: str, seed: int = 0, per_sample: bool = False) -> dict:
    est = restore(cfg, params, x0, y, steps, seed)
    si = [si_snr(e, r) for e, r in zip(est, x0)]
    ss = [ssnr(e, r) for e, r in zip(est, x0)]
    ms = [mse(e, r) for e, r in zip(est, x0)]
    row = {
        "mode": cfg.mode,
        "schedule": steps,
        "n": len(x0),
        "si_snr": float(np.mean(si)),
        "ssnr": float(np.mean(ss)),
        "mse": float(np.mean(ms)),
    }
    if per_sample:
        row["rows"] = list(zip(range(len(x0)), si, ss, ms))
    return row


def evaluate(state: TrainState, dataset: DatasetSpec | None = None, steps: str = "6", seed: int | None = None, per_sample: bool = False) -> dict:
    """Mean SI-SNR / SSNR / MSE over the test split with the given schedule."""
    dataset = dataset or state.dataset
    x0, y, _ = build_split(dataset, "test")
    seed = state.config.seed if seed is None else seed
    return evaluate_params(state.config, state.eval_params(), x0, y, steps, seed, per_sample)


def unprocessed_baseline(dataset: DatasetSpec) -> dict:
    x0, y, _ = build_split(dataset, "test")
    return {
        "si_snr": float(np.mean([si_snr(a, b) for a, b in zip(y, x0)])),
        "ssnr": float(np.mean([ssnr(a, b) for a, b in zip(y, x0)])),
        "mse": float(np.mean([mse(a, b) for a, b in zip(y, x0)])),
    }


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
