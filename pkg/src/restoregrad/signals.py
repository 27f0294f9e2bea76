"""Synthetic 1-D restoration benchmark and quality metrics.

A clean signal is a sum of 2-4 sinusoids under a smooth random amplitude
envelope with silent stretches, peak-normalized to 1. The degraded signal
adds white (or pink) noise scaled to an exact SNR. Pairs are a pure
function of (dataset seed, split, index within split).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TRAIN, TEST = 0, 1


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 2048
    n_test: int = 256
    d: int = 256
    train_snrs: tuple = (0.0, 5.0, 10.0, 15.0)
    test_snrs: tuple = (2.5, 7.5, 12.5, 17.5)
    noise_kind: str = "white"
    seed: int = 0

    def __post_init__(self):
        if not self.train_snrs or not self.test_snrs:
            raise ValueError("SNR lists must be nonempty")
        if self.noise_kind not in ("white", "pink"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if self.d < 8:
            raise ValueError("signal length must be at least 8")


@dataclass
class SignalPair:
    x0: np.ndarray
    y: np.ndarray
    snr_db: float
    seed: tuple
    meta: dict = field(default_factory=dict)


def pair_seed(spec: DatasetSpec, index: int) -> tuple:
    """(dataset seed, split, index within split); train and test never collide."""
    if not 0 <= index < spec.n_train + spec.n_test:
        raise IndexError(f"index {index} outside dataset of {spec.n_train + spec.n_test}")
    if index < spec.n_train:
        return (spec.seed, TRAIN, index)
    return (spec.seed, TEST, index - spec.n_train)


def _smoothstep_envelope(rng: np.random.Generator, d: int):
    n_knots = int(rng.integers(4, 9))
    pos = np.linspace(0, d - 1, n_knots)
    vals = rng.uniform(0.1, 1.0, n_knots)
    silent = rng.random(n_knots) < 0.35
    # keep at least two audible knots
    if (~silent).sum() < 2:
        silent[rng.choice(n_knots, 2, replace=False)] = False
    vals[silent] = 0.0
    x = np.arange(d, dtype=np.float64)
    k = np.clip(np.searchsorted(pos, x, side="right") - 1, 0, n_knots - 2)
    s = (x - pos[k]) / (pos[k + 1] - pos[k])
    w = s * s * (3.0 - 2.0 * s)
    env = vals[k] + (vals[k + 1] - vals[k]) * w
    return env, {"knot_pos": pos.tolist(), "knot_vals": vals.tolist()}


def _noise(rng: np.random.Generator, d: int, kind: str) -> np.ndarray:
    n = rng.standard_normal(d)
    if kind == "pink":
        spec = np.fft.rfft(n)
        f = np.arange(spec.size, dtype=np.float64)
        f[0] = 1.0
        n = np.fft.irfft(spec / np.sqrt(f), d)
    return n


def make_pair(rng: np.random.Generator, d: int, snr_db: float, noise_kind: str = "white"):
    """Draw one clean signal and degrade it at exactly ``snr_db`` (inf = no noise)."""
    n_sin = int(rng.integers(2, 5))
    freqs = rng.uniform(0.01, 0.12, n_sin)
    phases = rng.uniform(0.0, 2 * np.pi, n_sin)
    amps = rng.uniform(0.3, 1.0, n_sin)
    t = np.arange(d, dtype=np.float64)
    carrier = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)
    env, env_meta = _smoothstep_envelope(rng, d)
    x0 = env * carrier
    x0 /= np.max(np.abs(x0))
    noise = _noise(rng, d, noise_kind)
    if math.isinf(snr_db) and snr_db > 0:
        y = x0.copy()
    else:
        p_sig = np.sum(x0**2)
        p_noise = np.sum(noise**2)
        noise *= math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
        y = x0 + noise
    meta = {"freqs": freqs.tolist(), "phases": phases.tolist(), "amps": amps.tolist(), **env_meta}
    return x0, y, meta


def generate_pair(spec: DatasetSpec, index: int) -> SignalPair:
    seed = pair_seed(spec, index)
    rng = np.random.default_rng(np.random.SeedSequence(list(seed)))
    snrs = spec.train_snrs if seed[1] == TRAIN else spec.test_snrs
    snr = float(snrs[int(rng.integers(len(snrs)))])
    x0, y, meta = make_pair(rng, spec.d, snr, spec.noise_kind)
    return SignalPair(x0, y, snr, seed, meta)


def build_split(spec: DatasetSpec, split: str):
    """Stack a whole split into arrays (x0, y, snr_db)."""
    if split == "train":
        idx = range(spec.n_train)
    elif split == "test":
        idx = range(spec.n_train, spec.n_train + spec.n_test)
    else:
        raise ValueError(f"unknown split {split!r}")
    pairs = [generate_pair(spec, i) for i in idx]
    x0 = np.stack([p.x0 for p in pairs]) if pairs else np.zeros((0, spec.d))
    y = np.stack([p.y for p in pairs]) if pairs else np.zeros((0, spec.d))
    return x0, y, np.array([p.snr_db for p in pairs])


# ------------------------------------------------------------------ metrics

SISNR_CAP = 100.0


def snr_db(reference, estimate) -> float:
    """Plain SNR of ``estimate`` against ``reference``."""
    reference = np.asarray(reference, dtype=np.float64)
    err = np.asarray(estimate, dtype=np.float64) - reference
    return 10.0 * math.log10(np.sum(reference**2) / np.sum(err**2))


def si_snr(estimate, reference) -> float:
    """Scale-invariant SNR in dB, capped at +100 when the residual vanishes."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise ValueError("reference signal is all zeros")
    s = (np.dot(est, ref) / ref_energy) * ref
    e = est - s
    num, den = np.dot(s, s), np.dot(e, e)
    if den == 0 or num >= den * 10.0 ** (SISNR_CAP / 10.0):
        return SISNR_CAP
    if num == 0:
        return -SISNR_CAP
    return 10.0 * math.log10(num / den)


def ssnr(estimate, reference, seg_len: int = 32, overlap: float = 0.75, lo_db: float = -10.0, hi_db: float = 35.0) -> float:
    """Segmental SNR: mean over overlapping segments of the clipped per-segment SNR.

    A segment with zero error scores ``hi_db``; one with a silent
    reference (and nonzero error) scores ``lo_db``.
    """
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    if seg_len < 2 or not 0.0 <= overlap < 1.0:
        raise ValueError("need seg_len >= 2 and overlap in [0, 1)")
    n = ref.shape[-1]
    if n < seg_len:
        raise ValueError(f"signal of length {n} is shorter than one segment")
    hop = max(1, int(round(seg_len * (1.0 - overlap))))
    n_seg = 1 + (n - seg_len) // hop
    idx = np.arange(seg_len)[None, :] + hop * np.arange(n_seg)[:, None]
    sig = np.sum(ref[idx] ** 2, axis=1)
    err = np.sum((ref[idx] - est[idx]) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        seg = 10.0 * np.log10(sig / np.where(err > 0, err, 1.0))
    seg = np.where(err == 0, hi_db, seg)
    seg = np.where((sig == 0) & (err > 0), lo_db, seg)
    return float(np.mean(np.clip(seg, lo_db, hi_db)))


def mse(estimate, reference) -> float:
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    return float(np.mean((est - ref) ** 2))


def envelope(x, width: int = 17) -> np.ndarray:
    """Moving average of |x| over ``width`` samples (edges use the available window)."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    kernel = np.ones(width)
    num = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), -1, a)
    den = np.convolve(np.ones(a.shape[-1]), kernel, mode="same")
    return num / den


# ------------------------------------------------------------------ file dump

_DS_MAGIC = b"RGDS1\n"


def write_dataset(path, spec: DatasetSpec) -> None:
    """Header line (JSON spec echo), one ``index,snr_db`` row per pair, then
    a ``DATA`` line followed by raw little-endian float32 x0 then y per pair."""
    n = spec.n_train + spec.n_test
    pairs = [generate_pair(spec, i) for i in range(n)]
    with open(path, "wb") as fh:
        fh.write(_DS_MAGIC)
        fh.write((json.dumps(asdict(spec), sort_keys=True) + "\n").encode())
        for i, p in enumerate(pairs):
            fh.write(f"{i},{p.snr_db!r}\n".encode())
        fh.write(b"DATA\n")
        for p in pairs:
            fh.write(p.x0.astype("<f4").tobytes())
            fh.write(p.y.astype("<f4").tobytes())


def read_dataset(path):
    """Inverse of :func:`write_dataset`: returns (spec, snrs, x0, y) with float32 arrays."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_DS_MAGIC):
        raise ValueError("not a dataset dump")
    pos = len(_DS_MAGIC)
    end = raw.index(b"\n", pos)
    hdr = json.loads(raw[pos:end])
    hdr["train_snrs"] = tuple(hdr["train_snrs"])
    hdr["test_snrs"] = tuple(hdr["test_snrs"])
    spec = DatasetSpec(**hdr)
    n = spec.n_train + spec.n_test
    pos = end + 1
    snrs = []
    for _ in range(n):
        end = raw.index(b"\n", pos)
        _, s = raw[pos:end].decode().split(",")
        snrs.append(float(s))
        pos = end + 1
    if raw[pos : pos + 5] != b"DATA\n":
        raise ValueError("missing DATA marker")
    pos += 5
    body = np.frombuffer(raw, dtype="<f4", offset=pos)
    if body.size != 2 * n * spec.d:
        raise ValueError("truncated dataset payload")
    body = body.reshape(n, 2, spec.d)
    return spec, np.array(snrs), body[:, 0].copy(), body[:, 1].copy()

