"""Binary checkpoint for a TrainState.

Layout (all integers little-endian):

    offset  size  field
    0       8     magic b"RGCKPT\\x00\\x01"
    8       4     u32 format version
    12      8     u64 header length H
    20      H     UTF-8 JSON header (sorted keys, no whitespace)
    20+H    P     payload: raw arrays back to back
    20+H+P  32    sha256 of every preceding byte

The header holds the config echo, dataset spec, step, per-store Adam step
counters, the rng description and a manifest with one entry per array:
``{"name", "group", "shape", "dtype", "offset", "nbytes"}``. Offsets are
relative to the payload start. Groups are ``params``, ``adam_m``, ``adam_v``
and ``ema``; names are ``<store>/<param>``, e.g. ``theta/in.w``.

Arrays are stored as ``<f4`` when training in float32 and ``<f8`` in
float64 so that a resumed run continues bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict

import numpy as np

from .signals import DatasetSpec
from .trainer import TrainConfig, TrainState

MAGIC = b"RGCKPT\x00\x01"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32
GROUPS = ("params", "adam_m", "adam_v", "ema")


class CheckpointError(ValueError):
    pass


def _group_arrays(state: TrainState):
    """Yield (group, store, name, array) in a fixed order."""
    for store in sorted(state.params):
        for name in sorted(state.params[store]):
            yield "params", store, name, state.params[store][name]
    for store in sorted(state.moments):
        for name in sorted(state.moments[store]["m"]):
            yield "adam_m", store, name, state.moments[store]["m"][name]
        for name in sorted(state.moments[store]["v"]):
            yield "adam_v", store, name, state.moments[store]["v"][name]
    if state.ema is not None:
        for store in sorted(state.ema):
            for name in sorted(state.ema[store]):
                yield "ema", store, name, state.ema[store][name]


def to_bytes(state: TrainState) -> bytes:
    dt = np.dtype("<f4") if state.config.precision == "float32" else np.dtype("<f8")
    manifest = []
    chunks = []
    offset = 0
    for group, store, name, arr in _group_arrays(state):
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        manifest.append(
            {
                "name": f"{store}/{name}",
                "group": group,
                "shape": list(arr.shape),
                "dtype": dt.str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": asdict(state.config),
        "dataset": asdict(state.dataset),
        "step": state.step,
        "adam_t": {g: m["t"] for g, m in sorted(state.moments.items())},
        "rng": {"kind": "philox-counter", "seed": state.config.seed, "next_counter": state.step},
        "has_ema": state.ema is not None,
        "payload_bytes": offset,
        "manifest": manifest,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(hdr)) + hdr + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes) -> TrainState:
    if len(raw) < _PREFIX.size + _DIGEST:
        raise CheckpointError("checkpoint truncated: file shorter than fixed header")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; expected {VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(body[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    payload = body[start + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("payload length disagrees with header")

    ds = dict(header["dataset"])
    ds["train_snrs"] = tuple(ds["train_snrs"])
    ds["test_snrs"] = tuple(ds["test_snrs"])
    cfg = TrainConfig(**header["config"])
    dataset = DatasetSpec(**ds)

    params: dict = {}
    m: dict = {}
    v: dict = {}
    ema: dict = {}
    dest = {"params": params, "adam_m": m, "adam_v": v, "ema": ema}
    expect = 0
    for entry in header["manifest"]:
        off, n = entry["offset"], entry["nbytes"]
        if off != expect or off + n > len(payload):
            raise CheckpointError(f"manifest offsets inconsistent at {entry['name']}")
        expect = off + n
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=n // np.dtype(entry["dtype"]).itemsize, offset=off)
        arr = arr.reshape(entry["shape"]).astype(cfg.dtype)
        store, name = entry["name"].split("/", 1)
        dest[entry["group"]].setdefault(store, {})[name] = arr
    if expect != len(payload):
        raise CheckpointError("manifest does not cover the payload")
    moments = {g: {"t": int(header["adam_t"][g]), "m": m[g], "v": v[g]} for g in params}
    return TrainState(cfg, dataset, int(header["step"]), params, moments, ema if header["has_ema"] else None)


def atomic_write_bytes(path, data: bytes) -> None:
    """Temp file in the target directory, then rename over ``path``."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        mask = os.umask(0)
        os.umask(mask)
        os.chmod(tmp, 0o666 & ~mask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, state: TrainState) -> None:
    atomic_write_bytes(path, to_bytes(state))


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def read_header(path) -> dict:
    """Header JSON only, after verifying the checksum."""
    raw = open(path, "rb").read()
    from_bytes(raw)
    _, _, hlen = _PREFIX.unpack_from(raw, 0)
    return json.loads(raw[_PREFIX.size : _PREFIX.size + hlen])
