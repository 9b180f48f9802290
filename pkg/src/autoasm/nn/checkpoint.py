"""Binary checkpoints: magic, JSON architecture header, little-endian float64 payload."""

from __future__ import annotations

import json
import os

import numpy as np

from .nets import NetConfig, PolicyNet, ValueNet
from .vocab import VOCAB_SIZE

MAGIC = b"AUTOASM-NET\n"
FORMAT_VERSION = 1
_KINDS = {"policy": PolicyNet, "value": ValueNet}


class CheckpointError(Exception):
    pass


class CorruptFile(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


def describe(net) -> dict:
    c = net.config
    return {
        "version": FORMAT_VERSION,
        "kind": net.kind,
        "d_emb": c.d_emb,
        "hidden": c.hidden,
        "K": c.pairs,
        "cells": c.cells,
        "vocab": VOCAB_SIZE,
        "num_registers": c.num_registers,
        "ram": c.ram,
        "layers": c.layers,
        "d_dec": c.d_dec,
    }


def save_params(net, path) -> None:
    header = json.dumps(describe(net)).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header + b"\n")
        for v in net.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_header(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CorruptFile(f"{path}: bad magic")
    rest = blob[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict):
        raise CorruptFile(f"{path}: unreadable header")
    return header, rest[nl + 1:]


def config_from_header(header: dict) -> NetConfig:
    return NetConfig(pairs=header["K"], num_registers=header["num_registers"], ram=header["ram"],
                     d_emb=header["d_emb"], hidden=header["hidden"], layers=header["layers"],
                     d_dec=header["d_dec"])


def load_params(path, expected: NetConfig | None = None, kind: str | None = None):
    """Load a network; ``expected``/``kind`` pin the architecture to accept."""
    header, payload = read_header(path)
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {header.get('version')}, expected {FORMAT_VERSION}")
    try:
        cfg = config_from_header(header)
        cls = _KINDS[header["kind"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"{path}: incomplete architecture header ({exc})") from exc
    if header.get("vocab") != VOCAB_SIZE or header.get("cells") != cfg.cells:
        raise VersionMismatch(f"{path}: vocabulary/cell layout does not match this build")
    if kind is not None and header["kind"] != kind:
        raise VersionMismatch(f"{path}: holds a {header['kind']} network, expected {kind}")
    if expected is not None and cfg != expected:
        raise VersionMismatch(f"{path}: architecture {cfg} differs from expected {expected}")
    # shapes come from a freshly built template, values from the payload
    template = cls.init(cfg, np.random.default_rng(0))
    total = sum(v.size for v in template.params.values())
    if len(payload) != 8 * total:
        raise CorruptFile(f"{path}: payload holds {len(payload)} bytes, expected {8 * total}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params, pos = {}, 0
    for k, v in template.params.items():
        params[k] = flat[pos:pos + v.size].reshape(v.shape).copy()
        pos += v.size
    return cls(cfg, params)
