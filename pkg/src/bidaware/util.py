"""Shared plumbing: deterministic hashing, seeded RNG streams, small file helpers."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

_U64 = np.uint64


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """One splitmix64 round; x is uint64, vectorized."""
    with np.errstate(over="ignore"):
        x = (x + _U64(0x9E3779B97F4A7C15)).astype(_U64)
        x = ((x ^ (x >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)).astype(_U64)
        x = ((x ^ (x >> _U64(27))) * _U64(0x94D049BB133111EB)).astype(_U64)
        return x ^ (x >> _U64(31))


def hash_mix(*parts) -> np.ndarray:
    """Mix integer scalars/arrays into a uint64 hash, broadcasting over arrays."""
    acc = np.asarray(_U64(0x243F6A8885A308D3))
    with np.errstate(over="ignore"):
        for p in parts:
            arr = np.asarray(p, dtype=np.int64).astype(_U64)
            acc = _splitmix64(acc ^ _splitmix64(arr))
    return acc


def hash_uniform(*parts) -> np.ndarray:
    """Deterministic U(0,1) from hashed integer parts (never exactly 0 or 1)."""
    h = hash_mix(*parts)
    return (h.astype(np.float64) + 0.5) * (1.0 / 2**64)


def hash_gauss(*parts) -> np.ndarray:
    """Deterministic standard normal from hashed integer parts (Box-Muller)."""
    u1 = hash_uniform(*parts, 1)
    u2 = hash_uniform(*parts, 2)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def spawn_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) slot; stable across runs."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fmt_float(x: float) -> str:
    """Shortest round-trip decimal form; keeps text artifacts byte-stable."""
    return repr(float(x))


def write_kv(path: str | Path, items: dict) -> None:
    """Flat key=value file, one pair per line."""
    lines = []
    for key, value in items.items():
        if isinstance(value, float):
            value = fmt_float(value)
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def clamp(x, lo, hi):
    return np.minimum(np.maximum(x, lo), hi)
