"""Scale-and-perturb encryption for approximate distance comparison.

``c = s * p + lam`` where ``lam`` is uniform in direction with norm
``(s*beta/4) * u**(1/d)``, ``u ~ U(0, 1)``. Distances between ciphertexts
divided by ``s`` are within ``beta/2`` of the plaintext Euclidean distance,
so any comparison with a margin larger than ``beta`` survives encryption.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .common import DimensionError, expect_magic, read_exact

KEY_MAGIC = b"SAPK"
STORE_MAGIC = b"SAPC"

REFERENCE_S = 1024.0


class BetaRangeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SapKey:
    s: float
    beta: float
    d: int
    max_abs: float

    @property
    def noise_radius(self) -> float:
        return self.s * self.beta / 4.0

    def beta_range(self) -> tuple[float, float]:
        return math.sqrt(self.max_abs), 2.0 * self.max_abs * math.sqrt(self.d)

    def write(self, f: BinaryIO) -> None:
        f.write(KEY_MAGIC)
        f.write(struct.pack("<dddI", self.s, self.beta, self.max_abs, self.d))

    @classmethod
    def read(cls, f: BinaryIO) -> "SapKey":
        expect_magic(f, KEY_MAGIC)
        s, beta, max_abs, d = struct.unpack("<dddI", read_exact(f, 28))
        return cls(s=s, beta=beta, d=d, max_abs=max_abs)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            self.write(f)

    @classmethod
    def load(cls, path) -> "SapKey":
        with open(path, "rb") as f:
            return cls.read(f)


@dataclass(frozen=True, eq=False)
class SapCiphertext:
    c: np.ndarray


def sap_keygen(s: float, beta: float, dataset_max_abs: float, d: int) -> SapKey:
    """Validate and bundle SAP parameters.

    ``beta`` outside ``[sqrt(M), 2 M sqrt(d)]`` only warns: in practice beta is
    tuned for a target filter recall rather than taken from the nominal range.
    """
    if not s > 0:
        raise ValueError("scaling factor s must be positive")
    if not beta > 0:
        raise ValueError("perturbation factor beta must be positive")
    if d < 1:
        raise ValueError("dimension must be positive")
    key = SapKey(s=float(s), beta=float(beta), d=int(d), max_abs=float(dataset_max_abs))
    lo, hi = key.beta_range()
    if not lo <= beta <= hi:
        warnings.warn(f"beta={beta:g} outside nominal range [{lo:g}, {hi:g}]", BetaRangeWarning, stacklevel=2)
    return key


def sample_noise(n: int, d: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal((n, d))
    x = radius * rng.random(n) ** (1.0 / d)
    norms = np.linalg.norm(u, axis=1)
    return u * (x / norms)[:, None]


def sap_encrypt_many(x, key: SapKey, rng: np.random.Generator) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != key.d:
        raise DimensionError(f"expected dim {key.d}, got {x.shape[1]}")
    return key.s * x + sample_noise(x.shape[0], key.d, key.noise_radius, rng)


def sap_encrypt(p, key: SapKey, rng: np.random.Generator) -> SapCiphertext:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (key.d,):
        raise DimensionError(f"expected dim {key.d}, got shape {p.shape}")
    return SapCiphertext(sap_encrypt_many(p[None, :], key, rng)[0])


def approx_dist(ca: SapCiphertext, cb: SapCiphertext) -> float:
    """Euclidean (not squared) distance between two SAP ciphertexts."""
    if ca.c.shape != cb.c.shape:
        raise DimensionError("ciphertext dimensions disagree")
    return float(np.linalg.norm(ca.c - cb.c))


def write_store(f: BinaryIO, store: np.ndarray) -> None:
    store = np.ascontiguousarray(store, dtype="<f8")
    f.write(STORE_MAGIC)
    f.write(struct.pack("<II", store.shape[0], store.shape[1]))
    f.write(store.tobytes())


def read_store(f: BinaryIO) -> np.ndarray:
    expect_magic(f, STORE_MAGIC)
    n, d = struct.unpack("<II", read_exact(f, 8))
    return np.frombuffer(read_exact(f, 8 * n * d), dtype="<f8").reshape(n, d).astype(np.float64)


def save_store(path, store: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_store(f, store)


def load_store(path) -> np.ndarray:
    with open(Path(path), "rb") as f:
        return read_store(f)
