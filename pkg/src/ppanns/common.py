"""Seedable numeric helpers shared by every scheme in the package.

Vectors and matrices are plain float64 numpy arrays; permutations are a thin
wrapper around an index array. Every random draw goes through a
``numpy.random.Generator`` so results are reproducible from (seed, call order).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable

import numpy as np

DIV_FLOOR = 1e-6
MATRIX_ENTRY_RANGE = (-1.0, 1.0)
MAX_CONDITION = 1e6
INVERSE_TOL = 1e-9
MAX_MATRIX_ATTEMPTS = 32


class DimensionError(ValueError):
    pass


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    """Return a generator for ``seed``; generators pass through untouched."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seeds(seed: int, count: int) -> list[int]:
    """Independent 64-bit sub-seeds for parallel workers."""
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in ss.spawn(count)]


def as_vec(v, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-d vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"expected dim {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains NaN or Inf")
    return arr


def sq_dist(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"dimension mismatch: {p.shape} vs {q.shape}")
    diff = p - q
    return float(diff @ diff)


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.any(np.abs(b) < DIV_FLOOR):
        raise ZeroDivisionError(f"divisor entry below magnitude floor {DIV_FLOOR}")
    return a / b


_OPS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": _safe_div,
}


def elementwise(op: str, a, b) -> np.ndarray:
    """Entrywise ``add``/``sub``/``mul``/``div`` of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def gen_invertible_matrix(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random ``n x n`` matrix with entries in [-1, 1] and its inverse.

    Draws are rejected until the condition number is at most ``MAX_CONDITION``
    and ``M @ M_inv`` is within ``INVERSE_TOL`` of the identity.
    """
    if n < 1:
        raise ValueError("matrix size must be positive")
    lo, hi = MATRIX_ENTRY_RANGE
    eye = np.eye(n)
    for _ in range(MAX_MATRIX_ATTEMPTS):
        m = rng.uniform(lo, hi, size=(n, n))
        if n == 1 and abs(m[0, 0]) < 0.1:
            continue
        if np.linalg.cond(m) > MAX_CONDITION:
            continue
        m_inv = np.linalg.inv(m)
        if np.max(np.abs(m @ m_inv - eye)) <= INVERSE_TOL:
            return m, m_inv
    raise RuntimeError(f"no well-conditioned {n}x{n} matrix after {MAX_MATRIX_ATTEMPTS} draws")


@dataclass(frozen=True)
class Perm:
    """Bijection on 0..n-1. ``apply(v)[i] == v[mapping[i]]``."""

    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.shape[0])):
            raise ValueError("mapping is not a permutation")
        object.__setattr__(self, "mapping", m)

    @property
    def n(self) -> int:
        return int(self.mapping.shape[0])

    def apply(self, v: np.ndarray) -> np.ndarray:
        # works on the last axis so batches of row vectors permute in one call
        return np.asarray(v)[..., self.mapping]

    def inverse(self) -> "Perm":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.n)
        return Perm(inv)

    def __eq__(self, other):
        return isinstance(other, Perm) and np.array_equal(self.mapping, other.mapping)

    def __hash__(self):
        return hash(self.mapping.tobytes())


def gen_permutation(n: int, rng: np.random.Generator) -> Perm:
    # Generator.permutation is a Fisher-Yates shuffle over the seeded stream
    if n < 1:
        raise ValueError("permutation size must be positive")
    return Perm(rng.permutation(n))


# ---------------------------------------------------------------------------
# binary serialization: little-endian uint32 dims, then raw float64 data


def write_vec(f: BinaryIO, v: np.ndarray) -> None:
    v = np.ascontiguousarray(v, dtype="<f8")
    f.write(struct.pack("<I", v.shape[0]))
    f.write(v.tobytes())


def read_vec(f: BinaryIO) -> np.ndarray:
    (n,) = struct.unpack("<I", read_exact(f, 4))
    return np.frombuffer(read_exact(f, 8 * n), dtype="<f8").astype(np.float64)


def write_mat(f: BinaryIO, m: np.ndarray) -> None:
    m = np.ascontiguousarray(m, dtype="<f8")
    f.write(struct.pack("<II", m.shape[0], m.shape[1]))
    f.write(m.tobytes())


def read_mat(f: BinaryIO) -> np.ndarray:
    rows, cols = struct.unpack("<II", read_exact(f, 8))
    data = np.frombuffer(read_exact(f, 8 * rows * cols), dtype="<f8")
    return data.reshape(rows, cols).astype(np.float64)


def write_perm(f: BinaryIO, p: Perm) -> None:
    f.write(struct.pack("<I", p.n))
    f.write(p.mapping.astype("<u4").tobytes())


def read_perm(f: BinaryIO) -> Perm:
    (n,) = struct.unpack("<I", read_exact(f, 4))
    return Perm(np.frombuffer(read_exact(f, 4 * n), dtype="<u4").astype(np.int64))


def read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise EOFError(f"truncated record: wanted {n} bytes, got {len(buf)}")
    return buf


def expect_magic(f: BinaryIO, magic: bytes) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise ValueError(f"bad magic: expected {magic!r}, got {got!r}")


def to_bytes(writer: Callable[[BinaryIO], None]) -> bytes:
    buf = io.BytesIO()
    writer(buf)
    return buf.getvalue()
