"""Distance comparison encryption.

A database vector encrypts to four ``(2d+16)``-vectors and a query to one
``(2d+16)``-vector (its trapdoor). Given ciphertexts of ``o`` and ``p`` and the
trapdoor of ``q``, :func:`distance_comp` returns

    Z = 2 * r_o * r_p * r_q * (dist(o, q) - dist(p, q))

with ``r_o, r_p, r_q > 0`` drawn fresh per vector, so only the sign of the
distance difference is meaningful. Nothing is ever decrypted.

All functions accept either a single vector or a ``(n, d)`` batch; batches
draw their per-vector randomness in one shot from the supplied generator.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np
from numba import njit

from .common import (
    DimensionError,
    Perm,
    expect_magic,
    gen_invertible_matrix,
    gen_permutation,
    make_rng,
    read_exact,
    read_mat,
    read_perm,
    read_vec,
    to_bytes,
    write_mat,
    write_perm,
    write_vec,
)

KEY_MAGIC = b"DCEK"
STORE_MAGIC = b"DCEC"
KEY_VERSION = 1

KV_RANGE = (0.5, 2.0)  # magnitude range of key vectors and of r1..r4
R_VEC_RANGE = (0.5, 2.0)  # r_p, r_o, r_q
SPLIT_RANGE = (-1.0, 1.0)  # alpha, beta, r'


def lanes(d: int) -> int:
    """Length of every ciphertext / trapdoor vector."""
    return 2 * d + 16


def comparison_op_counts(d: int) -> dict[str, int]:
    """Arithmetic performed by one :func:`distance_comp` call, per lane kind.

    Each of the ``2d+16`` lanes does ``a = c1o*c3p`` (a plain multiply), then
    ``a -= c2o*c4p`` and ``z += a*t`` (two multiply-accumulates).
    """
    n = lanes(d)
    return {"lanes": n, "mac": 2 * n, "mul": n}


@dataclass(frozen=True, eq=False)
class DceSecretKey:
    d: int
    m1: np.ndarray
    m1_inv: np.ndarray
    m2: np.ndarray
    m2_inv: np.ndarray
    m3_up: np.ndarray
    m3_down: np.ndarray
    m3_inv: np.ndarray
    pi1: Perm
    pi2: Perm
    r1: float
    r2: float
    r3: float
    r4: float
    kv1: np.ndarray
    kv2: np.ndarray
    kv3: np.ndarray
    kv4: np.ndarray

    @property
    def lanes(self) -> int:
        return lanes(self.d)

    @property
    def m3(self) -> np.ndarray:
        return np.vstack([self.m3_up, self.m3_down])

    def to_bytes(self) -> bytes:
        return to_bytes(self.write)

    def write(self, f: BinaryIO) -> None:
        f.write(KEY_MAGIC)
        f.write(struct.pack("<BI", KEY_VERSION, self.d))
        for m in (self.m1, self.m1_inv, self.m2, self.m2_inv, self.m3_up, self.m3_down, self.m3_inv):
            write_mat(f, m)
        write_perm(f, self.pi1)
        write_perm(f, self.pi2)
        f.write(struct.pack("<4d", self.r1, self.r2, self.r3, self.r4))
        for kv in (self.kv1, self.kv2, self.kv3, self.kv4):
            write_vec(f, kv)

    @classmethod
    def read(cls, f: BinaryIO) -> "DceSecretKey":
        expect_magic(f, KEY_MAGIC)
        version, d = struct.unpack("<BI", read_exact(f, 5))
        if version != KEY_VERSION:
            raise ValueError(f"unsupported key version {version}")
        mats = [read_mat(f) for _ in range(7)]
        pi1, pi2 = read_perm(f), read_perm(f)
        rs = struct.unpack("<4d", read_exact(f, 32))
        kvs = [read_vec(f) for _ in range(4)]
        return cls(d, *mats, pi1, pi2, *rs, *kvs)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DceSecretKey":
        with open(path, "rb") as f:
            return cls.read(f)


@dataclass(frozen=True, eq=False)
class DceCiphertext:
    """The four vectors of one encrypted database vector, as a ``(4, 2d+16)`` array."""

    data: np.ndarray

    @property
    def c1(self) -> np.ndarray:
        return self.data[0]

    @property
    def c2(self) -> np.ndarray:
        return self.data[1]

    @property
    def c3(self) -> np.ndarray:
        return self.data[2]

    @property
    def c4(self) -> np.ndarray:
        return self.data[3]

    @property
    def size(self) -> int:
        return int(self.data.size)


@dataclass(frozen=True, eq=False)
class DceTrapdoor:
    t: np.ndarray

    @property
    def size(self) -> int:
        return int(self.t.size)


class Comparison(enum.Enum):
    CLOSER = "closer"
    NOT_CLOSER = "not_closer"


def pad_to_even(x: np.ndarray) -> np.ndarray:
    """Append a zero coordinate when the last axis has odd length."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2 == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 1) + [(0, 1)]
    return np.pad(x, pad)


def _signed_magnitudes(rng: np.random.Generator, size, lo: float, hi: float) -> np.ndarray:
    mag = rng.uniform(lo, hi, size=size)
    sign = np.where(rng.random(size=size) < 0.5, -1.0, 1.0)
    return sign * mag


def _key_vectors(n: int, rng: np.random.Generator):
    lo, hi = KV_RANGE
    kv1 = _signed_magnitudes(rng, n, lo, hi)
    kv2 = _signed_magnitudes(rng, n, lo, hi)
    # |kv3| is drawn from the interval that keeps |kv4| = |kv1*kv3/kv2| in range too
    ratio = np.abs(kv2) / np.abs(kv1)
    k3_lo = np.maximum(lo, lo * ratio)
    k3_hi = np.minimum(hi, hi * ratio)
    kv3 = rng.uniform(k3_lo, k3_hi) * np.where(rng.random(n) < 0.5, -1.0, 1.0)
    kv4 = (kv1 * kv3) / kv2
    return kv1, kv2, kv3, kv4


def keygen(d: int, seed: int | np.random.Generator | None = None) -> DceSecretKey:
    if d < 2:
        raise ValueError("dimension must be at least 2")
    if d % 2:
        raise ValueError(f"dimension {d} is odd; pad vectors to {d + 1} (see pad_to_even)")
    rng = make_rng(seed)
    h = d // 2 + 4
    m1, m1_inv = gen_invertible_matrix(h, rng)
    m2, m2_inv = gen_invertible_matrix(h, rng)
    m3, m3_inv = gen_invertible_matrix(lanes(d), rng)
    pi1 = gen_permutation(d, rng)
    pi2 = gen_permutation(d + 8, rng)
    r1, r2, r3, r4 = (float(x) for x in _signed_magnitudes(rng, 4, *KV_RANGE))
    kv1, kv2, kv3, kv4 = _key_vectors(lanes(d), rng)
    return DceSecretKey(
        d=d,
        m1=m1,
        m1_inv=m1_inv,
        m2=m2,
        m2_inv=m2_inv,
        m3_up=np.ascontiguousarray(m3[: d + 8]),
        m3_down=np.ascontiguousarray(m3[d + 8 :]),
        m3_inv=m3_inv,
        pi1=pi1,
        pi2=pi2,
        r1=r1,
        r2=r2,
        r3=r3,
        r4=r4,
        kv1=kv1,
        kv2=kv2,
        kv3=kv3,
        kv4=kv4,
    )


def _as_batch(v, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(v, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != d:
        raise DimensionError(f"expected vectors of dim {d}, got shape {np.shape(v)}")
    return x, single


def _pair_mix(x: np.ndarray) -> np.ndarray:
    # (x1+x2, x1-x2, x3+x4, x3-x4, ...) so that mix(p) . mix(q) == 2 p.q
    out = np.empty_like(x)
    a, b = x[:, 0::2], x[:, 1::2]
    out[:, 0::2] = a + b
    out[:, 1::2] = a - b
    return out


def randomize(v, sk: DceSecretKey, role: str, rng: np.random.Generator) -> np.ndarray:
    """Vector randomization: ``(n, d) -> (n, d+8)`` (or ``d -> d+8``).

    For a database vector ``p`` and query ``q`` under the same key,
    ``randomize(p, 'database') @ randomize(q, 'query') == |p|^2 - 2 p.q``.
    """
    x, single = _as_batch(v, sk.d)
    n, h = x.shape[0], sk.d // 2
    if role == "database":
        hat = sk.pi1.apply(_pair_mix(x))
        a1, a2, rp1, rp2, rp3 = rng.uniform(*SPLIT_RANGE, size=(5, n))
        gamma = (np.einsum("ij,ij->i", x, x) - rp1 * sk.r1 - rp2 * sk.r2 - rp3 * sk.r3) / sk.r4
        half1 = np.column_stack([hat[:, :h], a1, -a1, rp1, rp2])
        half2 = np.column_stack([hat[:, h:], a2, a2, rp3, gamma])
        out = np.hstack([half1 @ sk.m1, half2 @ sk.m2])
    elif role == "query":
        hat = sk.pi1.apply(-_pair_mix(x))
        b1, b2 = rng.uniform(*SPLIT_RANGE, size=(2, n))
        ones = np.ones(n)
        half1 = np.column_stack([hat[:, :h], b1, b1, sk.r1 * ones, sk.r2 * ones])
        half2 = np.column_stack([hat[:, h:], b2, -b2, sk.r3 * ones, sk.r4 * ones])
        out = np.hstack([half1 @ sk.m1_inv.T, half2 @ sk.m2_inv.T])
    else:
        raise ValueError(f"role must be 'database' or 'query', not {role!r}")
    out = sk.pi2.apply(out)
    return out[0] if single else out


def encrypt_many(x, sk: DceSecretKey, rng: np.random.Generator) -> np.ndarray:
    """Encrypt a batch ``(n, d)`` into a ``(n, 4, 2d+16)`` ciphertext array."""
    x, _ = _as_batch(x, sk.d)
    bar = randomize(x, sk, "database", rng)
    r = rng.uniform(*R_VEC_RANGE, size=x.shape[0])[:, None]
    up = bar @ sk.m3_up
    down = bar @ sk.m3_down
    out = np.empty((x.shape[0], 4, sk.lanes))
    out[:, 0] = r * (up + 1.0) / sk.kv1
    out[:, 1] = r * (up - 1.0) / sk.kv2
    out[:, 2] = r * (down + 1.0) / sk.kv3
    out[:, 3] = r * (down - 1.0) / sk.kv4
    return out


def trapgen_many(x, sk: DceSecretKey, rng: np.random.Generator) -> np.ndarray:
    """Trapdoors for a batch of queries, shape ``(n, 2d+16)``."""
    x, _ = _as_batch(x, sk.d)
    bar = randomize(x, sk, "query", rng)
    r = rng.uniform(*R_VEC_RANGE, size=x.shape[0])[:, None]
    return r * (np.hstack([bar, -bar]) @ sk.m3_inv.T) * (sk.kv2 * sk.kv4)


def encrypt_db(p, sk: DceSecretKey, rng: np.random.Generator) -> DceCiphertext:
    return DceCiphertext(encrypt_many(np.asarray(p, dtype=np.float64)[None, :], sk, rng)[0])


def trapgen(q, sk: DceSecretKey, rng: np.random.Generator) -> DceTrapdoor:
    return DceTrapdoor(trapgen_many(np.asarray(q, dtype=np.float64)[None, :], sk, rng)[0])


def z_value(co: np.ndarray, cp: np.ndarray, t: np.ndarray) -> float:
    """:func:`distance_comp` on raw ``(4, L)`` / ``(L,)`` arrays."""
    return float((co[0] * cp[2] - co[1] * cp[3]) @ t)


def distance_comp(co: DceCiphertext, cp: DceCiphertext, tq: DceTrapdoor) -> float:
    """Negative iff ``o`` is strictly closer to the query than ``p``."""
    n = tq.t.shape[0]
    if co.data.shape != (4, n) or cp.data.shape != (4, n):
        raise DimensionError("ciphertext and trapdoor dimensions disagree")
    return z_value(co.data, cp.data, tq.t)


def distance_comp_many(co: np.ndarray, cp: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorised Z over aligned batches ``(n, 4, L)``, ``(n, 4, L)`` and ``(n, L)`` or ``(L,)``."""
    return np.sum((co[:, 0] * cp[:, 2] - co[:, 1] * cp[:, 3]) * t, axis=-1)


def is_closer(co: DceCiphertext, cp: DceCiphertext, tq: DceTrapdoor, eps: float = 0.0) -> Comparison:
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return Comparison.CLOSER if distance_comp(co, cp, tq) < -eps else Comparison.NOT_CLOSER


@njit(cache=True, fastmath=False)
def distance_comp_kernel(co: np.ndarray, cp: np.ndarray, t: np.ndarray) -> float:
    z = 0.0
    for i in range(t.shape[0]):
        a = co[0, i] * cp[2, i]
        a -= co[1, i] * cp[3, i]
        z += a * t[i]
    return z


@njit(cache=True)
def _z_indexed(store, trapdoors, o_idx, p_idx, q_idx, out):
    for j in range(o_idx.shape[0]):
        out[j] = distance_comp_kernel(store[o_idx[j]], store[p_idx[j]], trapdoors[q_idx[j]])


def distance_comp_indexed(store: np.ndarray, trapdoors: np.ndarray, o_idx, p_idx, q_idx) -> np.ndarray:
    """Z for many ``(o, p, q)`` index triples into a ciphertext store and trapdoor table."""
    o_idx, p_idx, q_idx = (np.ascontiguousarray(a, dtype=np.int64) for a in (o_idx, p_idx, q_idx))
    out = np.empty(o_idx.shape[0])
    _z_indexed(np.ascontiguousarray(store), np.ascontiguousarray(trapdoors), o_idx, p_idx, q_idx, out)
    return out


# ---------------------------------------------------------------------------
# ciphertext store: "DCEC", n, d, then n records of 4 x (2d+16) doubles


def write_store(f: BinaryIO, store: np.ndarray, d: int) -> None:
    if store.ndim != 3 or store.shape[1:] != (4, lanes(d)):
        raise DimensionError(f"store shape {store.shape} does not match d={d}")
    f.write(STORE_MAGIC)
    f.write(struct.pack("<II", store.shape[0], d))
    f.write(np.ascontiguousarray(store, dtype="<f8").tobytes())


def read_store(f: BinaryIO) -> tuple[np.ndarray, int]:
    expect_magic(f, STORE_MAGIC)
    n, d = struct.unpack("<II", read_exact(f, 8))
    raw = read_exact(f, 8 * n * 4 * lanes(d))
    return np.frombuffer(raw, dtype="<f8").reshape(n, 4, lanes(d)).astype(np.float64), d


def save_store(path, store: np.ndarray, d: int) -> None:
    with open(path, "wb") as f:
        write_store(f, store, d)


def load_store(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        return read_store(f)
