"""Reference ASPE and known-plaintext recovery attacks.

ASPE hides ``p' = [p, 1, |p|^2]`` and ``q' = [-2q, 0, 1]`` behind a secret
matrix so that the ciphertext inner product is ``dist'(p, q) = |p|^2 - 2 p.q``.
If the server learns any of the leak functions below, a handful of known
plaintexts turns every leak into a linear equation in the query, and the
recovered queries in turn expose the rest of the database.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .common import DimensionError, gen_invertible_matrix, make_rng

MAX_RESAMPLES = 10
# systems worse than this are treated as singular and resampled
MAX_SYSTEM_CONDITION = 1e12


class Variant(str, enum.Enum):
    LINEAR = "linear"
    EXP = "exp"
    LOG = "log"
    SQUARE = "square"


class SingularSystemError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class AspeKey:
    m: np.ndarray
    m_inv: np.ndarray
    variant: Variant
    r1: float
    r2: float
    r3: float = 0.0

    @property
    def d(self) -> int:
        return self.m.shape[0] - 2

    @property
    def scalars(self) -> tuple[float, float, float]:
        return self.r1, self.r2, self.r3


@dataclass(frozen=True)
class LeakRecord:
    db_index: int
    query_index: int
    value: float


def aspe_keygen(d: int, variant: Variant | str = Variant.LINEAR, seed=None, data_bound: float = 1.0) -> AspeKey:
    """Key for vectors with coordinates in ``[-data_bound, data_bound]``.

    For ``log`` and ``square`` the offset ``r2`` is drawn above ``2 d B^2`` so
    ``r1 dist' + r2`` (resp. ``dist' + r2``) stays positive on that box.
    """
    variant = Variant(variant)
    rng = make_rng(seed)
    m, m_inv = gen_invertible_matrix(d + 2, rng)
    r1 = float(rng.uniform(0.5, 2.0))
    floor = 2.0 * d * data_bound**2
    if variant is Variant.LOG:
        r2 = r1 * floor + float(rng.uniform(0.5, 2.0))
    elif variant is Variant.SQUARE:
        r2 = floor + float(rng.uniform(0.5, 2.0))
    elif variant is Variant.EXP:
        # keep exponents moderate so the leak is well represented in doubles
        r1 = float(rng.uniform(0.05, 0.2))
        r2 = float(rng.uniform(-1.0, 1.0))
    else:
        r2 = float(rng.uniform(-2.0, 2.0))
    r3 = float(rng.uniform(-2.0, 2.0)) if variant is Variant.SQUARE else 0.0
    return AspeKey(m=m, m_inv=m_inv, variant=variant, r1=r1, r2=r2, r3=r3)


def _check(v, d: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (d,):
        raise DimensionError(f"expected dim {d}, got shape {v.shape}")
    return v


def aspe_encrypt(p, key: AspeKey) -> np.ndarray:
    p = _check(p, key.d)
    return key.m.T @ np.concatenate([p, [1.0, p @ p]])


def aspe_trapgen(q, key: AspeKey) -> np.ndarray:
    q = _check(q, key.d)
    return key.m_inv @ np.concatenate([-2.0 * q, [0.0, 1.0]])


def dist_prime(p, q) -> float:
    p, q = np.asarray(p, np.float64), np.asarray(q, np.float64)
    return float(p @ p - 2.0 * p @ q)


def leak(variant: Variant | str, p, q, scalars) -> float:
    variant = Variant(variant)
    r1, r2, *rest = scalars
    x = dist_prime(p, q)
    if variant is Variant.LINEAR:
        return r1 * x + r2
    if variant is Variant.EXP:
        return float(np.exp(r1 * x + r2))
    if variant is Variant.LOG:
        arg = r1 * x + r2
        if arg <= 0:
            raise ValueError(f"logarithm argument {arg:g} is not positive")
        return float(np.log(arg))
    r3 = rest[0] if rest else 0.0
    return r1 * (x + r2) ** 2 + r3


def _linearize(variant: Variant, values: np.ndarray) -> np.ndarray:
    """Map leaks back to values that are linear in the unknowns."""
    if variant is Variant.EXP:
        if np.any(values <= 0):
            raise ValueError("exponential leaks must be positive")
        return np.log(values)
    if variant is Variant.LOG:
        return np.exp(values)
    return values


def _pairs(d: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(d, k=1)


def square_basis_dim(d: int) -> int:
    return (d * d + 5 * d + 6) // 2


def expand_square_basis(p) -> np.ndarray:
    """Collapsed monomial basis of ``p`` for the squared leak.

    Layout ``[A^2, A p, A, 4 p^2, 8 p_i p_j (i<j), -4 p, 1]`` with ``A = |p|^2``.
    """
    p = np.asarray(p, dtype=np.float64)
    a = p @ p
    i, j = _pairs(p.shape[0])
    return np.concatenate([[a * a], a * p, [a], 4.0 * p * p, 8.0 * p[i] * p[j], -4.0 * p, [1.0]])


def expand_square_query(q, scalars) -> np.ndarray:
    """Query-side partner of :func:`expand_square_basis`."""
    q = np.asarray(q, dtype=np.float64)
    r1, r2, r3 = scalars
    i, j = _pairs(q.shape[0])
    return np.concatenate([
        [r1], -4.0 * r1 * q, [2.0 * r1 * r2], r1 * q * q, r1 * q[i] * q[j], r1 * r2 * q, [r1 * r2 * r2 + r3],
    ])


def coefficient_rows(variant: Variant | str, plaintexts) -> np.ndarray:
    """Coefficient matrix whose rows are the augmented known plaintexts."""
    variant = Variant(variant)
    pts = np.atleast_2d(np.asarray(plaintexts, dtype=np.float64))
    if variant is Variant.SQUARE:
        return np.array([expand_square_basis(p) for p in pts])
    norms = np.einsum("ij,ij->i", pts, pts)
    return np.hstack([-2.0 * pts, norms[:, None], np.ones((len(pts), 1))])


def required_leaks(variant: Variant | str, d: int) -> int:
    return square_basis_dim(d) if Variant(variant) is Variant.SQUARE else d + 2


@dataclass
class Recovery:
    vector: np.ndarray
    solution: np.ndarray
    condition: float


def _solve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"need a square system, got {a.shape}")
    cond = float(np.linalg.cond(a))
    if not np.isfinite(cond) or cond > MAX_SYSTEM_CONDITION:
        raise SingularSystemError(f"coefficient matrix condition {cond:.3g}")
    try:
        return np.linalg.solve(a, b), cond
    except np.linalg.LinAlgError as e:
        raise SingularSystemError(str(e)) from e


def _solve_square(a: np.ndarray, b: np.ndarray, d: int) -> tuple[np.ndarray, float]:
    """Min-norm solve of the square-leak system.

    The ``A`` column equals the sum of the ``4 p_i^2`` columns divided by 4, so
    the matrix always has exactly one null direction. That direction only
    touches the ``A`` and ``q_i^2`` slots, so ``r1`` and ``q`` stay identifiable.
    The reported condition is over the non-null part of the spectrum.
    """
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"need a square system, got {a.shape}")
    sv = np.linalg.svd(a, compute_uv=False)
    cond = float(sv[0] / sv[-2]) if sv[-2] > 0 else np.inf
    if not np.isfinite(cond) or cond > MAX_SYSTEM_CONDITION:
        raise SingularSystemError(f"coefficient matrix condition {cond:.3g}")
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    return x, cond


def recover_query(variant: Variant | str, leaked_db, leaks) -> Recovery:
    """Solve for the hidden query from leaks against known plaintexts.

    ``solution`` is ``[r1 q, r1, r2]`` for the linear family, and the
    expanded query vector for ``square``.
    """
    variant = Variant(variant)
    pts = np.atleast_2d(np.asarray(leaked_db, dtype=np.float64))
    d = pts.shape[1]
    need = required_leaks(variant, d)
    if pts.shape[0] != need:
        raise ValueError(f"{variant.value} recovery at d={d} needs {need} plaintexts, got {pts.shape[0]}")
    b = _linearize(variant, np.asarray([getattr(v, "value", v) for v in leaks], dtype=np.float64))
    if variant is not Variant.SQUARE:
        x, cond = _solve(coefficient_rows(variant, pts), b)
        return Recovery(vector=x[:d] / x[d], solution=x, condition=cond)
    x, cond = _solve_square(coefficient_rows(variant, pts), b, d)
    q = x[1:d + 1] / (-4.0 * x[0])
    # undo the null-space component: it shifts the A slot by c and each q_i^2 slot by -c/4
    sq = slice(d + 2, 2 * d + 2)
    c = -4.0 * float(np.mean(x[sq] - x[0] * q * q))
    x = x.copy()
    x[d + 1] -= c
    x[sq] += c / 4.0
    return Recovery(vector=q, solution=x, condition=cond)


def recovered_scalars(variant: Variant | str, solution: np.ndarray, d: int) -> tuple[float, float, float]:
    """Key scalars exposed as a by-product of query recovery."""
    if Variant(variant) is Variant.SQUARE:
        r1 = solution[0]
        r2 = solution[d + 1] / (2.0 * r1)
        return float(r1), float(r2), float(solution[-1] - r1 * r2 * r2)
    return float(solution[d]), float(solution[d + 1]), 0.0


def recover_database_vector(variant: Variant | str, recovered: list[Recovery], leaks) -> Recovery:
    """Recover a database vector from its leaks against recovered queries.

    The recovered scalars turn each leak into ``dist'(p, q_j)``, which is
    linear in ``[p, |p|^2]``; the ``d+2`` equations are solved in the least
    squares sense (one more than the ``d+1`` unknowns).
    """
    variant = Variant(variant)
    if not recovered:
        raise ValueError("need recovered queries")
    d = recovered[0].vector.shape[0]
    if len(recovered) < d + 1:
        raise ValueError(f"need at least {d + 1} recovered queries, got {len(recovered)}")
    vals = np.asarray([getattr(v, "value", v) for v in leaks], dtype=np.float64)
    dists = np.empty(len(recovered))
    for j, (rec, val) in enumerate(zip(recovered, vals)):
        r1, r2, r3 = recovered_scalars(variant, rec.solution, d)
        if variant is Variant.SQUARE:
            # the key keeps dist' + r2 positive, so the positive root is the right one
            dists[j] = np.sqrt(max((val - r3) / r1, 0.0)) - r2
        else:
            dists[j] = (_linearize(variant, np.array([val]))[0] - r2) / r1
    qs = np.array([r.vector for r in recovered])
    a = np.hstack([-2.0 * qs, np.ones((len(qs), 1))])
    cond = float(np.linalg.cond(a))
    if not np.isfinite(cond) or cond > MAX_SYSTEM_CONDITION:
        raise SingularSystemError(f"query matrix condition {cond:.3g}")
    y, *_ = np.linalg.lstsq(a, dists, rcond=None)
    return Recovery(vector=y[:d], solution=y, condition=cond)


def rel_error(est, truth) -> float:
    est, truth = np.asarray(est), np.asarray(truth)
    return float(np.linalg.norm(est - truth) / max(np.linalg.norm(truth), 1e-300))


@dataclass
class AttackOutcome:
    variant: Variant
    d: int
    seed: int
    query_error: float
    db_error: float
    condition: float
    resamples: int
    elapsed: float
    ok: bool
    notes: list[str] = field(default_factory=list)

    def csv_row(self) -> str:
        return (f"{self.variant.value},{self.d},{self.seed},{self.query_error:.3e},{self.db_error:.3e},"
                f"{self.condition:.3e},{self.resamples},{self.elapsed:.6f}")

    CSV_HEADER = "variant,dim,seed,query_rel_error,db_rel_error,condition,resamples,seconds"


def run_attack(variant: Variant | str, d: int, seed: int = 0, noise: float = 0.0) -> AttackOutcome:
    """One full known-plaintext attack instance.

    Leaks ``required_leaks`` plaintexts, recovers ``d+2`` queries from them, and
    then recovers a fresh database vector outside the leaked set. Degenerate
    draws are resampled up to ``MAX_RESAMPLES`` times.
    """
    variant = Variant(variant)
    rng = make_rng(seed)
    key = aspe_keygen(d, variant, rng)
    need = required_leaks(variant, d)
    t0 = time.perf_counter()
    last_err = None
    for attempt in range(MAX_RESAMPLES + 1):
        leaked = rng.uniform(-1.0, 1.0, size=(need, d))
        queries = rng.uniform(-1.0, 1.0, size=(d + 2, d))
        target = rng.uniform(-1.0, 1.0, size=d)
        try:
            recs = []
            for q in queries:
                vals = np.array([leak(variant, p, q, key.scalars) for p in leaked])
                vals = vals + noise * rng.standard_normal(vals.shape)
                recs.append(recover_query(variant, leaked, vals))
            tvals = np.array([leak(variant, target, q, key.scalars) for q in queries])
            db = recover_database_vector(variant, recs, tvals)
        except SingularSystemError as e:
            last_err = e
            continue
        q_err = max(rel_error(r.vector, q) for r, q in zip(recs, queries))
        p_err = rel_error(db.vector, target)
        cond = max(max(r.condition for r in recs), db.condition)
        return AttackOutcome(variant, d, seed, q_err, p_err, cond, attempt, time.perf_counter() - t0, True)
    return AttackOutcome(variant, d, seed, np.inf, np.inf, np.inf, MAX_RESAMPLES, time.perf_counter() - t0,
                         False, [str(last_err)])
