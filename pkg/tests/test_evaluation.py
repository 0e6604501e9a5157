import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppanns import evaluation as ev

# three 2-d records: [1, 2], [-0.5, 0], [3.25, -8]
HANDCRAFTED = bytes.fromhex(
    "02000000" "0000803f" "00000040"
    "02000000" "000000bf" "00000000"
    "02000000" "00005040" "000000c1"
)


def test_fvecs_handcrafted(tmp_path):
    path = tmp_path / "three.fvecs"
    path.write_bytes(HANDCRAFTED)
    x = ev.read_fvecs(path)
    assert x.dtype == np.float64 and x.shape == (3, 2)
    assert x.tolist() == [[1.0, 2.0], [-0.5, 0.0], [3.25, -8.0]]
    ev.write_fvecs(tmp_path / "again.fvecs", x)
    assert (tmp_path / "again.fvecs").read_bytes() == HANDCRAFTED


def test_ivecs_roundtrip(tmp_path):
    ids = np.array([[3, 1, 2], [0, 7, 9]])
    ev.write_ivecs(tmp_path / "gt.ivecs", ids)
    raw = (tmp_path / "gt.ivecs").read_bytes()
    assert raw[:16] == struct.pack("<4i", 3, 3, 1, 2)
    assert ev.read_ivecs(tmp_path / "gt.ivecs").tolist() == ids.tolist()


def test_empty_file(tmp_path):
    (tmp_path / "e.fvecs").write_bytes(b"")
    assert ev.read_fvecs(tmp_path / "e.fvecs").shape[0] == 0


@pytest.mark.parametrize("raw", [b"\x02\x00", HANDCRAFTED[:-1], b"\x00\x00\x00\x00",
                                 HANDCRAFTED[:12] + bytes.fromhex("03000000") + HANDCRAFTED[16:]])
def test_malformed(tmp_path, raw):
    (tmp_path / "bad.fvecs").write_bytes(raw)
    with pytest.raises(ValueError):
        ev.read_fvecs(tmp_path / "bad.fvecs")


def test_brute_force_small_example():
    base = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.0, 0.0]])
    assert ev.brute_force_knn(base, np.array([1.0, 0.0]), 3).tolist() == [1, 3, 0]
    with pytest.raises(ValueError):
        ev.brute_force_knn(base, np.zeros(2), 5)


@given(st.integers(0, 10_000), st.integers(1, 20))
def test_brute_force_matches_scan(seed, k):
    rng = np.random.default_rng(seed)
    base = rng.integers(-3, 4, (60, 3)).astype(float)  # many exact ties
    q = rng.integers(-3, 4, (4, 3)).astype(float)
    got = ev.brute_force_knn(base, q, k)
    for qi, row in zip(q, got):
        d = [float(np.sum((b - qi) ** 2)) for b in base]
        want = sorted(range(len(base)), key=lambda i: (d[i], i))[:k]
        assert row.tolist() == want


def test_threads_agree(rng):
    base, q = rng.standard_normal((500, 8)), rng.standard_normal((600, 8))
    a = ev.brute_force_knn(base, q, 5, threads=1)
    b = ev.brute_force_knn(base, q, 5, threads=4)
    assert np.array_equal(a, b)


def test_recall():
    assert ev.recall_at_k([1, 2, 3], [3, 4, 1], 3) == pytest.approx(2 / 3)
    assert ev.mean_recall([[1], [2]], np.array([[1], [5]]), 1) == 0.5
    with pytest.raises(ValueError):
        ev.recall_at_k([1], [1], 2)


def test_synthetic_deterministic():
    a, b = ev.synthetic(50, 4, 5, seed=9, clusters=3), ev.synthetic(50, 4, 5, seed=9, clusters=3)
    assert np.array_equal(a.base, b.base) and np.array_equal(a.queries, b.queries)
    assert a.with_ground_truth(3).ground_truth.shape == (5, 3)
