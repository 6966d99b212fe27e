import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirkit.errors import DataFormatError, NumericsError
from cirkit.store import (
    cosine_scores,
    load_embeddings,
    make_matrix,
    normalize_rows,
    rank_rows,
    write_embeddings,
)

from conftest import unit_rows


def test_round_trip_basic(tmp_path, rng):
    m = make_matrix(["a", "b", "c"], rng.standard_normal((3, 4)).astype(np.float32))
    path = tmp_path / "t.cire"
    write_embeddings(m, path)
    loaded = load_embeddings(path)
    assert loaded.ids == ("a", "b", "c")
    assert loaded.dim == 4
    assert not loaded.normalized
    np.testing.assert_array_equal(loaded.data, m.data)


def test_round_trip_byte_identical(tmp_path, rng):
    m = make_matrix([f"id_{i}" for i in range(7)],
                    rng.standard_normal((7, 5)).astype(np.float32))
    p1, p2 = tmp_path / "a.cire", tmp_path / "b.cire"
    write_embeddings(m, p1)
    write_embeddings(load_embeddings(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(0, 6),
    d=st.integers(1, 5),
    seed=st.integers(0, 2**16),
    suffix=st.lists(st.text(min_size=0, max_size=8), min_size=6, max_size=6,
                    unique=True),
)
def test_round_trip_property(tmp_path_factory, n, d, seed, suffix):
    rng = np.random.default_rng(seed)
    ids = [f"{i}_{suffix[i]}" for i in range(n)]
    m = make_matrix(ids, rng.standard_normal((n, d)).astype(np.float32))
    path = tmp_path_factory.mktemp("roundtrip") / "m.cire"
    write_embeddings(m, path)
    back = load_embeddings(path)
    assert back.ids == m.ids
    np.testing.assert_array_equal(back.data, m.data)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.cire"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(DataFormatError, match="magic"):
        load_embeddings(path)


def test_load_rejects_version_mismatch(tmp_path, rng):
    m = make_matrix(["a"], rng.standard_normal((1, 2)).astype(np.float32))
    path = tmp_path / "v.cire"
    write_embeddings(m, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9  # version u16 little-endian low byte
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="version"):
        load_embeddings(path)


def test_load_rejects_truncated_payload(tmp_path, rng):
    m = make_matrix([f"i{k}" for k in range(100)],
                    rng.standard_normal((100, 3)).astype(np.float32))
    path = tmp_path / "t.cire"
    write_embeddings(m, path)
    raw = path.read_bytes()
    # keep the header but drop one row's worth of floats and the id table
    path.write_bytes(raw[: 28 + 99 * 3 * 4])
    with pytest.raises(DataFormatError, match="truncat"):
        load_embeddings(path)


def test_load_rejects_duplicate_ids(tmp_path, rng):
    m = make_matrix(["img_7", "img_8"], rng.standard_normal((2, 2)).astype(np.float32))
    path = tmp_path / "d.cire"
    write_embeddings(m, path)
    raw = bytearray(path.read_bytes())
    # rewrite the second id to duplicate the first (same length)
    raw[-5:] = b"img_7"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="duplicate id 'img_7'"):
        load_embeddings(path)


def test_load_rejects_non_finite(tmp_path):
    data = np.array([[1.0, np.nan]], dtype=np.float32)
    with pytest.raises(DataFormatError, match="non-finite"):
        make_matrix(["a"], data)


def test_make_matrix_rejects_id_count_mismatch(rng):
    with pytest.raises(DataFormatError):
        make_matrix(["a"], rng.standard_normal((2, 2)).astype(np.float32))


def test_normalize_345_triangle():
    m = make_matrix(["a"], np.array([[3.0, 4.0]], dtype=np.float32))
    out = normalize_rows(m)
    np.testing.assert_allclose(out.data[0], [0.6, 0.8], atol=1e-7)
    assert out.normalized


def test_normalize_unit_row_unchanged():
    m = make_matrix(["a"], np.array([[1.0, 0.0]], dtype=np.float32))
    np.testing.assert_array_equal(normalize_rows(m).data[0], [1.0, 0.0])


def test_normalize_zero_row_names_id():
    m = make_matrix(["good", "degenerate"],
                    np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32))
    with pytest.raises(NumericsError, match="degenerate"):
        normalize_rows(m)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 8), d=st.integers(1, 6), seed=st.integers(0, 2**16))
def test_normalize_idempotent(n, d, seed):
    rng = np.random.default_rng(seed)
    m = make_matrix([str(i) for i in range(n)],
                    (rng.standard_normal((n, d)) + 0.1).astype(np.float32))
    once = normalize_rows(m)
    twice = normalize_rows(once)
    assert np.abs(once.data - twice.data).max() <= 1e-7


def test_cosine_self_similarity(small_corpus):
    block = cosine_scores(small_corpus.data[3], small_corpus)
    assert abs(block.scores[0, 3] - 1.0) <= 1e-6


def test_cosine_orthogonal():
    m = make_matrix(["x", "y"], np.eye(2, dtype=np.float32), normalized=True)
    block = cosine_scores(np.array([[1.0, 0.0]], dtype=np.float32), m)
    assert abs(block.scores[0, 1]) <= 1e-6


def test_cosine_chunk_invariance_vs_naive(rng):
    corpus = make_matrix([f"c{i}" for i in range(16)],
                         unit_rows(rng, 16, 8).astype(np.float32), normalized=True)
    queries = unit_rows(rng, 4, 8).astype(np.float32)
    naive = np.zeros((4, 16))
    for i in range(4):
        for j in range(16):
            naive[i, j] = sum(float(queries[i, k]) * float(corpus.data[j, k])
                              for k in range(8))
    full = cosine_scores(queries, corpus, chunk=16).scores
    small = cosine_scores(queries, corpus, chunk=3).scores
    np.testing.assert_allclose(full, naive, atol=1e-6)
    np.testing.assert_allclose(small, full, atol=1e-7)
    assert np.abs(full).max() <= 1 + 1e-5


def test_cosine_dim_mismatch(small_corpus):
    with pytest.raises(DataFormatError, match="dim"):
        cosine_scores(np.zeros((1, 5), dtype=np.float32), small_corpus)


def test_rank_rows_ties_break_by_ascending_id():
    scores = np.array([[0.5, 0.5, 0.9, 0.5]])
    ids = ["d", "b", "a", "c"]
    order = rank_rows(scores, ids)[0]
    assert [ids[j] for j in order] == ["a", "b", "c", "d"]


def test_rank_cache_is_permutation(small_corpus, rng):
    queries = unit_rows(rng, 3, 8).astype(np.float32)
    block = cosine_scores(queries, small_corpus, with_ranks=True)
    for row in block.argsort_cache:
        assert sorted(row.tolist()) == list(range(16))
