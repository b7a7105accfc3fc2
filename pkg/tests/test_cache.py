import math
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqtse.cache import EmbeddingCache, build_cache, load_cache, retrieve_batch, retrieve_top1, retrieve_topk, save_cache
from lqtse.errors import ConfigError, CorruptCacheError, DimensionError, InvalidQueryError

GOLDEN = Path(__file__).parent / "data" / "golden_cache.tec"


def brute_force(matrix32, query):
    """Pure-python double loop: float64 cosine, first maximum wins."""
    q = [float(v) for v in query]
    qn = math.sqrt(math.fsum(v * v for v in q))
    best, best_i = -2.0, -1
    for i, row in enumerate(matrix32.astype(np.float64).tolist()):
        rn = math.sqrt(math.fsum(v * v for v in row))
        s = math.fsum(a * b for a, b in zip(q, row)) / (qn * rn)
        if s > best:
            best, best_i = s, i
    return best_i, best


def near_tie_cache(rng, m, d, n_pairs):
    """Random rows plus, for each returned query, two rows whose cosines differ by 1e-7."""
    rows = rng.standard_normal((m, d))
    queries = []
    for _ in range(n_pairs):
        q = rng.standard_normal(d)
        q /= np.linalg.norm(q)
        u = rng.standard_normal(d)
        u -= (u @ q) * q
        u /= np.linalg.norm(u)
        s = 0.999
        i, j = rng.choice(m, 2, replace=False)
        rows[i] = s * q + math.sqrt(1 - s * s) * u
        s2 = s - 1e-7
        rows[j] = s2 * q + math.sqrt(1 - s2 * s2) * u
        queries.append(q)
    return rows.astype(np.float32), np.array(queries)


class DictEncoder:
    dim = 4

    def encode_text(self, caption):
        if caption == "bad":
            raise ValueError("no")
        v = np.zeros(4)
        v[len(caption) % 4] = 1.0
        return v


class TestBuild:
    def test_order_and_duplicates(self):
        cache = build_cache(["a", "bb", "a"], DictEncoder())
        assert len(cache) == 3 and cache.captions == ("a", "bb", "a")
        np.testing.assert_array_equal(cache.matrix[0], cache.matrix[2])

    def test_empty(self):
        with pytest.raises(ConfigError):
            build_cache([], DictEncoder())

    def test_encoder_failure_names_index(self):
        with pytest.raises(ValueError, match="caption 1"):
            build_cache(["a", "bad"], DictEncoder())

    def test_invariants(self):
        with pytest.raises(DimensionError):
            EmbeddingCache(np.ones((2, 4)), ("a",))
        with pytest.raises(ConfigError):
            EmbeddingCache(np.full((1, 4), np.nan), ("a",))
        cache = EmbeddingCache(np.arange(8.0).reshape(2, 4), ("a", "b"))
        np.testing.assert_allclose(cache.row_norms, np.linalg.norm(np.arange(8.0).reshape(2, 4), axis=1), atol=1e-9)
        assert not cache.matrix.flags.writeable


class TestRetrieve:
    def test_basis_example(self):
        cache = EmbeddingCache(np.eye(4), tuple("abcd"))
        idx, sim = retrieve_top1(cache, np.array([0.9, 0.1, 0, 0]))
        assert idx == 0
        assert sim == pytest.approx(0.9 / math.sqrt(0.82), abs=1e-12)

    def test_tie_lowest_index(self):
        m = np.array([[0, 1, 0], [1, 0, 0], [1, 0, 0]], dtype=np.float32)
        assert retrieve_top1(EmbeddingCache(m, ("x", "y", "z")), np.array([1.0, 0, 0]))[0] == 1

    def test_self_similarity(self):
        m = np.random.default_rng(0).standard_normal((50, 8)).astype(np.float32)
        idx, sim = retrieve_top1(EmbeddingCache(m, tuple(map(str, range(50)))), m[17].astype(np.float64))
        assert idx == 17 and abs(sim - 1.0) < 1e-9

    def test_errors(self):
        cache = EmbeddingCache(np.eye(4), tuple("abcd"))
        with pytest.raises(InvalidQueryError):
            retrieve_top1(cache, np.zeros(4))
        with pytest.raises(DimensionError):
            retrieve_top1(cache, np.ones(5))
        with pytest.raises(InvalidQueryError):
            retrieve_batch(cache, np.array([[1.0, 0, 0, np.inf]]))

    def test_brute_force_with_near_ties(self):
        rng = np.random.default_rng(1)
        m, queries = near_tie_cache(rng, 500, 16, 10)
        queries = np.vstack([queries, rng.standard_normal((20, 16))])
        cache = EmbeddingCache(m, tuple(map(str, range(len(m)))))
        idx, sim = retrieve_batch(cache, queries)
        for b, q in enumerate(queries):
            oi, os_ = brute_force(m, q)
            assert idx[b] == oi
            assert abs(sim[b] - os_) < 1e-12

    def test_batch_equals_single_and_threads(self):
        rng = np.random.default_rng(2)
        cache = EmbeddingCache(rng.standard_normal((3000, 64)).astype(np.float32), tuple(map(str, range(3000))))
        q = rng.standard_normal((200, 64))
        i1, s1 = retrieve_batch(cache, q, n_threads=1)
        i8, s8 = retrieve_batch(cache, q, n_threads=8, chunk=16)
        np.testing.assert_array_equal(i1, i8)
        np.testing.assert_array_equal(s1, s8)
        for b in range(0, 200, 37):
            assert retrieve_top1(cache, q[b]) == (i1[b], s1[b])

    def test_topk(self):
        m = np.array([[1, 0], [0, 1], [1, 1], [1, 0]], dtype=np.float32)
        out = retrieve_topk(EmbeddingCache(m, tuple("abcd")), np.array([1.0, 0.1]), 3)
        assert [i for i, _ in out] == [0, 3, 2]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 40))
    def test_property_matches_oracle(self, seed, m):
        rng = np.random.default_rng(seed)
        rows = rng.standard_normal((m, 6)).astype(np.float32)
        rows[rng.integers(m)] = rows[0]  # plant a duplicate
        q = rng.standard_normal(6)
        idx, sim = retrieve_top1(EmbeddingCache(rows, tuple(map(str, range(m)))), q)
        assert idx == brute_force(rows, q)[0]
        assert -1.0 <= sim <= 1.0


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        cache = EmbeddingCache(rng.standard_normal((20, 64)).astype(np.float32), tuple(f"cap {i} é" for i in range(20)))
        path = tmp_path / "c.tec"
        save_cache(cache, path)
        back = load_cache(path, expected_dim=64)
        assert back.matrix.tobytes() == cache.matrix.tobytes()
        assert back.captions == cache.captions
        assert not list(tmp_path.glob("*.tmp"))

    def test_golden_file(self, tmp_path):
        raw = GOLDEN.read_bytes()
        magic, version, d, m = struct.unpack_from("<4sIIQ", raw)
        assert (magic, version, d, m) == (b"TEC1", 1, 64, 3)
        cache = load_cache(GOLDEN)
        assert cache.dim == 64 and len(cache) == 3
        assert cache.captions == ("The sound of rain", "The sound of engine rumble", "café chatter ☕")
        assert cache.matrix[0, 0] == 1 and cache.matrix[1, 1] == 1
        np.testing.assert_array_equal(cache.matrix[2], np.full(64, 0.125, dtype=np.float32))
        save_cache(cache, tmp_path / "again.tec")
        assert (tmp_path / "again.tec").read_bytes() == raw

    @pytest.mark.parametrize("cut", [3, 19, 100, 800, 850])
    def test_truncation(self, tmp_path, cut):
        path = tmp_path / "t.tec"
        path.write_bytes(GOLDEN.read_bytes()[:cut])
        with pytest.raises(CorruptCacheError) as err:
            load_cache(path)
        assert err.value.offset is not None and "offset" in str(err.value)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.tec"
        path.write_bytes(b"XXXX" + GOLDEN.read_bytes()[4:])
        with pytest.raises(CorruptCacheError) as err:
            load_cache(path)
        assert err.value.offset == 0

    def test_dim_mismatch(self):
        with pytest.raises(CorruptCacheError):
            load_cache(GOLDEN, expected_dim=32)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "x.tec"
        path.write_bytes(GOLDEN.read_bytes() + b"\0")
        with pytest.raises(CorruptCacheError):
            load_cache(path)
