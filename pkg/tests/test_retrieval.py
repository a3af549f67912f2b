import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from styleret.encoder import Backbone, BackboneConfig
from styleret.promptbank import new_bank
from styleret.prototype import PrototypeEncoder
from styleret.retrieval import (RankedResult, RetrievalError, RetrievalIndex, build_index, fuse_queries,
                                load_index, measure_latency, query, rank, recall_at_k, record_id,
                                save_index)
from styleret.synthdata import StyleTag


def random_index(rng, m, d, tie_groups=0):
    emb = rng.normal(size=(m, d))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    for g in range(tie_groups):
        emb[rng.choice(m, 3, replace=False)] = emb[g]
    ids = rng.permutation(np.arange(m, dtype=np.uint64) * 7 + 1)
    z = np.zeros(m, np.int64)
    return RetrievalIndex(ids, emb.astype(np.float32), z, z, z, z)


def brute_force(index, q, k):
    q = q.astype(np.float32)
    sims = [(math.fsum(float(a) * float(b) for a, b in zip(index.embeddings[r], q)), int(index.ids[r]))
            for r in range(len(index))]
    sims.sort(key=lambda t: (-t[0], t[1]))
    return [i for _, i in sims[:k]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_rank_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    index = random_index(rng, 40, 6, tie_groups=3)
    q = index.embeddings[rng.integers(40)] if seed % 2 else rng.normal(size=6).astype(np.float32)
    res = rank(index, q, k)
    assert res.ids == brute_force(index, q, k)
    assert all(a >= b for a, b in zip(res.scores, res.scores[1:]))


def test_full_permutation_and_k_bounds():
    index = random_index(np.random.default_rng(0), 10, 4)
    res = rank(index, index.embeddings[0], 10)
    assert sorted(res.ids) == sorted(int(i) for i in index.ids)
    with pytest.raises(RetrievalError):
        rank(index, index.embeddings[0], 0)
    with pytest.raises(RetrievalError):
        rank(index, index.embeddings[0], 11)


def test_fusion_properties():
    v = np.array([0.6, 0.8, 0.0])
    np.testing.assert_array_equal(fuse_queries([v, v]), v)
    w = np.array([0.0, 0.6, 0.8])
    np.testing.assert_array_equal(fuse_queries([w, w, w]), w)
    with pytest.raises(RetrievalError, match="degenerate"):
        fuse_queries([v, -v])
    rng = np.random.default_rng(1)
    vs = rng.normal(size=(3, 5))
    vs /= np.linalg.norm(vs, axis=1, keepdims=True)
    mean = [sum(vs[r][j] for r in range(3)) / 3 for j in range(5)]
    norm = sum(x * x for x in mean) ** 0.5
    np.testing.assert_allclose(fuse_queries(vs), np.array(mean) / norm, atol=1e-12)


def test_recall_hand_enumeration():
    rng = np.random.default_rng(5)
    results, truth = [], []
    hits1 = hits5 = 0
    for q in range(10):
        ids = [int(x) for x in rng.permutation(20)]
        target = int(rng.integers(20))
        results.append(RankedResult(ids, [0.0] * 20))
        truth.append(target)
        hits1 += ids[0] == target
        hits5 += target in ids[:5]
    assert recall_at_k(results, truth, 1) == hits1 / 10
    assert recall_at_k(results, truth, 5) == hits5 / 10
    assert recall_at_k(results, truth, 1) <= recall_at_k(results, truth, 5)
    results[0] = RankedResult([truth[0]] + [i for i in range(20) if i != truth[0]], [0.0] * 20)
    with pytest.raises(RetrievalError):
        recall_at_k(results, {}, 1)


def test_recall_perfect():
    res = [RankedResult([i, 99], [1.0, 0.0]) for i in range(4)]
    assert recall_at_k(res, list(range(4)), 1) == 1.0


@pytest.fixture(scope="module")
def models(default_dataset):
    torch.set_num_threads(1)
    bb = Backbone(BackboneConfig(layers=2, d=16, heads=2, seed=2)).freeze()
    bank = new_bank(10, 2, 2, 16, seed=1)
    enc = PrototypeEncoder(d=16, seed=3)
    return bb, bank, enc


def test_build_index_counts_norms_hash(default_dataset, models):
    bb, bank, enc = models
    index = build_index(default_dataset, bb, bank, enc)
    assert len(index) == 128
    np.testing.assert_allclose(np.linalg.norm(index.embeddings, axis=1), 1.0, atol=1e-6)
    assert build_index(default_dataset, bb, bank, enc).content_hash() == index.content_hash()
    assert not index.embeddings.flags.writeable


def test_self_retrieval(default_dataset, models):
    bb, bank, enc = models
    index = build_index(default_dataset, bb, bank, enc)
    sample = default_dataset.sample(5, 3, "natural")
    res = query(index, sample, bb, bank, enc, 3)
    assert res.ids[0] == record_id(StyleTag.NATURAL, 5, 3)
    assert res.scores[0] == pytest.approx(1.0, abs=1e-6)


def test_shared_index_restriction(default_dataset, models):
    bb, bank, enc = models
    shared = build_index(default_dataset, bb, bank, enc, styles=["natural", "sketch", "text"])
    alone = build_index(default_dataset, bb, bank, enc, styles=["natural"])
    restricted = shared.restrict(["natural"])
    q = build_index(default_dataset, bb, bank, enc, styles=["art"]).embeddings
    for row in q[:20]:
        assert rank(restricted, row, 128).ids == rank(alone, row, 128).ids


def test_provenance_pinning(default_dataset, models):
    bb, bank, enc = models
    index = build_index(default_dataset, bb, bank, enc)
    sample = default_dataset.sample(0, 0, "sketch")
    with pytest.raises(RetrievalError, match="bank"):
        query(index, sample, bb, new_bank(10, 2, 2, 16, seed=99), enc, 1)
    with pytest.raises(RetrievalError, match="backbone"):
        query(index, sample, Backbone(BackboneConfig(layers=2, d=16, heads=2, seed=7)).freeze(), bank, enc, 1)


def test_index_round_trip(tmp_path, default_dataset, models):
    bb, bank, enc = models
    index = build_index(default_dataset, bb, bank, enc, styles=["natural", "text"])
    save_index(index, tmp_path / "i.bin")
    loaded = load_index(tmp_path / "i.bin")
    assert loaded.content_hash() == index.content_hash()
    raw = (tmp_path / "i.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-1])
    with pytest.raises(RetrievalError):
        load_index(tmp_path / "bad.bin")


def test_empty_and_duplicate_errors():
    z = np.zeros(2, np.int64)
    with pytest.raises(RetrievalError):
        RetrievalIndex(np.array([1, 1], np.uint64), np.eye(2, dtype=np.float32), z, z, z, z)
    empty = RetrievalIndex(np.zeros(0, np.uint64), np.zeros((0, 2), np.float32), *(np.zeros(0),) * 4)
    with pytest.raises(RetrievalError, match="empty"):
        rank(empty, np.ones(2), 1)


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        self.t += 0.001
        return self.t


def test_latency_report(default_dataset, models):
    bb, bank, enc = models
    index = build_index(default_dataset, bb, bank, enc)
    queries = default_dataset.samples("sketch", "test")[:4]
    stats = measure_latency(index, queries, bb, bank, enc, repetitions=3, clock=FakeClock())
    for stage in ("embed", "rank"):
        assert len(stats[stage]["samples_ms"]) == 3
        assert all(stats[stage][k] >= 0 for k in ("mean_ms", "p50_ms", "p95_ms"))
    with pytest.raises(RetrievalError):
        measure_latency(index, queries, bb, bank, enc, repetitions=2)
    with pytest.raises(RetrievalError):
        measure_latency(index, [], bb, bank, enc)


def test_rank_stage_grows_with_index(default_dataset, models):
    bb, bank, enc = models
    small = build_index(default_dataset, bb, bank, enc)
    big = build_index(default_dataset, bb, bank, enc, styles=["natural", "sketch", "art", "lowres"])
    queries = default_dataset.samples("art", "test")
    a = measure_latency(small, queries, bb, bank, enc, repetitions=5)
    b = measure_latency(big, queries, bb, bank, enc, repetitions=5)
    # paired measurement; allow scheduler noise
    assert b["rank"]["p50_ms"] >= 0.8 * a["rank"]["p50_ms"]


def test_duplicate_records_tie_to_lower_id():
    rng = np.random.default_rng(9)
    index = random_index(rng, 600, 16)
    emb = index.embeddings.copy()
    emb[::7] = emb[3]
    z = np.zeros(600, np.int64)
    index = RetrievalIndex(index.ids, emb, z, z, z, z)
    dup_ids = sorted(int(i) for i in index.ids[np.all(emb == emb[3], axis=1)])
    res = rank(index, emb[3], len(dup_ids))
    assert res.ids == dup_ids
