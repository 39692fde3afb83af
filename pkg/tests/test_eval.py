"""Retrieval metrics against brute-force oracles; diagnostic dumps."""

import numpy as np
import pytest

from iaunet import data as D
from iaunet import tensorio
from iaunet.errors import ContractViolation
from iaunet.evaluate import (
    attention_iou, cmc_curve, dump_diagnostics, evaluate_identities,
    evaluate_retrieval, mean_average_precision, rank_gallery,
)
from iaunet.model import IauNet, ModelConfig, StageSpec


class TestRankGallery:
    def test_own_vector_ranks_first_across_cameras(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal((6, 4))
        q = g[2:3].copy()
        ranked = rank_gallery(q, g, [7], [0], [9, 9, 7, 8, 8, 7], [1, 0, 1, 0, 1, 0])
        assert ranked[0][0] == 2

    def test_ties_break_by_ascending_index(self):
        g = np.array([[1.0, 0.0], [0.5, 0.0], [1.0, 0.0], [2.0, 0.0]])
        q = np.array([[3.0, 0.0]])
        ranked = rank_gallery(q, g)[0]
        # all gallery entries are colinear: similarity ties everywhere
        np.testing.assert_array_equal(ranked, [0, 1, 2, 3])

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(1)
        q = rng.standard_normal((5, 6))
        g = rng.standard_normal((8, 6))
        ranked = rank_gallery(q, g)
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        gn = g / np.linalg.norm(g, axis=1, keepdims=True)
        for i in range(5):
            sims = qn[i] @ gn.T
            want = sorted(range(8), key=lambda j: (-sims[j], j))
            np.testing.assert_array_equal(ranked[i], want)

    def test_zero_norm_rejected(self):
        with pytest.raises(ContractViolation):
            rank_gallery(np.zeros((1, 3)), np.ones((2, 3)))

    def test_same_camera_same_identity_excluded(self):
        rng = np.random.default_rng(2)
        g = rng.standard_normal((4, 3))
        ranked = rank_gallery(g[:1], g, [5], [1], [5, 5, 6, 5], [1, 0, 1, 1])
        assert set(ranked[0]) == {1, 2}


class TestAveragePrecision:
    def test_perfect_retrieval(self):
        rankings = [np.array([0, 1, 2])]
        relevance = [np.array([True, True, False])]
        assert mean_average_precision(rankings, relevance) == pytest.approx(1.0)

    def test_matches_at_ranks_one_and_three(self):
        rankings = [np.arange(3)]
        relevance = [np.array([True, False, True])]
        # (1/1 + 2/3) / 2
        assert mean_average_precision(rankings, relevance) == pytest.approx(5 / 6)

    def test_single_relevant_at_rank_k(self):
        for k in (1, 2, 5):
            rel = np.zeros(6, dtype=bool)
            rel[k - 1] = True
            got = mean_average_precision([np.arange(6)], [rel])
            assert got == pytest.approx(1.0 / k)

    def test_matchless_queries_excluded_not_crashing(self, caplog):
        rankings = [np.arange(3), np.arange(3)]
        relevance = [np.array([False, False, False]), np.array([True, False, False])]
        with caplog.at_level("WARNING"):
            got = mean_average_precision(rankings, relevance)
        assert got == pytest.approx(1.0)
        assert "no relevant" in caplog.text

    def test_all_matchless_rejected(self):
        with pytest.raises(ContractViolation):
            mean_average_precision([np.arange(2)], [np.array([False, False])])


class TestCmc:
    def test_first_match_at_rank_two(self):
        got = cmc_curve([np.arange(5)], [np.array([False, True, False, False, False])], 4)
        np.testing.assert_allclose(got, [0.0, 1.0, 1.0, 1.0])

    def test_perfect_retrieval_all_ones(self):
        got = cmc_curve([np.arange(4)], [np.array([True, True, False, False])], 3)
        np.testing.assert_allclose(got, 1.0)

    def test_nondecreasing_on_random_inputs(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(3, 12))
            rankings = [rng.permutation(n) for _ in range(4)]
            relevance = [rng.random(n) < 0.3 for _ in range(4)]
            if not any(r.any() for r in relevance):
                continue
            cmc = cmc_curve(rankings, relevance, n)
            assert np.all(np.diff(cmc) >= -1e-12)
            assert np.all((0 <= cmc) & (cmc <= 1))


def _protocol_oracle(emb, ids, cams, max_k):
    """Brute-force rankings, AP, and CMC for query = camera 0."""
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    queries = [i for i in range(len(ids)) if cams[i] == 0]
    aps = []
    cmc = np.zeros(max_k)
    valid = 0
    for qi in queries:
        sims = unit[qi] @ unit.T
        order = sorted(range(len(ids)),
                       key=lambda j: (-sims[j], j))
        kept = [j for j in order if not (ids[j] == ids[qi] and cams[j] == cams[qi])]
        rel = [ids[j] == ids[qi] for j in kept]
        n_rel = sum(rel)
        if n_rel == 0:
            continue
        valid += 1
        precisions = []
        seen = 0
        for rank, r in enumerate(rel, start=1):
            if r:
                seen += 1
                precisions.append(seen / rank)
        aps.append(sum(precisions) / n_rel)
        first = rel.index(True)
        if first < max_k:
            cmc[first:] += 1
    return float(np.mean(aps)), cmc / valid


class TestProtocolOracle:
    def test_matches_brute_force_on_small_sets(self):
        rng = np.random.default_rng(4)
        for trial in range(15):
            n = int(rng.integers(8, 20))
            ids = rng.integers(0, 4, n)
            cams = rng.integers(0, 2, n)
            emb = rng.standard_normal((n, 5))
            queries = cams == 0
            try:
                res = evaluate_retrieval(emb[queries], emb, ids[queries],
                                         cams[queries], ids, cams, max_k=5)
            except ContractViolation:
                continue  # no query with a cross-camera match in this draw
            want_map, want_cmc = _protocol_oracle(emb, ids, cams, 5)
            assert res.map == pytest.approx(want_map, abs=1e-6), trial
            np.testing.assert_allclose(res.cmc, want_cmc, atol=1e-6)

    def test_camera_exclusion_never_contributes(self):
        # a same-camera duplicate of the query must not lift the metrics
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        ids = np.array([1, 1, 1, 2])
        cams = np.array([0, 0, 1, 1])
        res = evaluate_retrieval(emb[:1], emb, ids[:1], cams[:1], ids, cams, 3)
        assert 0 not in res.rankings[0] and 1 not in res.rankings[0]
        assert res.map == pytest.approx(1.0)


class TestAttentionIou:
    def test_perfect_match(self):
        rng = np.random.default_rng(5)
        m = (rng.random((1, 2, 8, 4, 3)) < 0.4).astype(np.float32)
        assert attention_iou(m, m) == pytest.approx(1.0)

    def test_disjoint_prediction_zero(self):
        gt = np.zeros((1, 1, 4, 4, 1), dtype=np.float32)
        gt[0, 0, :2] = 1.0
        pred = np.zeros_like(gt)
        pred[0, 0, 2:] = 1.0
        assert attention_iou(pred, gt) == 0.0

    def test_resizes_masks_when_needed(self):
        gt = np.ones((1, 1, 8, 8, 2), dtype=np.float32)
        pred = np.ones((1, 1, 4, 4, 2), dtype=np.float32)
        assert attention_iou(pred, gt) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def trained_free_model():
    cfg = ModelConfig(
        stages=[StageSpec(6, 1, 2, False), StageSpec(8, 2, 2, True)],
        parts=4, frames=3, embedding_dim=6, num_ids=4)
    return IauNet(cfg, seed=3)


class TestDumpDiagnostics:
    def test_files_and_shapes(self, trained_free_model, tmp_path):
        ds = D.generate_synthetic(2, 1, 3, seed=9, height=16, width=8)
        files = dump_diagnostics(trained_free_model, ds.sequences[0], tmp_path)
        names = {f.name for f in files}
        # N attention CSVs per frame, relation matrix of size TN x TN
        for t in range(3):
            assert f"stage1_attention_f{t}.csv" in names
        rel = np.loadtxt(tmp_path / "stage1_relation.csv", delimiter=",")
        assert rel.shape == (12, 12)
        att = np.loadtxt(tmp_path / "stage1_attention_f0.csv", delimiter=",")
        assert att.shape == (8 * 4, 4)
        # dumped normalized relation rows still sum to one on active entries
        sums = rel.sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-5)

    def test_raw_tensors_match_memory_bitwise(self, trained_free_model, tmp_path):
        ds = D.generate_synthetic(2, 1, 3, seed=9, height=16, width=8)
        dump_diagnostics(trained_free_model, ds.sequences[0], tmp_path)
        from iaunet.tensor import no_grad
        with no_grad():
            _, _, traces = trained_free_model.forward(ds.sequences[0].frames[None])
        disk = tensorio.read_tensor(tmp_path / "stage1_relation.iaut")
        assert disk.tobytes() == traces[1].stiau.relation_norm.data[0].astype(np.float32).tobytes()

    def test_rerun_is_idempotent(self, trained_free_model, tmp_path):
        ds = D.generate_synthetic(2, 1, 3, seed=9, height=16, width=8)
        files = dump_diagnostics(trained_free_model, ds.sequences[0], tmp_path)
        snapshot = {f: f.read_bytes() for f in files}
        dump_diagnostics(trained_free_model, ds.sequences[0], tmp_path)
        for f, blob in snapshot.items():
            assert f.read_bytes() == blob

    def test_channel_map_subsampled(self, tmp_path):
        cfg = ModelConfig(
            stages=[StageSpec(8, 1, 1, False), StageSpec(24, 2, 2, True)],
            parts=2, frames=4, embedding_dim=4, num_ids=2)
        model = IauNet(cfg, seed=1)
        ds = D.generate_synthetic(1, 1, 4, seed=2, height=16, width=8)
        dump_diagnostics(model, ds.sequences[0], tmp_path)
        c = np.loadtxt(tmp_path / "stage1_channel.csv", delimiter=",")
        assert max(c.shape) <= 64  # T*D = 96 subsampled down


class TestEvaluateIdentities:
    def test_end_to_end_on_synthetic(self, trained_free_model):
        ds = D.generate_synthetic(4, 4, 3, seed=13, height=16, width=8)
        res = evaluate_identities(trained_free_model, ds, [0, 1, 2, 3], max_k=5)
        assert 0.0 <= res.map <= 1.0
        assert np.all(np.diff(res.cmc) >= 0)
        assert len(res.rankings) == 8  # 2 camera-0 sequences per identity
