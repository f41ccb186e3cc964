import math

import numpy as np
import pytest

from utils.data_io import SampleRecord
from utils.error_handler import DimensionError, EvaluationError, FormatError
from utils.retrieval_eval import (EvalReport, average_precision, build_index, evaluate, format_report,
                                  fuse_features, parse_report, rank_gallery)
from utils.tensor_core import Tensor


def brute_force(q_feat, q_pid, q_cam, g_feat, g_pid, g_cam, g_junk, max_rank):
    """Per-query loops over python lists: AP and CMC the slow way"""
    aps, hits = [], [0] * max_rank
    for qf, pid, cam in zip(q_feat, q_pid, q_cam):
        dist = [math.sqrt(sum((a - b) ** 2 for a, b in zip(qf, gf))) for gf in g_feat]
        order = sorted(range(len(g_feat)), key=lambda j: (dist[j], j))
        ranked = [j for j in order if not g_junk[j] and not (g_pid[j] == pid and g_cam[j] == cam)]
        flags = [g_pid[j] == pid for j in ranked]
        if not any(flags):
            continue
        found, precisions = 0, []
        for k, flag in enumerate(flags, start=1):
            if flag:
                found += 1
                precisions.append(found / k)
        aps.append(sum(precisions) / len(precisions))
        first = flags.index(True)
        for k in range(first, max_rank):
            hits[k] += 1
    return sum(aps) / len(aps), [h / len(aps) for h in hits]


def index_for(features, pids, cams, junk=None):
    junk = junk if junk is not None else [False] * len(pids)
    records = [SampleRecord(f'x{i}', int(p), int(c), 'gallery', bool(j))
               for i, (p, c, j) in enumerate(zip(pids, cams, junk))]
    return build_index([Tensor(f) for f in features], records)


class TestAveragePrecision:
    def test_hand_values(self):
        assert average_precision(np.array([True, False, True])) == pytest.approx((1 + 2 / 3) / 2)
        assert average_precision(np.array([False, True])) == pytest.approx(0.5)
        assert average_precision(np.array([False, False])) == 0.0


class TestEvaluate:
    def test_matches_brute_force(self):
        for trial in range(20):
            rng = np.random.default_rng(trial)
            n_q, n_g = 50, 200
            q_feat, g_feat = rng.normal(size=(n_q, 4)), rng.normal(size=(n_g, 4))
            q_pid, g_pid = rng.integers(0, 10, n_q), rng.integers(0, 10, n_g)
            q_cam, g_cam = rng.integers(0, 3, n_q), rng.integers(0, 3, n_g)
            g_junk = rng.uniform(size=n_g) < 0.1
            report = evaluate(index_for(q_feat, q_pid, q_cam), index_for(g_feat, g_pid, g_cam, g_junk), (1, 5, 10))
            mAP, cmc = brute_force(q_feat.tolist(), q_pid.tolist(), q_cam.tolist(), g_feat.tolist(),
                                   g_pid.tolist(), g_cam.tolist(), g_junk.tolist(), 10)
            assert report.mAP == pytest.approx(mAP, abs=1e-12)
            np.testing.assert_allclose(report.cmc, cmc, rtol=0, atol=1e-12)

    def test_gallery_order_and_feature_scale_do_not_matter(self):
        rng = np.random.default_rng(42)
        n_q, n_g = 30, 120
        q_feat, g_feat = rng.normal(size=(n_q, 4)), rng.normal(size=(n_g, 4))
        q_pid, g_pid = rng.integers(0, 8, n_q), rng.integers(0, 8, n_g)
        q_cam, g_cam = rng.integers(0, 3, n_q), rng.integers(0, 3, n_g)
        g_junk = rng.uniform(size=n_g) < 0.1
        queries = index_for(q_feat, q_pid, q_cam)
        base = evaluate(queries, index_for(g_feat, g_pid, g_cam, g_junk), (1, 5, 10))

        perm = rng.permutation(n_g)
        shuffled = evaluate(queries, index_for(g_feat[perm], g_pid[perm], g_cam[perm], g_junk[perm]), (1, 5, 10))
        assert shuffled.mAP == pytest.approx(base.mAP, abs=1e-12)
        np.testing.assert_allclose(shuffled.cmc, base.cmc, rtol=0, atol=1e-12)

        scaled = evaluate(index_for(q_feat * 3.5, q_pid, q_cam),
                          index_for(g_feat * 3.5, g_pid, g_cam, g_junk), (1, 5, 10))
        assert scaled.mAP == pytest.approx(base.mAP, abs=1e-12)
        np.testing.assert_allclose(scaled.cmc, base.cmc, rtol=0, atol=1e-12)

    def test_same_camera_matches_are_ignored(self):
        queries = index_for([[0.0]], [1], [0])
        gallery = index_for([[0.0], [1.0], [2.0]], [1, 2, 1], [0, 0, 1])
        report = evaluate(queries, gallery, (1, 2))
        assert report.cmc == [0.0, 1.0]
        assert report.mAP == pytest.approx(0.5)

    def test_junk_is_ignored(self):
        queries = index_for([[0.0]], [1], [0])
        gallery = index_for([[0.0], [1.0]], [-1, 1], [1, 1], junk=[True, False])
        assert evaluate(queries, gallery, (1,)).cmc == [1.0]

    def test_queries_without_match_are_skipped(self):
        queries = index_for([[0.0], [1.0]], [1, 3], [0, 0])
        gallery = index_for([[0.0]], [1], [1])
        report = evaluate(queries, gallery, (1,))
        assert report.evaluated == 1 and report.skipped == 1

    def test_everything_skipped(self):
        with pytest.raises(EvaluationError):
            evaluate(index_for([[0.0]], [1], [0]), index_for([[0.0]], [2], [1]), (1,))

    def test_summary(self):
        report = EvalReport(mAP=0.5, cmc=[0.25, 0.5, 1.0], ranks=[1, 3])
        assert report.summary() == {'mAP': 0.5, 'rank1': 0.25, 'rank3': 1.0}
        assert report.rank(2) == 0.5


class TestRanking:
    def test_ties_keep_gallery_order(self):
        index = index_for([[1.0], [0.0], [-1.0]], [0, 1, 2], [0, 0, 0])
        np.testing.assert_array_equal(rank_gallery(Tensor([0.0]), index), [1, 0, 2])

    def test_dimension_checked(self):
        with pytest.raises(DimensionError):
            rank_gallery(Tensor([0.0, 1.0]), index_for([[0.0]], [0], [0]))

    def test_index_needs_matching_records(self):
        with pytest.raises(DimensionError):
            build_index([Tensor([0.0])], [])


class TestFusion:
    def test_halves_normalized_separately(self):
        fused = fuse_features(Tensor([3.0, 4.0]), Tensor([0.0, 2.0]))
        np.testing.assert_allclose(fused.data, [0.6, 0.8, 0.0, 1.0])

    def test_zero_half_stays_zero(self):
        fused = fuse_features(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))
        np.testing.assert_array_equal(fused.data, [0.0, 0.0, 1.0, 0.0])

    def test_single_branch(self):
        np.testing.assert_allclose(fuse_features(None, Tensor([2.0, 0.0])).data, [1.0, 0.0])

    def test_errors(self):
        with pytest.raises(DimensionError):
            fuse_features(None, None)
        with pytest.raises(DimensionError):
            fuse_features(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestReportDocument:
    def test_format_then_parse(self):
        report = EvalReport(mAP=0.8125, cmc=[0.75, 0.875, 1.0], ranks=[1, 3], evaluated=8, skipped=1)
        text = format_report(report)
        assert text.startswith('mAP: 0.8125\nqueries_evaluated: 8\nqueries_skipped: 1\nrank1: 0.75\nrank3: 1.0\n')
        parsed = parse_report(text)
        assert (parsed.mAP, parsed.cmc, parsed.ranks) == (0.8125, [0.75, 0.875, 1.0], [1, 3])
        assert (parsed.evaluated, parsed.skipped) == (8, 1)

    def test_malformed(self):
        with pytest.raises(FormatError):
            parse_report('rank1: 0.5\n')
