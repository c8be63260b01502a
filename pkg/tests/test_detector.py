#!/usr/bin/env python3
"""検知器（パーセンタイル閾値・分類・F値・正規化誤差・閾値探索・レポート）のテスト"""

import csv
import json
import math
import os
import random
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from autoencoder import AutoencoderModel, LayerParams, TrainConfig
from dataset_pipeline import SplitSpec, build_node_dataset
from detector import (Confusion, ErrorProfile, EvaluationOptions, Threshold, Verdict, candidate_scores, classify,
                      classify_many, confusion, error_histogram, evaluate, f_score, load_thresholds,
                      make_threshold, normalized_errors, percentile, profile_errors, search_percentile,
                      select_percentile, write_histogram_csv, write_report_json, write_table1_csv,
                      write_table2_csv, write_trend_csv)
from telemetry import DataError, Label, NodeDataset, TelemetryRecord


def _profile(errors, labels=None, source="test"):
    errors = np.asarray(errors, dtype=float)
    labels = tuple(labels) if labels is not None else (Label.NORMAL,) * len(errors)
    return ErrorProfile(source, tuple(("n", i) for i in range(len(errors))), errors, labels)


def _constant_model(width, bias):
    """再構成が常に bias になるモデル（誤差 = mean|x − bias|）"""
    hidden = 10 * width
    return AutoencoderModel(LayerParams(np.zeros((hidden, width)), np.zeros(hidden)),
                            LayerParams(np.zeros((width, hidden)), np.full(width, float(bias))),
                            TrainConfig())


def _oracle_percentile(errors, n):
    ordered = sorted(errors)
    rank = math.ceil(n * len(ordered) / 100)
    return ordered[rank - 1]


class TestPercentile(unittest.TestCase):
    """nearest-rank パーセンタイル"""

    def test_uniform_ranks(self):
        self.assertEqual(percentile(list(range(1, 101)), 95), 95)
        self.assertEqual(percentile(list(range(100, 0, -1)), 1), 1)

    def test_single_element(self):
        for n in (1, 50, 99):
            self.assertEqual(percentile([0.42], n), 0.42)

    def test_matches_sort_oracle(self):
        rng = random.Random(17)
        for _ in range(1000):
            length = rng.randint(1, 5000)
            errors = [rng.random() for _ in range(length)]
            n = rng.randint(1, 99)
            self.assertEqual(percentile(errors, n), _oracle_percentile(errors, n))

    def test_empty_list(self):
        with self.assertRaises(DataError):
            percentile([], 95)

    def test_out_of_range(self):
        with self.assertRaises(ValueError):
            percentile([1.0], 100)
        with self.assertRaises(ValueError):
            percentile([1.0], 0)

    def test_monotone_in_n(self):
        errors = np.random.default_rng(3).exponential(size=333)
        thetas = [percentile(errors, n) for n in range(1, 100)]
        self.assertEqual(thetas, sorted(thetas))
        flagged = [int(np.sum(classify_many(errors, make_threshold(errors, n)))) for n in range(1, 100)]
        self.assertEqual(flagged, sorted(flagged, reverse=True))


class TestClassify(unittest.TestCase):

    def test_boundary_is_normal(self):
        th = Threshold(0.5, 95, 10)
        self.assertIs(classify(0.5, th), Verdict.NORMAL)
        self.assertIs(classify(0.5 + 1e-9, th), Verdict.ANOMALY)
        self.assertIs(classify(float(np.nextafter(0.5, 1.0)), th), Verdict.ANOMALY)
        self.assertIs(classify(float(np.nextafter(0.5, 0.0)), th), Verdict.NORMAL)

    def test_calibration_flag_count_bound(self):
        """校正集合自身の分類では N − ceil(n/100·N) 件以下しか異常にならない"""
        rng = np.random.default_rng(4)
        for size in (1, 7, 100, 1001):
            errors = rng.random(size)
            errors[: size // 3] = 0.5
            for n in (90, 95, 99):
                flagged = int(np.sum(classify_many(errors, make_threshold(errors, n))))
                self.assertLessEqual(flagged, size - math.ceil(n * size / 100))

    def test_threshold_records_calibration_size(self):
        th = make_threshold([3.0, 1.0, 2.0], 50)
        self.assertEqual((th.theta, th.percentile_n, th.calibrated_on), (2.0, 50, 3))


class TestScores(unittest.TestCase):
    """F値と混同行列"""

    def test_perfect(self):
        self.assertEqual(f_score(10, 0, 0), 1.0)

    def test_arithmetic(self):
        self.assertAlmostEqual(f_score(9, 1, 1), 0.9, places=12)

    def test_zero_precision_and_recall(self):
        self.assertEqual(f_score(0, 3, 2), 0.0)

    def test_undefined(self):
        with self.assertRaises(ValueError):
            f_score(0, 0, 0)

    def test_confusion_and_f_match_brute_force(self):
        rng = random.Random(8)
        for _ in range(100):
            size = rng.randint(1, 200)
            truth = [rng.random() < 0.3 for _ in range(size)]
            errors = [rng.random() + (0.3 if t else 0.0) for t in truth]
            theta = rng.random()
            flagged = [e > theta for e in errors]
            tp = sum(1 for t, f in zip(truth, flagged) if t and f)
            fp = sum(1 for t, f in zip(truth, flagged) if not t and f)
            tn = sum(1 for t, f in zip(truth, flagged) if not t and not f)
            fn = sum(1 for t, f in zip(truth, flagged) if t and not f)
            conf = confusion(truth, classify_many(np.array(errors), Threshold(theta, 90, size)))
            self.assertEqual(conf, Confusion(tp, fp, tn, fn))
            self.assertEqual(conf.total, size)
            for value, (a, b, c) in ((conf.f_anomaly(), (tp, fp, fn)), (conf.f_normal(), (tn, fn, fp))):
                if a + b + c == 0:
                    self.assertIsNone(value)
                    continue
                precision = a / (a + b) if a + b else 0.0
                recall = a / (a + c) if a + c else 0.0
                expected = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
                self.assertAlmostEqual(value, expected, delta=1e-12)
                self.assertTrue(0.0 <= value <= 1.0)

    def test_length_mismatch(self):
        with self.assertRaises(ValueError):
            confusion([True], [True, False])

    def test_empty_input(self):
        self.assertEqual(confusion([], []), Confusion())

    def test_single_class_inputs(self):
        self.assertEqual(confusion([False, False], [False, True]), Confusion(tp=0, fp=1, tn=1, fn=0))
        self.assertEqual(confusion([True, True], [True, True]), Confusion(tp=2, fp=0, tn=0, fn=0))


class TestNormalizedErrors(unittest.TestCase):

    def test_self_normalization(self):
        train = _profile([0.1, 0.2, 0.4])
        self.assertEqual(normalized_errors(train, train), (1.0, 1.0))

    def test_matches_brute_force(self):
        rng = random.Random(2)
        for _ in range(100):
            train = [rng.random() + 0.01 for _ in range(rng.randint(1, 50))]
            other = [rng.random() * 5 for _ in range(rng.randint(1, 50))]
            mae, rmse = normalized_errors(_profile(train), _profile(other))
            expected_mae = (sum(other) / len(other)) / (sum(train) / len(train))
            expected_rmse = math.sqrt(sum(v * v for v in other) / len(other)) / math.sqrt(
                sum(v * v for v in train) / len(train))
            self.assertAlmostEqual(mae, expected_mae, delta=1e-12 * max(1.0, expected_mae))
            self.assertAlmostEqual(rmse, expected_rmse, delta=1e-12 * max(1.0, expected_rmse))

    def test_zero_train_mae(self):
        with self.assertRaises(DataError):
            normalized_errors(_profile([0.0, 0.0]), _profile([0.1]))


class TestProfileErrors(unittest.TestCase):

    def test_empty(self):
        profile = profile_errors(_constant_model(2, 0.5), [])
        self.assertEqual(profile.count, 0)

    def test_exact_reconstruction(self):
        record = TelemetryRecord("n", 0, [0.5, 0.5], Label.NORMAL)
        self.assertEqual(list(profile_errors(_constant_model(2, 0.5), [record]).errors), [0.0])

    def test_mean_matches_per_record(self):
        rng = np.random.default_rng(1)
        records = [TelemetryRecord("n", t, rng.random(3), Label.NORMAL) for t in range(20)]
        model = _constant_model(3, 0.25)
        profile = profile_errors(model, records, "train")
        expected = [float(np.mean(np.abs(r.features - 0.25))) for r in records]
        self.assertAlmostEqual(profile.mean, sum(expected) / len(expected), delta=1e-12)
        self.assertEqual(profile.keys, tuple(r.key for r in records))

    def test_width_mismatch(self):
        with self.assertRaises(DataError):
            profile_errors(_constant_model(2, 0.5), [TelemetryRecord("n", 0, [0.1, 0.2, 0.3])])

    def test_summary_and_select(self):
        profile = _profile([0.1, 0.2, 0.3, 0.4], [Label.NORMAL, Label.ANOMALY_POWERSAVE] * 2)
        self.assertEqual(profile.summary((50,))["percentiles"]["50"], 0.2)
        powersave = profile.with_label(Label.ANOMALY_POWERSAVE)
        self.assertEqual(list(powersave.errors), [0.2, 0.4])
        self.assertEqual(powersave.keys, (("n", 1), ("n", 3)))


class TestSearch(unittest.TestCase):
    """生成検査法による閾値探索"""

    def setUp(self):
        self.normal = _profile(np.linspace(0.01, 1.0, 100))
        labels = [Label.NORMAL] * 50 + [Label.ANOMALY_PERFORMANCE] * 10
        errors = list(np.linspace(0.0, 0.5, 50)) + list(np.linspace(5.0, 6.0, 10))
        self.labeled = _profile(errors, labels, "calibration")

    def test_single_candidate(self):
        scores = candidate_scores(self.normal, self.labeled, [95])
        self.assertEqual(select_percentile(self.normal, scores), make_threshold(self.normal.errors, 95))

    def test_separated_ties_prefer_larger_n(self):
        scores = candidate_scores(self.normal, self.labeled, range(90, 100))
        self.assertTrue(all(v == 1.0 for v in scores.values()))
        self.assertEqual(select_percentile(self.normal, scores).percentile_n, 99)

    def test_best_candidate_wins(self):
        """θ がある n でのみ両クラスを分離できる場合はその n が選ばれる"""
        normal = _profile(list(range(1, 101)))
        labels = [Label.NORMAL] * 20 + [Label.ANOMALY_POWERSAVE] * 20
        errors = [91.0] * 20 + [92.5] * 20
        scores = candidate_scores(normal, _profile(errors, labels), range(90, 100))
        self.assertEqual(select_percentile(normal, scores).percentile_n, 92)

    def test_missing_class(self):
        with self.assertRaises(DataError):
            candidate_scores(self.normal, _profile([0.1, 0.2]), [95])

    def test_empty_candidates(self):
        with self.assertRaises(ValueError):
            candidate_scores(self.normal, self.labeled, [])

    def test_search_scores_records_with_model(self):
        model = _constant_model(2, 0.0)
        records = ([TelemetryRecord("n", t, [0.1, 0.1], Label.NORMAL) for t in range(10)]
                   + [TelemetryRecord("n", 100 + t, [0.9, 0.9], Label.ANOMALY_POWERSAVE) for t in range(5)])
        th = search_percentile(model, _profile(np.linspace(0.0, 0.2, 50)), records, [90, 95])
        self.assertEqual(th.percentile_n, 95)


def _node_dataset(node_id, seed, anomaly_shift=0.6, with_anomaly=True):
    rng = np.random.default_rng(seed)
    records = []
    for t in range(200):
        if with_anomaly and t >= 150:
            label = Label.ANOMALY_POWERSAVE if t < 185 else Label.ANOMALY_PERFORMANCE
            values = rng.uniform(0.0, 0.2, 3) + anomaly_shift
        else:
            label = Label.NORMAL
            values = rng.uniform(0.0, 0.2, 3)
        records.append(TelemetryRecord(node_id, t * 300, values, label))
    return build_node_dataset(node_id, records, ["a", "b", "c"], SplitSpec(0.8, seed))


class TestEvaluate(unittest.TestCase):
    """全ノードの評価とレポート"""

    def setUp(self):
        self.datasets = {f"node0{i}": _node_dataset(f"node0{i}", i) for i in range(3)}
        self.models = {node_id: _constant_model(3, 0.1) for node_id in self.datasets}

    def test_averages_are_means_of_nodes(self):
        report = evaluate(self.models, self.datasets)
        for key, getter in (("f_normal", lambda n: n.f_normal), ("f_anomaly", lambda n: n.f_anomaly),
                            ("normalized_mae_test_anomaly", lambda n: n.normalized["test_anomaly"][0]),
                            ("normalized_rmse_powersave", lambda n: n.normalized["powersave"][1])):
            values = [getter(node) for node in report.nodes]
            self.assertAlmostEqual(report.averages[key], sum(values) / len(values), delta=1e-12)
        self.assertEqual([n.node_id for n in report.nodes], ["node00", "node01", "node02"])

    def test_confusion_sums_to_evaluated_records(self):
        report = evaluate(self.models, self.datasets)
        for node in report.nodes:
            self.assertEqual(node.confusion.total, node.counts["evaluation"])
            self.assertEqual(node.normalized["train"], (1.0, 1.0))

    def test_separable_data_detected(self):
        report = evaluate(self.models, self.datasets)
        for node in report.nodes:
            self.assertGreater(node.f_anomaly, 0.9)
            self.assertGreater(node.normalized["test_anomaly"][0], 1.5)
            self.assertEqual(node.group, "powersave-heavy")
        self.assertEqual(report.metadata["protocol"], "held-out")

    def test_paper_protocol_scores_full_test_sets(self):
        report = evaluate(self.models, self.datasets, EvaluationOptions(paper_protocol=True))
        for node, ds in zip(report.nodes, (self.datasets[k] for k in sorted(self.datasets))):
            self.assertEqual(node.confusion.total, len(ds.test_normal) + len(ds.test_anomaly))
        self.assertEqual(report.metadata["protocol"], "paper")

    def test_held_out_split_is_disjoint(self):
        report = evaluate(self.models, self.datasets)
        for node, ds in zip(report.nodes, (self.datasets[k] for k in sorted(self.datasets))):
            self.assertEqual(node.counts["calibration"] + node.counts["evaluation"],
                             len(ds.test_normal) + len(ds.test_anomaly))

    def test_all_normal_node(self):
        """異常のないノードは n の最大候補を使い、F_A は None"""
        datasets = {"node00": _node_dataset("node00", 0, with_anomaly=False)}
        models = {"node00": _constant_model(3, 0.1)}
        report = evaluate(models, datasets)
        node = report.nodes[0]
        self.assertIsNone(node.f_anomaly)
        self.assertEqual(node.threshold.percentile_n, 99)
        self.assertEqual(node.confusion.tp + node.confusion.fn, 0)
        self.assertEqual(len(report.warnings), 2)

    def test_all_below_threshold(self):
        """すべて正常で誤差が θ 以下なら TN = N、F_N = 1"""
        train = tuple(TelemetryRecord("node00", t, [0.5, 0.5], Label.NORMAL) for t in range(20))
        test = tuple(TelemetryRecord("node00", 100 + t, [0.5, 0.5], Label.NORMAL) for t in range(10))
        ds = NodeDataset("node00", train, test, (), ("a", "b"))
        model = _constant_model(2, 0.4)
        report = evaluate({"node00": model}, {"node00": ds}, EvaluationOptions(paper_protocol=True))
        node = report.nodes[0]
        self.assertEqual(node.confusion, Confusion(tp=0, fp=0, tn=10, fn=0))
        self.assertEqual(node.f_normal, 1.0)

    def test_node_mismatch(self):
        with self.assertRaises(DataError):
            evaluate({"node00": self.models["node00"]}, self.datasets)

    def test_deterministic(self):
        first = evaluate(self.models, self.datasets).to_dict()
        second = evaluate(self.models, self.datasets).to_dict()
        self.assertEqual(first, second)


class TestReportFiles(unittest.TestCase):
    """レポートの出力ファイル"""

    def setUp(self):
        datasets = {f"node0{i}": _node_dataset(f"node0{i}", i) for i in range(2)}
        models = {node_id: _constant_model(3, 0.1) for node_id in datasets}
        self.report = evaluate(models, datasets, metadata={"seed": 42})
        self.tmpdir = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmpdir.cleanup)

    def _rows(self, path):
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.reader(f))

    def test_json_report_and_thresholds(self):
        path = os.path.join(self.tmpdir.name, "report.json")
        write_report_json(path, self.report)
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        self.assertEqual(doc["metadata"]["seed"], 42)
        self.assertEqual(doc["metadata"]["percentile_definition"], "nearest-rank")
        thresholds = load_thresholds(path)
        self.assertEqual(thresholds["node01"], self.report.nodes[1].threshold)

    def test_table1_layout(self):
        path = os.path.join(self.tmpdir.name, "table1.csv")
        write_table1_csv(path, self.report)
        rows = self._rows(path)
        self.assertEqual(rows[0][0], "node")
        self.assertIn("mae_powersave", rows[0])
        self.assertEqual([row[0] for row in rows[1:]], ["node00", "node01", "average"])

    def test_table2_layout(self):
        path = os.path.join(self.tmpdir.name, "table2.csv")
        write_table2_csv(path, self.report)
        rows = self._rows(path)
        self.assertEqual(rows[0][:6], ["node", "group", "percentile_n", "theta", "f_normal", "f_anomaly"])
        self.assertIn("f_anomaly_p97", rows[0])
        self.assertEqual(rows[-1][0], "average")

    def test_trend_sorted_by_time(self):
        path = os.path.join(self.tmpdir.name, "trend.csv")
        node = self.report.nodes[0]
        write_trend_csv(path, node)
        rows = self._rows(path)
        self.assertEqual(rows[0], ["timestamp", "error", "label"])
        timestamps = [int(row[0]) for row in rows[1:]]
        self.assertEqual(timestamps, sorted(timestamps))
        self.assertEqual(len(timestamps), sum(p.count for p in node.profiles.values()))

    def test_histogram_counts(self):
        path = os.path.join(self.tmpdir.name, "hist.csv")
        node = self.report.nodes[0]
        write_histogram_csv(path, node, bins=10)
        rows = self._rows(path)[1:]
        self.assertEqual(len(rows), 10)
        self.assertEqual(sum(int(r[2]) for r in rows), node.profiles["train"].count + node.profiles["test_normal"].count)
        self.assertEqual(sum(int(r[3]) for r in rows), node.profiles["test_anomaly"].count)

    def test_histogram_of_zero_errors(self):
        edges, normal, anomaly = error_histogram(np.zeros(3), np.zeros(0), bins=4)
        self.assertEqual(list(normal), [3, 0, 0, 0])
        self.assertEqual(edges[-1], 1.0)

    def test_broken_report(self):
        path = os.path.join(self.tmpdir.name, "broken.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write('{"nodes": [{"node_id": "node00"}]}')
        with self.assertRaises(DataError):
            load_thresholds(path)


if __name__ == '__main__':
    unittest.main()
