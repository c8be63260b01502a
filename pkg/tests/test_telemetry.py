#!/usr/bin/env python3
"""テレメトリ共通型（ラベル・レコード・データセット検査）のテスト"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from telemetry import (ConfigError, DataError, Label, NodeDataset, TelemetryError, TelemetryRecord,
                       as_feature_vector, records_matrix, validate_dataset)


def _record(timestamp, label=Label.NORMAL, node_id="node00", values=(0.1, 0.2), idle=False):
    return TelemetryRecord(node_id, timestamp, values, label, idle)


class TestLabel(unittest.TestCase):
    """ラベル表記の変換"""

    def test_from_csv_accepts_known_values(self):
        self.assertIs(Label.from_csv("normal"), Label.NORMAL)
        self.assertIs(Label.from_csv(" PowerSave "), Label.ANOMALY_POWERSAVE)
        self.assertIs(Label.from_csv("performance"), Label.ANOMALY_PERFORMANCE)
        self.assertIs(Label.from_csv("unlabeled"), Label.UNLABELED)

    def test_from_csv_rejects_unknown_value(self):
        with self.assertRaises(DataError):
            Label.from_csv("ondemand")

    def test_is_anomaly(self):
        self.assertTrue(Label.ANOMALY_POWERSAVE.is_anomaly)
        self.assertTrue(Label.ANOMALY_PERFORMANCE.is_anomaly)
        self.assertFalse(Label.NORMAL.is_anomaly)
        self.assertFalse(Label.UNLABELED.is_anomaly)


class TestTelemetryRecord(unittest.TestCase):

    def test_features_are_read_only(self):
        """特徴量ベクトルは変更できないこと"""
        record = _record(0, values=[1.0, 2.0, 3.0])
        with self.assertRaises(ValueError):
            record.features[0] = 5.0

    def test_caller_array_is_copied(self):
        values = np.array([1.0, 2.0])
        record = _record(0, values=values)
        values[0] = 9.0
        self.assertEqual(record.features[0], 1.0)

    def test_key_and_feature_count(self):
        record = _record(300, node_id="node03", values=[0.0] * 5)
        self.assertEqual(record.key, ("node03", 300))
        self.assertEqual(record.feature_count, 5)

    def test_with_label_keeps_features(self):
        record = _record(0, values=[0.5, 0.25])
        relabeled = record.with_label(Label.ANOMALY_PERFORMANCE)
        self.assertIs(relabeled.label, Label.ANOMALY_PERFORMANCE)
        np.testing.assert_array_equal(relabeled.features, record.features)

    def test_two_dimensional_vector_rejected(self):
        with self.assertRaises(DataError):
            as_feature_vector([[1.0, 2.0]])

    def test_records_matrix(self):
        matrix = records_matrix([_record(0, values=[1, 2]), _record(300, values=[3, 4])])
        np.testing.assert_array_equal(matrix, [[1.0, 2.0], [3.0, 4.0]])
        self.assertEqual(records_matrix([], feature_count=3).shape, (0, 3))


class TestExceptionHierarchy(unittest.TestCase):

    def test_errors_share_base_class(self):
        self.assertTrue(issubclass(DataError, TelemetryError))
        self.assertTrue(issubclass(ConfigError, TelemetryError))
        self.assertTrue(issubclass(DataError, ValueError))


class TestValidateDataset(unittest.TestCase):
    """NodeDataset の不変条件検査"""

    def _dataset(self, train, test_normal=(), test_anomaly=()):
        return NodeDataset("node00", tuple(train), tuple(test_normal), tuple(test_anomaly), ("a", "b"))

    def test_valid_dataset_has_no_violations(self):
        ds = self._dataset([_record(0), _record(300)], [_record(600)],
                           [_record(900, Label.ANOMALY_POWERSAVE)])
        self.assertEqual(validate_dataset(ds), [])

    def test_anomaly_in_train_is_reported(self):
        ds = self._dataset([_record(0, Label.ANOMALY_PERFORMANCE)])
        violations = validate_dataset(ds)
        self.assertEqual(len(violations), 1)
        self.assertEqual(violations[0].split, "train")

    def test_idle_record_is_reported(self):
        ds = self._dataset([_record(0, idle=True)])
        self.assertTrue(any("アイドル" in v.rule for v in validate_dataset(ds)))

    def test_normal_in_test_anomaly_is_reported(self):
        ds = self._dataset([_record(0)], test_anomaly=[_record(300)])
        self.assertEqual([v.split for v in validate_dataset(ds)], ["test_anomaly"])

    def test_train_and_test_overlap_is_reported(self):
        shared = _record(0)
        ds = self._dataset([shared], [shared])
        self.assertTrue(any("重複" in v.rule for v in validate_dataset(ds)))

    def test_width_and_node_mismatch_are_reported(self):
        ds = self._dataset([_record(0, values=(1.0, 2.0, 3.0)), _record(300, node_id="node01")])
        rules = [v.rule for v in validate_dataset(ds)]
        self.assertEqual(len(rules), 2)

    def test_all_records_sorted_by_timestamp(self):
        ds = self._dataset([_record(600), _record(0)], [_record(300)])
        self.assertEqual([r.timestamp for r in ds.all_records()], [0, 300, 600])


if __name__ == '__main__':
    unittest.main()
