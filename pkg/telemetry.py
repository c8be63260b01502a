"""
テレメトリ共通型
Telemetry core types

ノード単位のテレメトリレコード、ラベル、データセット分割と例外クラスを定義します。
Records, labels, per-node dataset splits and the shared exception hierarchy.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_FEATURE_COUNT = 166
AGGREGATION_INTERVAL_SECONDS = 300


class TelemetryError(Exception):
    """本ツールの例外の基底クラス"""


class DataError(TelemetryError, ValueError):
    """入力データの形式・整合性エラー"""


class ConfigError(TelemetryError, ValueError):
    """設定ファイル・コマンドライン・環境変数の値のエラー"""


class Label(Enum):
    """レコードの正解ラベル（評価・分割専用、学習には使わない）"""

    NORMAL = "normal"
    ANOMALY_POWERSAVE = "powersave"
    ANOMALY_PERFORMANCE = "performance"
    UNLABELED = "unlabeled"

    @classmethod
    def from_csv(cls, value: str) -> "Label":
        """CSVのラベル表記（normal|powersave|performance|unlabeled）を変換"""
        try:
            return cls(value.strip().lower())
        except ValueError:
            raise DataError(f"不明なラベルです: {value!r}") from None

    @property
    def csv_value(self) -> str:
        return self.value

    @property
    def is_anomaly(self) -> bool:
        return self in (Label.ANOMALY_POWERSAVE, Label.ANOMALY_PERFORMANCE)


def as_feature_vector(values: Sequence[float]) -> np.ndarray:
    """読み取り専用の float64 ベクトルに変換"""
    vector = np.array(values, dtype=np.float64)
    if vector.ndim != 1:
        raise DataError(f"特徴量ベクトルは1次元である必要があります: shape={vector.shape}")
    vector.setflags(write=False)
    return vector


@dataclass(frozen=True, eq=False)
class TelemetryRecord:
    """1ノード・1集約区間（5分）分の特徴量ベクトル"""

    node_id: str
    timestamp: int
    features: np.ndarray
    label: Label = Label.UNLABELED
    idle: bool = False

    def __post_init__(self):
        if not isinstance(self.features, np.ndarray) or self.features.flags.writeable:
            object.__setattr__(self, "features", as_feature_vector(self.features))

    @property
    def key(self) -> Tuple[str, int]:
        return (self.node_id, self.timestamp)

    @property
    def feature_count(self) -> int:
        return int(self.features.shape[0])

    def with_features(self, values: Sequence[float]) -> "TelemetryRecord":
        return TelemetryRecord(self.node_id, self.timestamp, as_feature_vector(values),
                               self.label, self.idle)

    def with_label(self, label: Label) -> "TelemetryRecord":
        return TelemetryRecord(self.node_id, self.timestamp, self.features, label, self.idle)


def records_matrix(records: Sequence[TelemetryRecord], feature_count: Optional[int] = None) -> np.ndarray:
    """レコード列を N×F 行列に変換"""
    if not records:
        return np.zeros((0, feature_count or 0), dtype=np.float64)
    return np.vstack([record.features for record in records])


@dataclass(frozen=True)
class NodeDataset:
    """ノード単位のデータセット（D_Train / D_Test^N / D_Test^A）"""

    node_id: str
    train: Tuple[TelemetryRecord, ...]
    test_normal: Tuple[TelemetryRecord, ...]
    test_anomaly: Tuple[TelemetryRecord, ...]
    feature_names: Tuple[str, ...]
    norm: Optional[Any] = None  # dataset_pipeline.NormalizationParams
    unlabeled: Tuple[TelemetryRecord, ...] = field(default_factory=tuple)

    @property
    def feature_count(self) -> int:
        return len(self.feature_names)

    def all_records(self) -> List[TelemetryRecord]:
        """分割済みの全レコードをタイムスタンプ順で返す"""
        merged = list(self.train) + list(self.test_normal) + list(self.test_anomaly)
        return sorted(merged, key=lambda record: record.timestamp)


@dataclass(frozen=True)
class Violation:
    """validate_dataset が返す不変条件違反"""

    split: str
    record: Optional[Tuple[str, int]]
    rule: str

    def __str__(self):
        where = f"{self.record[0]}@{self.record[1]}" if self.record else "-"
        return f"[{self.split}] {where}: {self.rule}"


def validate_dataset(ds: NodeDataset) -> List[Violation]:
    """NodeDataset の不変条件を検査し、違反のリストを返す（違反なしなら空）"""
    violations: List[Violation] = []
    width = len(ds.feature_names)

    def check(split: str, records: Sequence[TelemetryRecord], expect_anomaly: bool):
        for record in records:
            if record.node_id != ds.node_id:
                violations.append(Violation(split, record.key, f"node_id が {ds.node_id} と一致しません"))
            if record.idle:
                violations.append(Violation(split, record.key, "アイドル状態のレコードが含まれています"))
            if expect_anomaly and not record.label.is_anomaly:
                violations.append(Violation(split, record.key,
                                            f"異常ラベルが必要ですが {record.label.csv_value} です"))
            if not expect_anomaly and record.label is not Label.NORMAL:
                violations.append(Violation(split, record.key,
                                            f"normal ラベルが必要ですが {record.label.csv_value} です"))
            if record.feature_count != width:
                violations.append(Violation(split, record.key,
                                            f"特徴量数 {record.feature_count} が宣言値 {width} と異なります"))

    check("train", ds.train, expect_anomaly=False)
    check("test_normal", ds.test_normal, expect_anomaly=False)
    check("test_anomaly", ds.test_anomaly, expect_anomaly=True)

    train_keys = {record.key for record in ds.train}
    for record in ds.test_normal:
        if record.key in train_keys:
            violations.append(Violation("test_normal", record.key, "train と test_normal が重複しています"))

    return violations
