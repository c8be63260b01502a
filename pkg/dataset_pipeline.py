"""
データセット前処理パイプライン
Dataset pipeline

テレメトリCSVの読み込み、アイドル区間の除去、min-max正規化、学習/テスト分割を行います。
Ingests telemetry CSV files, removes idle records, fits and applies min-max
normalization, and builds the D_Train / D_Test^N / D_Test^A split of a node.
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from telemetry import (DataError, Label, NodeDataset, TelemetryRecord, as_feature_vector,
                       records_matrix)

logger = logging.getLogger(__name__)

HEADER_PREFIX = ("timestamp", "node_id", "idle", "label")
MIN_SPLIT_RECORDS = 10


class IngestedTelemetry(NamedTuple):
    """読み込み結果（ノードごとにタイムスタンプ昇順のレコード列）"""

    feature_names: Tuple[str, ...]
    nodes: Dict[str, List[TelemetryRecord]]


@dataclass(frozen=True)
class SplitSpec:
    """正常データの学習/テスト分割設定"""

    train_fraction: float = 0.8
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError(f"train_fraction は (0, 1) の範囲で指定してください: {self.train_fraction}")


@dataclass(frozen=True, eq=False)
class NormalizationParams:
    """D_Train で推定した特徴量ごとの min と span（max - min）"""

    feature_names: Tuple[str, ...]
    minimum: np.ndarray
    span: np.ndarray
    fitted_on: int

    @property
    def feature_count(self) -> int:
        return int(self.minimum.shape[0])

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "min": [float(v) for v in self.minimum],
            "span": [float(v) for v in self.span],
            "fitted_on": int(self.fitted_on),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NormalizationParams":
        try:
            names = tuple(str(name) for name in doc["feature_names"])
            minimum = as_feature_vector(doc["min"])
            span = as_feature_vector(doc["span"])
            fitted_on = int(doc["fitted_on"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"正規化パラメータの形式が不正です: {e}") from None
        if not (len(names) == minimum.shape[0] == span.shape[0]):
            raise DataError("正規化パラメータの feature_names/min/span の長さが一致しません")
        if np.any(span < 0) or not np.all(np.isfinite(minimum)) or not np.all(np.isfinite(span)):
            raise DataError("正規化パラメータに負の span または非有限値が含まれています")
        return cls(names, minimum, span, fitted_on)


def _parse_row(row: List[str], line: int, width: int, path: str) -> TelemetryRecord:
    if len(row) != len(HEADER_PREFIX) + width:
        raise DataError(f"{path}:{line}: 列数が不正です（期待: {len(HEADER_PREFIX) + width}, 実際: {len(row)}）")
    try:
        timestamp = int(row[0])
    except ValueError:
        raise DataError(f"{path}:{line}: timestamp が整数ではありません: {row[0]!r}") from None
    node_id = row[1].strip()
    if not node_id:
        raise DataError(f"{path}:{line}: node_id が空です")
    if row[2] not in ("0", "1"):
        raise DataError(f"{path}:{line}: idle は 0 または 1 で指定してください: {row[2]!r}")
    try:
        label = Label.from_csv(row[3])
    except DataError as e:
        raise DataError(f"{path}:{line}: {e}") from None
    try:
        values = [float(v) for v in row[len(HEADER_PREFIX):]]
    except ValueError as e:
        raise DataError(f"{path}:{line}: 特徴量を数値に変換できません: {e}") from None
    if not all(math.isfinite(v) for v in values):
        raise DataError(f"{path}:{line}: 特徴量に非有限値が含まれています")
    return TelemetryRecord(node_id, timestamp, as_feature_vector(values), label, row[2] == "1")


def _read_csv(path: str) -> Tuple[Tuple[str, ...], List[Tuple[int, TelemetryRecord]]]:
    rows: List[Tuple[int, TelemetryRecord]] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: ファイルが空です") from None
        if tuple(h.strip() for h in header[:len(HEADER_PREFIX)]) != HEADER_PREFIX:
            raise DataError(f"{path}:1: ヘッダーは {','.join(HEADER_PREFIX)},<特徴量名...> で始まる必要があります")
        feature_names = tuple(h.strip() for h in header[len(HEADER_PREFIX):])
        if not feature_names:
            raise DataError(f"{path}:1: 特徴量の列がありません")
        for row in reader:
            if not row:
                continue
            rows.append((reader.line_num, _parse_row(row, reader.line_num, len(feature_names), path)))
    return feature_names, rows


def ingest(path: str) -> IngestedTelemetry:
    """テレメトリCSV（ノード単位または結合ファイル）を読み込む"""
    return _merge([path])


def ingest_path(path: str) -> IngestedTelemetry:
    """CSVファイル、または *.csv を含むディレクトリを読み込む"""
    if os.path.isdir(path):
        files = sorted(os.path.join(path, name) for name in os.listdir(path) if name.endswith(".csv"))
        if not files:
            raise DataError(f"{path}: CSVファイルが見つかりません")
        return _merge(files)
    if not os.path.exists(path):
        raise DataError(f"{path}: ファイルが存在しません")
    return ingest(path)


def _merge(paths: Sequence[str]) -> IngestedTelemetry:
    feature_names: Optional[Tuple[str, ...]] = None
    nodes: Dict[str, List[TelemetryRecord]] = {}
    seen: Dict[Tuple[str, int], str] = {}
    for path in paths:
        names, rows = _read_csv(path)
        if feature_names is None:
            feature_names = names
        elif names != feature_names:
            raise DataError(f"{path}:1: 特徴量の列構成が他のファイルと一致しません")
        for line, record in rows:
            where = f"{path}:{line}"
            if record.key in seen:
                raise DataError(f"{where}: (node_id, timestamp) = {record.key} が重複しています（初出: {seen[record.key]}）")
            seen[record.key] = where
            nodes.setdefault(record.node_id, []).append(record)
        logger.debug("読み込み完了: %s (%d 行)", path, len(rows))
    for node_id in nodes:
        nodes[node_id].sort(key=lambda record: record.timestamp)
    return IngestedTelemetry(feature_names or (), dict(sorted(nodes.items())))


def write_telemetry_csv(path: str, records: Iterable[TelemetryRecord], feature_names: Sequence[str]):
    """テレメトリCSV形式で書き出す（浮動小数点は往復可能な最短表記）"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(HEADER_PREFIX) + list(feature_names))
        for record in records:
            writer.writerow([record.timestamp, record.node_id, 1 if record.idle else 0,
                             record.label.csv_value] + [repr(float(v)) for v in record.features])


def drop_idle(records: Iterable[TelemetryRecord]) -> List[TelemetryRecord]:
    """アイドル区間のレコードを除去（順序は保持）"""
    return [record for record in records if not record.idle]


def split_normal(records: Sequence[TelemetryRecord], spec: SplitSpec) -> Tuple[List[TelemetryRecord], List[TelemetryRecord]]:
    """正常レコードを D_Train と D_Test^N に無作為分割"""
    for record in records:
        if record.label is not Label.NORMAL or record.idle:
            raise DataError(f"分割対象は非アイドルの normal レコードのみです: {record.key}")
    n = len(records)
    if n < MIN_SPLIT_RECORDS:
        raise DataError(f"正常レコードが {n} 件しかありません（分割には {MIN_SPLIT_RECORDS} 件以上必要）")
    n_train = int(math.floor(spec.train_fraction * n + 0.5))
    order = np.random.default_rng(spec.rng_seed).permutation(n)
    in_train = np.zeros(n, dtype=bool)
    in_train[order[:n_train]] = True
    train = [record for record, flag in zip(records, in_train) if flag]
    test_normal = [record for record, flag in zip(records, in_train) if not flag]
    return train, test_normal


def fit_normalization(train: Sequence[TelemetryRecord], feature_names: Optional[Sequence[str]] = None) -> NormalizationParams:
    """D_Train から特徴量ごとの min/span を推定"""
    if not train:
        raise DataError("正規化パラメータの推定には1件以上の学習レコードが必要です")
    matrix = records_matrix(train)
    minimum = matrix.min(axis=0)
    span = matrix.max(axis=0) - minimum
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{i}" for i in range(matrix.shape[1]))
    if len(names) != matrix.shape[1]:
        raise DataError(f"特徴量名の数 {len(names)} が特徴量数 {matrix.shape[1]} と一致しません")
    minimum.setflags(write=False)
    span.setflags(write=False)
    return NormalizationParams(names, minimum, span, len(train))


def normalize_matrix(matrix: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """(raw - min) / span を [0, 1] にクリップ。span = 0 の特徴量は 0.0"""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[-1] != params.feature_count:
        raise DataError(f"特徴量数 {matrix.shape[-1]} が正規化パラメータ {params.feature_count} と一致しません")
    active = params.span > 0
    out = np.zeros_like(matrix)
    out[..., active] = (matrix[..., active] - params.minimum[active]) / params.span[active]
    return np.clip(out, 0.0, 1.0)


def apply_normalization(record: TelemetryRecord, params: NormalizationParams) -> TelemetryRecord:
    """1レコードを正規化"""
    return record.with_features(normalize_matrix(record.features, params))


def denormalize(values: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """正規化の逆変換（定数特徴量は min に戻る）"""
    return np.asarray(values, dtype=np.float64) * params.span + params.minimum


def _normalize_all(records: Sequence[TelemetryRecord], params: NormalizationParams) -> Tuple[TelemetryRecord, ...]:
    if not records:
        return ()
    normalized = normalize_matrix(records_matrix(records), params)
    return tuple(record.with_features(row) for record, row in zip(records, normalized))


def build_node_dataset(node_id: str, records: Sequence[TelemetryRecord], feature_names: Sequence[str],
                       spec: SplitSpec, norm: Optional[NormalizationParams] = None) -> NodeDataset:
    """1ノード分のレコードから正規化済みの NodeDataset を構築

    norm を渡した場合は再推定せずにそのパラメータで正規化します（学習済みモデルの評価用）。
    """
    active = drop_idle(records)
    normal = [record for record in active if record.label is Label.NORMAL]
    anomaly = [record for record in active if record.label.is_anomaly]
    unlabeled = [record for record in active if record.label is Label.UNLABELED]
    train, test_normal = split_normal(normal, spec)
    if norm is None:
        norm = fit_normalization(train, feature_names)
    elif tuple(norm.feature_names) != tuple(feature_names):
        raise DataError(f"{node_id}: モデルの特徴量名とデータの特徴量名が一致しません")
    logger.debug("%s: train=%d test_normal=%d test_anomaly=%d unlabeled=%d idle=%d",
                 node_id, len(train), len(test_normal), len(anomaly), len(unlabeled),
                 len(records) - len(active))
    return NodeDataset(
        node_id=node_id,
        train=_normalize_all(train, norm),
        test_normal=_normalize_all(test_normal, norm),
        test_anomaly=_normalize_all(anomaly, norm),
        feature_names=tuple(feature_names),
        norm=norm,
        unlabeled=_normalize_all(unlabeled, norm),
    )


def save_normalization(path: str, params: NormalizationParams):
    """正規化パラメータをJSONで保存"""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(params.to_dict(), f, indent=2, ensure_ascii=False)
        f.write("\n")


def load_normalization(path: str) -> NormalizationParams:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: JSONとして読み込めません: {e}") from None
    return NormalizationParams.from_dict(doc)
