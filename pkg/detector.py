"""
再構成誤差による異常検知
Reconstruction-error detector

再構成誤差のプロファイル、パーセンタイル閾値、生成検査法による閾値探索、
二値分類、正規化MAE/RMSE、クラスごとのF値を計算し、レポートを出力します。
Turns reconstruction errors into thresholds, decisions and report tables.
"""

import csv
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from autoencoder import AutoencoderModel, max_feature_errors, reconstruction_errors
from telemetry import DataError, Label, NodeDataset, TelemetryRecord, records_matrix

logger = logging.getLogger(__name__)

DEFAULT_CANDIDATES = tuple(range(90, 100))
DEFAULT_FIXED_PERCENTILES = (95, 97, 99)
PERCENTILE_DEFINITION = "nearest-rank"
RMSE_DEFINITION = "root mean square of per-record reconstruction errors"


class Verdict(Enum):
    NORMAL = "normal"
    ANOMALY = "anomaly"


@dataclass(frozen=True, eq=False)
class ErrorProfile:
    """データ集合の再構成誤差（レコード順を保持）"""

    source: str
    keys: Tuple[Tuple[str, int], ...]
    errors: np.ndarray
    labels: Tuple[Label, ...] = ()
    max_errors: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return int(self.errors.shape[0])

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors)) if self.count else float("nan")

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.errors * self.errors))) if self.count else float("nan")

    def percentile(self, n: int) -> float:
        return percentile(self.errors, n)

    def summary(self, percentiles: Sequence[int] = (50, 90, 95, 99)) -> dict:
        if not self.count:
            return {"count": 0}
        return {
            "count": self.count,
            "mean": self.mean,
            "rms": self.rms,
            "percentiles": {str(n): percentile(self.errors, n) for n in percentiles},
        }

    def select(self, mask: Sequence[bool], source: Optional[str] = None) -> "ErrorProfile":
        mask = np.asarray(mask, dtype=bool)
        return ErrorProfile(
            source or self.source,
            tuple(key for key, keep in zip(self.keys, mask) if keep),
            self.errors[mask],
            tuple(label for label, keep in zip(self.labels, mask) if keep),
            self.max_errors[mask] if self.max_errors is not None else None,
        )

    def with_label(self, label: Label) -> "ErrorProfile":
        return self.select([item is label for item in self.labels], f"{self.source}:{label.csv_value}")

    @staticmethod
    def concat(source: str, profiles: Iterable["ErrorProfile"]) -> "ErrorProfile":
        profiles = list(profiles)
        max_parts = [p.max_errors for p in profiles]
        return ErrorProfile(
            source,
            tuple(key for p in profiles for key in p.keys),
            np.concatenate([p.errors for p in profiles]) if profiles else np.zeros(0),
            tuple(label for p in profiles for label in p.labels),
            np.concatenate(max_parts) if profiles and all(m is not None for m in max_parts) else None,
        )


def profile_errors(model: AutoencoderModel, records: Sequence[TelemetryRecord], source: str = "") -> ErrorProfile:
    """各レコードの再構成誤差を計算（レコードはモデル自身の正規化パラメータで正規化済み）"""
    if not records:
        return ErrorProfile(source, (), np.zeros(0), (), np.zeros(0))
    for record in records:
        if record.feature_count != model.feature_count:
            raise DataError(f"{record.key}: 特徴量数 {record.feature_count} がモデルの {model.feature_count} と一致しません")
    matrix = records_matrix(records)
    return ErrorProfile(
        source,
        tuple(record.key for record in records),
        reconstruction_errors(model, matrix),
        tuple(record.label for record in records),
        max_feature_errors(model, matrix),
    )


def percentile(errors: Sequence[float], n: int) -> float:
    """nearest-rank 法による n パーセンタイル（昇順で ceil(n/100·N) 番目、1始まり）"""
    values = np.sort(np.asarray(errors, dtype=np.float64))
    if values.shape[0] == 0:
        raise DataError("空の誤差リストのパーセンタイルは定義されません")
    if not 1 <= n <= 99 or int(n) != n:
        raise ValueError(f"パーセンタイルは1から99の整数で指定してください: {n}")
    rank = -(-int(n) * values.shape[0] // 100)
    return float(values[rank - 1])


@dataclass(frozen=True)
class Threshold:
    theta: float
    percentile_n: int
    calibrated_on: int

    def to_dict(self) -> dict:
        return {"theta": self.theta, "percentile_n": self.percentile_n, "calibrated_on": self.calibrated_on}


def make_threshold(errors: Sequence[float], n: int) -> Threshold:
    """誤差分布の n パーセンタイルを閾値 θ とする"""
    return Threshold(percentile(errors, n), int(n), len(errors))


def classify(error: float, th: Threshold) -> Verdict:
    """誤差が θ を厳密に超えた場合のみ異常"""
    return Verdict.ANOMALY if error > th.theta else Verdict.NORMAL


def classify_many(errors: np.ndarray, th: Threshold) -> np.ndarray:
    return np.asarray(errors, dtype=np.float64) > th.theta


def f_score(tp: int, fp: int, fn: int) -> float:
    """1クラス分のF値（適合率・再現率の調和平均、両方0のときは0）"""
    if tp + fp + fn <= 0:
        raise ValueError("TP + FP + FN = 0 のクラスのF値は定義されません")
    truth = np.repeat([True, False, True], [tp, fp, fn])
    flagged = np.repeat([True, True, False], [tp, fp, fn])
    _, _, f, _ = precision_recall_fscore_support(truth, flagged, labels=[True], average=None, zero_division=0)
    return float(f[0])


@dataclass(frozen=True)
class Confusion:
    """混同行列（異常を陽性とする）"""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def f_anomaly(self) -> Optional[float]:
        if self.tp + self.fp + self.fn == 0:
            return None
        return f_score(self.tp, self.fp, self.fn)

    def f_normal(self) -> Optional[float]:
        if self.tn + self.fn + self.fp == 0:
            return None
        return f_score(self.tn, self.fn, self.fp)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion(truth_anomaly: Sequence[bool], flagged: Sequence[bool]) -> Confusion:
    truth = np.asarray(truth_anomaly, dtype=bool)
    flagged = np.asarray(flagged, dtype=bool)
    if truth.shape != flagged.shape:
        raise ValueError(f"正解と判定の長さが一致しません: {truth.shape} != {flagged.shape}")
    if truth.size == 0:
        return Confusion()
    tn, fp, fn, tp = confusion_matrix(truth, flagged, labels=[False, True]).ravel()
    return Confusion(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


def profile_confusion(profile: ErrorProfile, th: Threshold) -> Confusion:
    return confusion([label.is_anomaly for label in profile.labels], classify_many(profile.errors, th))


def normalized_errors(profile_train: ErrorProfile, profile_other: ErrorProfile) -> Tuple[float, float]:
    """D_Train の MAE/RMSE で割った正規化 MAE と正規化 RMSE"""
    train_mae = profile_train.mean
    train_rms = profile_train.rms
    if not profile_train.count or not train_mae > 0 or not train_rms > 0:
        raise DataError(f"{profile_train.source}: 学習データの MAE が0のため正規化できません（縮退したモデル）")
    if not profile_other.count:
        raise DataError(f"{profile_other.source}: 空の誤差プロファイルは正規化できません")
    return profile_other.mean / train_mae, profile_other.rms / train_rms


def _macro_f(conf: Confusion) -> float:
    return (f_score(conf.tn, conf.fn, conf.fp) + f_score(conf.tp, conf.fp, conf.fn)) / 2.0


def candidate_scores(calibration_normal: ErrorProfile, calibration_profile: ErrorProfile,
                     candidates: Sequence[int]) -> Dict[int, float]:
    """候補パーセンタイルごとのマクロ平均F値"""
    if not candidates:
        raise ValueError("候補パーセンタイルが空です")
    truth = [label.is_anomaly for label in calibration_profile.labels]
    if not any(truth) or all(truth):
        raise DataError(f"{calibration_profile.source}: 校正データに正常・異常の両クラスが必要です")
    scores = {}
    for n in sorted(set(int(c) for c in candidates)):
        th = make_threshold(calibration_normal.errors, n)
        scores[n] = _macro_f(confusion(truth, classify_many(calibration_profile.errors, th)))
    return scores


def select_percentile(calibration_normal: ErrorProfile, scores: Mapping[int, float]) -> Threshold:
    """マクロF値が最大の候補（同点は大きい n）を閾値にする"""
    best_n = max(scores, key=lambda n: (scores[n], n))
    return make_threshold(calibration_normal.errors, best_n)


def search_percentile(model: AutoencoderModel, calibration_normal: ErrorProfile,
                      calibration_labeled: Sequence[TelemetryRecord], candidates: Sequence[int]) -> Threshold:
    """生成検査法でパーセンタイル n を探索し、最良の閾値を返す"""
    labeled = profile_errors(model, calibration_labeled, "calibration")
    return select_percentile(calibration_normal, candidate_scores(calibration_normal, labeled, candidates))


@dataclass(frozen=True)
class EvaluationOptions:
    candidates: Tuple[int, ...] = DEFAULT_CANDIDATES
    fixed_percentiles: Tuple[int, ...] = DEFAULT_FIXED_PERCENTILES
    paper_protocol: bool = False
    calibration_fraction: float = 0.2
    seed: int = 0
    histogram_bins: int = 50


@dataclass(eq=False)
class NodeReport:
    """1ノード分の評価結果"""

    node_id: str
    group: str
    threshold: Threshold
    candidate_scores: Dict[int, float]
    confusion: Confusion
    f_normal: Optional[float]
    f_anomaly: Optional[float]
    normalized: Dict[str, Optional[Tuple[float, float]]]
    sweep: Dict[int, Dict[str, Optional[float]]]
    counts: Dict[str, int]
    train_mae: float
    profiles: Dict[str, ErrorProfile] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "group": self.group,
            "threshold": self.threshold.to_dict(),
            "candidate_scores": {str(n): v for n, v in self.candidate_scores.items()},
            "confusion": self.confusion.to_dict(),
            "f_normal": self.f_normal,
            "f_anomaly": self.f_anomaly,
            "normalized": {
                split: ({"mae": pair[0], "rmse": pair[1]} if pair is not None else None)
                for split, pair in self.normalized.items()
            },
            "sweep": {str(n): values for n, values in self.sweep.items()},
            "counts": self.counts,
            "train_mae": self.train_mae,
            "mean_max_feature_error": {
                source: float(np.mean(p.max_errors))
                for source, p in self.profiles.items() if p.max_errors is not None and p.count
            },
        }


@dataclass(eq=False)
class DetectionReport:
    nodes: List[NodeReport]
    averages: Dict[str, Optional[float]]
    metadata: Dict[str, object]
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "warnings": self.warnings,
            "averages": self.averages,
            "nodes": [node.to_dict() for node in self.nodes],
        }


NORMALIZED_SPLITS = ("train", "test_normal", "test_anomaly", "powersave", "performance")


def _node_seed(seed: int, node_id: str) -> List[int]:
    return [int(seed), zlib.crc32(node_id.encode("utf-8"))]


def calibration_split(records: Sequence[TelemetryRecord], fraction: float,
                      rng: np.random.Generator) -> Tuple[List[TelemetryRecord], List[TelemetryRecord]]:
    """レコードを校正用（fraction）と評価用（残り）に分ける（順序は保持）"""
    n = len(records)
    n_cal = int(math.floor(fraction * n + 0.5))
    chosen = np.zeros(n, dtype=bool)
    chosen[rng.permutation(n)[:n_cal]] = True
    return ([r for r, c in zip(records, chosen) if c], [r for r, c in zip(records, chosen) if not c])


def _node_group(anomaly_labels: Sequence[Label]) -> str:
    powersave = sum(1 for label in anomaly_labels if label is Label.ANOMALY_POWERSAVE)
    performance = sum(1 for label in anomaly_labels if label is Label.ANOMALY_PERFORMANCE)
    if powersave == performance == 0:
        return "none"
    if powersave == performance:
        return "mixed"
    return "powersave-heavy" if powersave > performance else "performance-heavy"


def evaluate_node(model: AutoencoderModel, ds: NodeDataset, options: EvaluationOptions,
                  warnings: Optional[List[str]] = None) -> NodeReport:
    """1ノード分の閾値決定・分類・指標計算"""
    warnings = warnings if warnings is not None else []
    train = profile_errors(model, ds.train, "train")
    test_normal = profile_errors(model, ds.test_normal, "test_normal")
    test_anomaly = profile_errors(model, ds.test_anomaly, "test_anomaly")

    normalized: Dict[str, Optional[Tuple[float, float]]] = {"train": normalized_errors(train, train)}
    normalized["test_normal"] = normalized_errors(train, test_normal) if test_normal.count else None
    normalized["test_anomaly"] = normalized_errors(train, test_anomaly) if test_anomaly.count else None
    for name, label in (("powersave", Label.ANOMALY_POWERSAVE), ("performance", Label.ANOMALY_PERFORMANCE)):
        subset = test_anomaly.with_label(label)
        normalized[name] = normalized_errors(train, subset) if subset.count else None

    if options.paper_protocol:
        calibration_normal = ErrorProfile.concat("train+test_normal", [train, test_normal])
        calibration = ErrorProfile.concat("calibration", [test_normal, test_anomaly])
        evaluation = calibration
    else:
        rng = np.random.default_rng(_node_seed(options.seed, ds.node_id))
        cal_n, eval_n = calibration_split(ds.test_normal, options.calibration_fraction, rng)
        cal_a, eval_a = calibration_split(ds.test_anomaly, options.calibration_fraction, rng)
        calibration_normal = train
        calibration = profile_errors(model, cal_n + cal_a, "calibration")
        evaluation = profile_errors(model, eval_n + eval_a, "evaluation")

    has_anomaly = test_anomaly.count > 0
    if has_anomaly and any(label.is_anomaly for label in calibration.labels) \
            and any(not label.is_anomaly for label in calibration.labels):
        scores = candidate_scores(calibration_normal, calibration, options.candidates)
        threshold = select_percentile(calibration_normal, scores)
    else:
        scores = {}
        threshold = make_threshold(calibration_normal.errors, max(options.candidates))
        warnings.append(f"{ds.node_id}: 校正データに正常・異常の両クラスがないため "
                        f"n={threshold.percentile_n} を使用しました")

    conf = profile_confusion(evaluation, threshold)
    sweep: Dict[int, Dict[str, Optional[float]]] = {}
    for n in options.fixed_percentiles:
        fixed = profile_confusion(evaluation, make_threshold(calibration_normal.errors, n))
        sweep[int(n)] = {"f_normal": fixed.f_normal(), "f_anomaly": fixed.f_anomaly() if has_anomaly else None}

    logger.debug("%s: n=%d theta=%.6g confusion=%s", ds.node_id, threshold.percentile_n,
                 threshold.theta, conf.to_dict())
    return NodeReport(
        node_id=ds.node_id,
        group=_node_group(test_anomaly.labels),
        threshold=threshold,
        candidate_scores=scores,
        confusion=conf,
        f_normal=conf.f_normal(),
        f_anomaly=conf.f_anomaly() if has_anomaly else None,
        normalized=normalized,
        sweep=sweep,
        counts={
            "train": train.count,
            "test_normal": test_normal.count,
            "test_anomaly": test_anomaly.count,
            "calibration": calibration.count,
            "evaluation": evaluation.count,
        },
        train_mae=train.mean,
        profiles={"train": train, "test_normal": test_normal, "test_anomaly": test_anomaly},
    )


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(sum(present) / len(present)) if present else None


def average_nodes(nodes: Sequence[NodeReport], fixed_percentiles: Sequence[int]) -> Dict[str, Optional[float]]:
    """ノード横断の算術平均（値のないノードは除外）"""
    averages: Dict[str, Optional[float]] = {
        "f_normal": _mean(node.f_normal for node in nodes),
        "f_anomaly": _mean(node.f_anomaly for node in nodes),
        "percentile_n": _mean(node.threshold.percentile_n for node in nodes),
    }
    for split in NORMALIZED_SPLITS:
        for i, metric in enumerate(("mae", "rmse")):
            averages[f"normalized_{metric}_{split}"] = _mean(
                node.normalized[split][i] if node.normalized.get(split) is not None else None for node in nodes)
    for n in fixed_percentiles:
        for key in ("f_normal", "f_anomaly"):
            averages[f"{key}_p{n}"] = _mean(node.sweep[int(n)][key] for node in nodes)
    return averages


def evaluate(models: Mapping[str, AutoencoderModel], datasets: Mapping[str, NodeDataset],
             options: EvaluationOptions = EvaluationOptions(),
             metadata: Optional[Mapping[str, object]] = None) -> DetectionReport:
    """全ノードを評価して DetectionReport を作る"""
    if set(models) != set(datasets):
        missing = sorted(set(datasets) ^ set(models))
        raise DataError(f"モデルとデータセットのノードが一致しません: {', '.join(missing)}")
    warnings: List[str] = []
    nodes = [evaluate_node(models[node_id], datasets[node_id], options, warnings) for node_id in sorted(datasets)]
    return assemble_report(nodes, options, metadata, warnings)


def assemble_report(nodes: Sequence[NodeReport], options: EvaluationOptions,
                    metadata: Optional[Mapping[str, object]] = None,
                    warnings: Optional[List[str]] = None) -> DetectionReport:
    warnings = list(warnings or [])
    if nodes and all(node.f_anomaly is None for node in nodes):
        warnings.append("異常レコードがないため、正常クラス（N）の指標のみを出力します")
    meta = dict(metadata or {})
    meta.update({
        "protocol": "paper" if options.paper_protocol else "held-out",
        "paper_protocol": options.paper_protocol,
        "threshold_source": ("n-th percentile of D_Train ∪ D_Test^N errors; search and metrics on full test sets"
                             if options.paper_protocol else
                             "n-th percentile of D_Train errors; search on a held-out calibration slice, "
                             "metrics on the remaining evaluation slice"),
        "calibration_fraction": options.calibration_fraction,
        "candidates": list(options.candidates),
        "fixed_percentiles": list(options.fixed_percentiles),
        "percentile_definition": PERCENTILE_DEFINITION,
        "rmse_definition": RMSE_DEFINITION,
    })
    return DetectionReport(list(nodes), average_nodes(nodes, options.fixed_percentiles), meta, warnings)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_json(path: str, report: DetectionReport):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, ensure_ascii=False)
        f.write("\n")


def write_table1_csv(path: str, report: DetectionReport):
    """正規化 MAE/RMSE の表（ノードごと + average 行）"""
    splits = ("test_normal", "test_anomaly", "powersave", "performance")
    header = ["node"] + [f"{m}_{s}" for m in ("mae", "rmse") for s in splits]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for node in report.nodes:
            row = [node.node_id]
            for i in (0, 1):
                row += [_cell(node.normalized[s][i] if node.normalized.get(s) is not None else None) for s in splits]
            writer.writerow(row)
        writer.writerow(["average"] + [_cell(report.averages.get(f"normalized_{m}_{s}"))
                                       for m in ("mae", "rmse") for s in splits])


def write_table2_csv(path: str, report: DetectionReport):
    """クラスごとのF値の表（選択された n と固定パーセンタイル列）"""
    fixed = list(report.metadata.get("fixed_percentiles", []))
    header = ["node", "group", "percentile_n", "theta", "f_normal", "f_anomaly"]
    header += [f"{key}_p{n}" for n in fixed for key in ("f_normal", "f_anomaly")]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for node in report.nodes:
            row = [node.node_id, node.group, node.threshold.percentile_n, _cell(node.threshold.theta),
                   _cell(node.f_normal), _cell(node.f_anomaly)]
            row += [_cell(node.sweep[int(n)][key]) for n in fixed for key in ("f_normal", "f_anomaly")]
            writer.writerow(row)
        row = ["average", "", _cell(report.averages.get("percentile_n")), "",
               _cell(report.averages.get("f_normal")), _cell(report.averages.get("f_anomaly"))]
        row += [_cell(report.averages.get(f"{key}_p{n}")) for n in fixed for key in ("f_normal", "f_anomaly")]
        writer.writerow(row)


def write_trend_csv(path: str, node: NodeReport):
    """誤差推移CSV（timestamp, error, label）"""
    merged = ErrorProfile.concat("all", node.profiles.values())
    order = sorted(range(merged.count), key=lambda i: merged.keys[i][1])
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["timestamp", "error", "label"])
        for i in order:
            writer.writerow([merged.keys[i][1], repr(float(merged.errors[i])), merged.labels[i].csv_value])


def error_histogram(normal: np.ndarray, anomaly: np.ndarray, bins: int = 50):
    """正常・異常で共通の等幅ビンを使ったヒストグラム"""
    everything = np.concatenate([normal, anomaly])
    upper = float(everything.max()) if everything.size else 0.0
    edges = np.linspace(0.0, upper if upper > 0 else 1.0, bins + 1)
    count_normal, _ = np.histogram(normal, bins=edges)
    count_anomaly, _ = np.histogram(anomaly, bins=edges)
    return edges, count_normal, count_anomaly


def write_histogram_csv(path: str, node: NodeReport, bins: int = 50):
    """誤差分布CSV（正常: D_Train ∪ D_Test^N、異常: D_Test^A）"""
    normal = np.concatenate([node.profiles["train"].errors, node.profiles["test_normal"].errors])
    edges, count_normal, count_anomaly = error_histogram(normal, node.profiles["test_anomaly"].errors, bins)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bin_left", "bin_right", "count_normal", "count_anomaly"])
        for i in range(bins):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])),
                             int(count_normal[i]), int(count_anomaly[i])])


def load_thresholds(path: str) -> Dict[str, Threshold]:
    """評価レポートJSONからノードごとの閾値を読み込む"""
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: JSONとして読み込めません: {e}") from None
    try:
        return {node["node_id"]: Threshold(float(node["threshold"]["theta"]),
                                           int(node["threshold"]["percentile_n"]),
                                           int(node["threshold"]["calibrated_on"]))
                for node in doc["nodes"]}
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: レポートの形式が不正です: {e}") from None
