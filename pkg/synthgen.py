"""
合成テレメトリ生成
Synthetic telemetry generator

負荷・周波数（DVFSガバナ）・電力・温度・ファン回転数の結合を持つノード単位の
テレメトリを5分間隔で生成します。conservative ガバナを正常、powersave /
performance ガバナを異常として連続ブロックで注入します。
Generates labeled per-node telemetry with healthy (conservative governor) and
anomalous (powersave / performance governor) regimes.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from dataset_pipeline import write_telemetry_csv
from telemetry import AGGREGATION_INTERVAL_SECONDS, ConfigError, Label, TelemetryRecord

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
START_TIMESTAMP = 1520035200  # 2018-03-03T00:00:00Z
DEFAULT_HORIZON = 24000
DEFAULT_FEATURES = 32
MIN_FEATURES = 8
FAMILIES = ("load", "freq", "power", "temp", "fan")
MEAN_PHASE_LENGTH = 24
LOAD_STEP_SIGMA = 0.05
LOAD_REVERSION = 0.3
FAN_MIN, FAN_MAX = 20.0, 100.0
FAN_T_LOW, FAN_T_HIGH = 40.0, 80.0


class Policy(Enum):
    """CPU周波数ガバナ"""

    CONSERVATIVE = "conservative"
    POWERSAVE = "powersave"
    PERFORMANCE = "performance"

    @property
    def label(self) -> Label:
        return {
            Policy.CONSERVATIVE: Label.NORMAL,
            Policy.POWERSAVE: Label.ANOMALY_POWERSAVE,
            Policy.PERFORMANCE: Label.ANOMALY_PERFORMANCE,
        }[self]


@dataclass(frozen=True)
class NodeProfile:
    """ノードの物理モデル定数（値はすべて合成用の既定値）"""

    node_id: str = "node00"
    core_count: int = 4
    f_min: float = 1.0           # GHz
    f_max: float = 3.6           # GHz
    p_idle: float = 300.0        # W
    c_dyn: float = 60.0          # W / GHz^2 at full load
    thermal_gain: float = 0.05   # °C / W
    thermal_inertia: float = 0.2
    ambient: float = 20.0        # °C
    noise_sigma: float = 0.003   # 各特徴量系列の公称幅に対する比率
    freq_lag: float = 1.0        # conservative ガバナの追従率（1.0 で負荷に即応）

    def __post_init__(self):
        if not self.f_min < self.f_max:
            raise ConfigError(f"f_min < f_max である必要があります: {self.f_min}, {self.f_max}")
        if not 0.0 < self.thermal_inertia < 1.0:
            raise ConfigError(f"thermal_inertia は (0, 1) の範囲で指定してください: {self.thermal_inertia}")
        if not 0.0 < self.freq_lag <= 1.0:
            raise ConfigError(f"freq_lag は (0, 1] の範囲で指定してください: {self.freq_lag}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma は0以上で指定してください: {self.noise_sigma}")
        if self.core_count < 1:
            raise ConfigError(f"core_count は1以上で指定してください: {self.core_count}")

    def family_scales(self) -> Dict[str, float]:
        """ノイズの基準にする各系列の公称幅"""
        peak_dynamic = self.c_dyn * self.f_max ** 2
        return {
            "load": 1.0,
            "freq": self.f_max - self.f_min,
            "power": peak_dynamic,
            "temp": self.thermal_gain * peak_dynamic,
            "fan": FAN_MAX - FAN_MIN,
        }


class Segment(NamedTuple):
    start: int
    end: int  # 排他的
    policy: Policy


@dataclass(frozen=True)
class GovernorSchedule:
    """区間 [start, end) ごとのガバナ設定"""

    segments: Tuple[Segment, ...]

    def validate(self, horizon: int):
        """重複なく [0, horizon) を覆っているか検査"""
        position = 0
        for segment in self.segments:
            if segment.start != position or segment.end <= segment.start:
                raise ConfigError(f"ガバナスケジュールが不整合です: {segment} (期待する開始位置: {position})")
            position = segment.end
        if position != horizon:
            raise ConfigError(f"ガバナスケジュールが区間全体を覆っていません: {position} != {horizon}")

    def policies(self, horizon: int) -> List[Policy]:
        self.validate(horizon)
        out: List[Policy] = []
        for segment in self.segments:
            out.extend([segment.policy] * (segment.end - segment.start))
        return out

    @classmethod
    def constant(cls, horizon: int, policy: Policy = Policy.CONSERVATIVE) -> "GovernorSchedule":
        return cls((Segment(0, horizon, policy),))

    def to_list(self) -> List[dict]:
        return [{"start": s.start, "end": s.end, "policy": s.policy.value} for s in self.segments]


@dataclass(frozen=True)
class FleetMix:
    """フリート全体の異常区間の比率と構成"""

    anomaly_fraction: float = 0.16
    dominant_share: float = 0.8
    blocks: int = 6

    def __post_init__(self):
        if not 0.0 <= self.anomaly_fraction < 1.0:
            raise ConfigError(f"anomaly_fraction は [0, 1) の範囲で指定してください: {self.anomaly_fraction}")
        if not 0.0 <= self.dominant_share <= 1.0:
            raise ConfigError(f"dominant_share は [0, 1] の範囲で指定してください: {self.dominant_share}")
        if self.blocks < 1:
            raise ConfigError(f"blocks は1以上で指定してください: {self.blocks}")


class NodeTrace(NamedTuple):
    """ノイズを加える前の物理量の系列"""

    load: np.ndarray
    idle: np.ndarray
    freq: np.ndarray
    power: np.ndarray
    temp: np.ndarray
    fan: np.ndarray


def simulate_load(rng: np.random.Generator, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    """ビジー/アイドルの交互フェーズ（長さは平均24区間の幾何分布）による負荷系列"""
    load = np.zeros(horizon)
    idle = np.zeros(horizon, dtype=bool)
    busy = bool(rng.random() < 0.5)
    t = 0
    while t < horizon:
        length = int(rng.geometric(1.0 / MEAN_PHASE_LENGTH))
        end = min(horizon, t + length)
        if busy:
            level = rng.uniform(0.5, 1.0)
            current = level
            for i in range(t, end):
                if i > t:
                    current = current + LOAD_REVERSION * (level - current) + rng.normal(0.0, LOAD_STEP_SIGMA)
                    current = min(1.0, max(0.0, current))
                load[i] = current
        else:
            idle[t:end] = True
        busy = not busy
        t = end
    return load, idle


def fan_speed(temp: np.ndarray) -> np.ndarray:
    """40 °C で 20%、80 °C で 100% の区分線形"""
    ratio = (np.asarray(temp) - FAN_T_LOW) / (FAN_T_HIGH - FAN_T_LOW)
    return FAN_MIN + (FAN_MAX - FAN_MIN) * np.clip(ratio, 0.0, 1.0)


def simulate_physics(profile: NodeProfile, load: np.ndarray, idle: np.ndarray,
                     policies: Sequence[Policy]) -> NodeTrace:
    """負荷とガバナから周波数・電力・温度・ファンを逐次計算"""
    horizon = len(load)
    if len(policies) != horizon or len(idle) != horizon:
        raise ConfigError("負荷・アイドル・ガバナ系列の長さが一致しません")
    freq = np.zeros(horizon)
    power = np.zeros(horizon)
    temp = np.zeros(horizon)
    span = profile.f_max - profile.f_min
    f_prev = profile.f_min
    t_prev = profile.ambient + profile.thermal_gain * profile.p_idle
    for t in range(horizon):
        policy = policies[t]
        if policy is Policy.POWERSAVE:
            f = profile.f_min
        elif policy is Policy.PERFORMANCE:
            f = profile.f_max
        else:
            f = f_prev + profile.freq_lag * ((profile.f_min + span * load[t]) - f_prev)
        p = profile.p_idle + profile.c_dyn * load[t] * f * f
        temp_now = t_prev + profile.thermal_inertia * (profile.ambient + profile.thermal_gain * p - t_prev)
        freq[t], power[t], temp[t] = f, p, temp_now
        f_prev, t_prev = f, temp_now
    return NodeTrace(np.asarray(load, dtype=np.float64), np.asarray(idle, dtype=bool),
                     freq, power, temp, fan_speed(temp))


def feature_names(feature_count: int, core_count: int) -> List[str]:
    """コアごとの (load, freq, power, temp, fan) と残りの無情報ノイズ列の名前"""
    informative = min(feature_count, len(FAMILIES) * core_count)
    names = [f"core{j // len(FAMILIES)}_{FAMILIES[j % len(FAMILIES)]}" for j in range(informative)]
    names += [f"aux{j:02d}" for j in range(feature_count - informative)]
    return names


def trace_features(profile: NodeProfile, trace: NodeTrace, feature_count: int,
                   rng: np.random.Generator) -> np.ndarray:
    """物理量をコアごとに複製し、測定ノイズと無情報列を加えた horizon×F 行列"""
    if feature_count < MIN_FEATURES:
        raise ConfigError(f"特徴量数は {MIN_FEATURES} 以上で指定してください: {feature_count}")
    horizon = trace.load.shape[0]
    informative = min(feature_count, len(FAMILIES) * profile.core_count)
    scales = profile.family_scales()
    columns = {"load": trace.load, "freq": trace.freq, "power": trace.power, "temp": trace.temp, "fan": trace.fan}
    matrix = np.empty((horizon, feature_count))
    for j in range(informative):
        family = FAMILIES[j % len(FAMILIES)]
        noise = rng.normal(0.0, profile.noise_sigma * scales[family], size=horizon)
        matrix[:, j] = columns[family] + noise
    if feature_count > informative:
        matrix[:, informative:] = rng.uniform(0.0, 1.0, size=(horizon, feature_count - informative))
    return matrix


def generate_node(profile: NodeProfile, schedule: GovernorSchedule, horizon: int, feature_count: int,
                  seed: int, start_timestamp: int = START_TIMESTAMP) -> List[TelemetryRecord]:
    """1ノード分のラベル付きレコード列を生成"""
    if horizon < 1:
        raise ConfigError(f"horizon は1以上で指定してください: {horizon}")
    if feature_count < MIN_FEATURES:
        raise ConfigError(f"特徴量数は {MIN_FEATURES} 以上で指定してください: {feature_count}")
    policies = schedule.policies(horizon)
    load_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    load, idle = simulate_load(np.random.default_rng(load_seq), horizon)
    trace = simulate_physics(profile, load, idle, policies)
    matrix = trace_features(profile, trace, feature_count, np.random.default_rng(noise_seq))
    return [
        TelemetryRecord(profile.node_id, start_timestamp + t * AGGREGATION_INTERVAL_SECONDS,
                        matrix[t], policies[t].label, bool(idle[t]))
        for t in range(horizon)
    ]


def build_schedule(horizon: int, mix: FleetMix, dominant: Policy, rng: np.random.Generator) -> GovernorSchedule:
    """異常区間を数日単位の連続ブロックとして配置したスケジュール"""
    anomalous = int(round(mix.anomaly_fraction * horizon))
    if anomalous == 0:
        return GovernorSchedule.constant(horizon)
    block_count = min(mix.blocks, anomalous)
    lengths = [anomalous // block_count + (1 if i < anomalous % block_count else 0) for i in range(block_count)]
    other = Policy.PERFORMANCE if dominant is Policy.POWERSAVE else Policy.POWERSAVE
    dominant_blocks = int(round(mix.dominant_share * block_count))
    kinds = [dominant] * dominant_blocks + [other] * (block_count - dominant_blocks)
    kinds = [kinds[i] for i in rng.permutation(block_count)]

    normal_total = horizon - anomalous
    cuts = np.sort(rng.choice(normal_total + 1, size=block_count, replace=normal_total + 1 < block_count))
    segments: List[Segment] = []
    position = 0
    consumed = 0
    for cut, length, kind in zip(cuts, lengths, kinds):
        gap = int(cut) - consumed
        if gap > 0:
            segments.append(Segment(position, position + gap, Policy.CONSERVATIVE))
            position += gap
            consumed += gap
        segments.append(Segment(position, position + length, kind))
        position += length
    if position < horizon:
        segments.append(Segment(position, horizon, Policy.CONSERVATIVE))
    return GovernorSchedule(tuple(_merge_adjacent(segments)))


def _merge_adjacent(segments: Sequence[Segment]) -> List[Segment]:
    merged: List[Segment] = []
    for segment in segments:
        if merged and merged[-1].policy is segment.policy and merged[-1].end == segment.start:
            merged[-1] = Segment(merged[-1].start, segment.end, segment.policy)
        else:
            merged.append(segment)
    return merged


@dataclass(frozen=True)
class FleetNode:
    profile: NodeProfile
    schedule: GovernorSchedule
    seed: int
    file: str

    def to_dict(self) -> dict:
        return {"profile": asdict(self.profile), "schedule": self.schedule.to_list(),
                "seed": self.seed, "file": self.file}


@dataclass(frozen=True)
class FleetSummary:
    out_dir: str
    nodes: Tuple[FleetNode, ...]
    label_counts: Dict[str, Dict[str, int]]
    manifest_path: str


def plan_fleet(node_count: int, mix: FleetMix, seed: int, horizon: int = DEFAULT_HORIZON,
               core_count: int = 4, base_profile: Optional[NodeProfile] = None) -> List[FleetNode]:
    """ノードごとのプロファイル・スケジュール・乱数シードを決める"""
    if node_count < 1:
        raise ConfigError(f"ノード数は1以上で指定してください: {node_count}")
    base = base_profile or NodeProfile(core_count=core_count)
    root = np.random.SeedSequence(seed)
    nodes = []
    for index, child in enumerate(root.spawn(node_count)):
        node_id = f"node{index:02d}"
        plan_rng = np.random.default_rng(child.spawn(1)[0])
        profile = replace(base, node_id=node_id,
                          p_idle=round(float(base.p_idle * plan_rng.uniform(0.9, 1.1)), 6),
                          c_dyn=round(float(base.c_dyn * plan_rng.uniform(0.9, 1.1)), 6))
        dominant = Policy.POWERSAVE if index % 2 == 0 else Policy.PERFORMANCE
        schedule = build_schedule(horizon, mix, dominant, plan_rng)
        node_seed = int(child.generate_state(1)[0])
        nodes.append(FleetNode(profile, schedule, node_seed, f"{node_id}.csv"))
    return nodes


def _generate_and_write(job) -> Dict[str, int]:
    node, out_dir, horizon, feature_count = job
    records = generate_node(node.profile, node.schedule, horizon, feature_count, node.seed)
    names = feature_names(feature_count, node.profile.core_count)
    write_telemetry_csv(os.path.join(out_dir, node.file), records, names)
    counts: Dict[str, int] = {label.csv_value: 0 for label in Label if label is not Label.UNLABELED}
    counts["idle"] = 0
    for record in records:
        counts[record.label.csv_value] += 1
        counts["idle"] += int(record.idle)
    return counts


def generate_fleet(node_count: int, mix: FleetMix, seed: int, out_dir: str,
                   horizon: int = DEFAULT_HORIZON, feature_count: int = DEFAULT_FEATURES,
                   core_count: int = 4, workers: int = 1) -> FleetSummary:
    """ノードごとのCSVと再現用マニフェストを書き出す"""
    if feature_count < MIN_FEATURES:
        raise ConfigError(f"特徴量数は {MIN_FEATURES} 以上で指定してください: {feature_count}")
    os.makedirs(out_dir, exist_ok=True)
    nodes = plan_fleet(node_count, mix, seed, horizon, core_count)
    jobs = [(node, out_dir, horizon, feature_count) for node in nodes]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_and_write, jobs))
    else:
        results = [_generate_and_write(job) for job in jobs]
    label_counts = {node.profile.node_id: counts for node, counts in zip(nodes, results)}
    for node_id, counts in label_counts.items():
        logger.debug("%s: %s", node_id, counts)

    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "seed": seed,
        "horizon": horizon,
        "features": feature_count,
        "feature_names": feature_names(feature_count, core_count),
        "start_timestamp": START_TIMESTAMP,
        "interval_seconds": AGGREGATION_INTERVAL_SECONDS,
        "mix": asdict(mix),
        "nodes": [node.to_dict() for node in nodes],
    }
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, ensure_ascii=False)
        f.write("\n")
    return FleetSummary(out_dir, tuple(nodes), label_counts, manifest_path)


def load_manifest(path: str) -> List[FleetNode]:
    """マニフェストからノード計画を復元（generate_node で完全に再生成できる）"""
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return [FleetNode(NodeProfile(**node["profile"]),
                      GovernorSchedule(tuple(Segment(s["start"], s["end"], Policy(s["policy"]))
                                             for s in node["schedule"])),
                      int(node["seed"]), node["file"])
            for node in doc["nodes"]]
