"""
実行設定（RunConfig）
Run configuration

優先順位: コマンドライン → 設定ファイル(--config) → 環境変数 → .envファイル → 既定値
Precedence: command-line flags, then the JSON config file, then environment
variables (a .env file is loaded without overriding the real environment),
then the defaults below.
"""

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv import find_dotenv, load_dotenv

from telemetry import ConfigError

ENV_KEYS = {
    "seed": "HPC_AD_SEED",
    "workers": "HPC_AD_WORKERS",
    "out_dir": "HPC_AD_OUT",
    "features": "HPC_AD_FEATURES",
    "epochs": "HPC_AD_EPOCHS",
}


@dataclass(frozen=True)
class RunConfig:
    """1回の実行を完全に決める設定"""

    out_dir: str = "output"
    data_dir: Optional[str] = None
    model_dir: Optional[str] = None
    report_dir: Optional[str] = None
    report_path: Optional[str] = None
    score_output: Optional[str] = None
    seed: int = 42
    features: int = 32
    nodes: int = 8
    horizon: int = 24000
    core_count: int = 4
    anomaly_fraction: float = 0.16
    dominant_share: float = 0.8
    anomaly_blocks: int = 6
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.001
    l1_lambda: float = 1e-5
    train_fraction: float = 0.8
    percentiles: Tuple[int, ...] = tuple(range(90, 100))
    fixed_percentiles: Tuple[int, ...] = (95, 97, 99)
    calibration_fraction: float = 0.2
    paper_protocol: bool = False
    histogram_bins: int = 50
    workers: int = 1

    @property
    def resolved_data_dir(self) -> str:
        return self.data_dir or os.path.join(self.out_dir, "data")

    @property
    def resolved_model_dir(self) -> str:
        return self.model_dir or os.path.join(self.out_dir, "models")

    @property
    def resolved_report_dir(self) -> str:
        return self.report_dir or os.path.join(self.out_dir, "reports")

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["percentiles"] = list(self.percentiles)
        doc["fixed_percentiles"] = list(self.fixed_percentiles)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], base: Optional["RunConfig"] = None) -> "RunConfig":
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ConfigError(f"不明な設定項目です: {', '.join(unknown)}")
        updates = {name: _coerce(name, value, getattr(base, name)) for name, value in doc.items()}
        return validate(replace(base, **updates))

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _coerce(name: str, value: Any, default: Any) -> Any:
    if name in ("percentiles", "fixed_percentiles"):
        if isinstance(value, str):
            return parse_percentiles(value)
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name} は整数のリストで指定してください: {value!r}")
        return _check_percentiles(tuple(value), name)
    if value is None and name in ("data_dir", "model_dir", "report_dir", "report_path", "score_output"):
        return None
    if isinstance(default, bool) or name == "paper_protocol":
        if not isinstance(value, bool):
            raise ConfigError(f"{name} は true/false で指定してください: {value!r}")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{name} は整数で指定してください: {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{name} は数値で指定してください: {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} は文字列で指定してください: {value!r}")
    return value


def _check_percentiles(values: Tuple[int, ...], name: str = "percentiles") -> Tuple[int, ...]:
    if not values:
        raise ConfigError(f"{name} が空です")
    for v in values:
        if not 1 <= v <= 99:
            raise ConfigError(f"{name} は1から99の範囲で指定してください: {v}")
    return tuple(sorted(set(values)))


def parse_percentiles(text: str) -> Tuple[int, ...]:
    """'90..99'、'90,95,99'、'90..93,97' 形式のパーセンタイル指定を解釈"""
    values: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        match = re.fullmatch(r"(\d+)\s*\.\.\s*(\d+)", part)
        if match:
            low, high = int(match.group(1)), int(match.group(2))
            if low > high:
                raise ConfigError(f"パーセンタイルの範囲が逆転しています: {part}")
            values.extend(range(low, high + 1))
        elif part.isdigit():
            values.append(int(part))
        else:
            raise ConfigError(f"パーセンタイルの指定を解釈できません: {part!r}")
    return _check_percentiles(tuple(values))


def validate(config: RunConfig) -> RunConfig:
    """値の範囲を検査"""
    checks = [
        (config.features >= 1, f"features は1以上で指定してください: {config.features}"),
        (config.nodes >= 1, f"nodes は1以上で指定してください: {config.nodes}"),
        (config.horizon >= 1, f"horizon は1以上で指定してください: {config.horizon}"),
        (config.epochs >= 1, f"epochs は1以上で指定してください: {config.epochs}"),
        (config.batch_size >= 1, f"batch_size は1以上で指定してください: {config.batch_size}"),
        (config.learning_rate > 0, f"learning_rate は正の値で指定してください: {config.learning_rate}"),
        (config.l1_lambda >= 0, f"l1_lambda は0以上で指定してください: {config.l1_lambda}"),
        (0 < config.train_fraction < 1, f"train_fraction は (0, 1) で指定してください: {config.train_fraction}"),
        (0 < config.calibration_fraction < 1,
         f"calibration_fraction は (0, 1) で指定してください: {config.calibration_fraction}"),
        (config.workers >= 1, f"workers は1以上で指定してください: {config.workers}"),
        (config.histogram_bins >= 1, f"histogram_bins は1以上で指定してください: {config.histogram_bins}"),
        (config.seed >= 0, f"seed は0以上で指定してください: {config.seed}"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    return config


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """環境変数（.env を含む）からの上書き値"""
    if environ is None:
        load_dotenv(find_dotenv(usecwd=True))
        environ = os.environ
    overrides: Dict[str, Any] = {}
    for name, key in ENV_KEYS.items():
        raw = environ.get(key)
        if raw is None or raw == "":
            continue
        if name == "out_dir":
            overrides[name] = raw
            continue
        try:
            overrides[name] = int(raw)
        except ValueError:
            raise ConfigError(f"環境変数 {key} は整数で指定してください: {raw!r}") from None
    return overrides


def load_run_config(path: str) -> Dict[str, Any]:
    """設定ファイル（RunConfig のJSON表現）を読み込む"""
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ConfigError(f"設定ファイルを読み込めません: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: JSONとして読み込めません: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: 設定ファイルはJSONオブジェクトである必要があります")
    return doc


def save_run_config(path: str, config: RunConfig):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, ensure_ascii=False)
        f.write("\n")


def resolve_config(cli_values: Mapping[str, Any], config_path: Optional[str] = None,
                   environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """既定値 ← 環境変数 ← 設定ファイル ← コマンドライン の順に重ねる"""
    config = RunConfig.from_dict(env_overrides(environ))
    if config_path:
        config = RunConfig.from_dict(load_run_config(config_path), base=config)
    flags = {name: value for name, value in cli_values.items() if value is not None}
    return RunConfig.from_dict(flags, base=config)
