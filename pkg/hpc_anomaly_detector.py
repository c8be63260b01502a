#!/usr/bin/env python3
"""
HPCノード異常検知ツール
HPC Node Anomaly Detector

ノードごとに正常時のテレメトリでスパースオートエンコーダを学習し、
再構成誤差とパーセンタイル閾値で異常を検知します。
Trains one sparse autoencoder per node on healthy telemetry and flags anomalies
by reconstruction error against a calibrated percentile threshold.
"""

import argparse
import csv
import logging
import os
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from typing import Dict, List, Sequence

from autoencoder import (DivergenceError, TrainConfig, load_model, max_feature_errors, reconstruction_errors,
                         save_model, save_training_curve, train_with_history)
from dataset_pipeline import (SplitSpec, build_node_dataset, drop_idle, ingest_path, normalize_matrix,
                              save_normalization)
from detector import (EvaluationOptions, Threshold, assemble_report, classify, evaluate_node, load_thresholds,
                      write_histogram_csv, write_report_json, write_table1_csv, write_table2_csv, write_trend_csv)
from run_config import RunConfig, resolve_config, save_run_config
from synthgen import FleetMix, generate_fleet
from telemetry import ConfigError, DataError, records_matrix

__version__ = "1.0.0"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

MODEL_SUFFIX = ".model.json"


def derive_seed(seed: int, node_id: str, purpose: str) -> int:
    """実行シードとノードIDから用途別のシードを導出"""
    return zlib.crc32(f"{purpose}:{seed}:{node_id}".encode("utf-8"))


def split_spec_for(config: RunConfig, node_id: str) -> SplitSpec:
    return SplitSpec(config.train_fraction, derive_seed(config.seed, node_id, "split"))


def train_config_for(config: RunConfig, node_id: str) -> TrainConfig:
    return TrainConfig(epochs=config.epochs, batch_size=config.batch_size, learning_rate=config.learning_rate,
                       l1_lambda=config.l1_lambda, rng_seed=derive_seed(config.seed, node_id, "model"))


def evaluation_options_for(config: RunConfig) -> EvaluationOptions:
    return EvaluationOptions(candidates=tuple(config.percentiles), fixed_percentiles=tuple(config.fixed_percentiles),
                             paper_protocol=config.paper_protocol, calibration_fraction=config.calibration_fraction,
                             seed=config.seed, histogram_bins=config.histogram_bins)


def _train_node(job):
    """ワーカープロセスで1ノード分を学習して保存"""
    node_id, records, feature_names, config = job
    split = split_spec_for(config, node_id)
    ds = build_node_dataset(node_id, records, feature_names, split)
    result = train_with_history(ds, train_config_for(config, node_id), split=split)
    model_dir = config.resolved_model_dir
    save_model(os.path.join(model_dir, f"{node_id}{MODEL_SUFFIX}"), result.model)
    save_normalization(os.path.join(model_dir, f"{node_id}.norm.json"), ds.norm)
    save_training_curve(os.path.join(model_dir, f"{node_id}.curve.csv"), result.loss_history)
    return node_id, len(ds.train), result.loss_history[-1], result.model.train_mae, result.wall_time


def _evaluate_node(job):
    model, ds, options = job
    warnings: List[str] = []
    return evaluate_node(model, ds, options, warnings), warnings


def _map(function, jobs: Sequence, workers: int) -> List:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(function, jobs))
    return [function(job) for job in jobs]


class HpcAnomalyDetector:
    """合成データ生成・学習・評価・スコアリングを実行するクラス"""

    def __init__(self, debug: bool = False, debug_log_file: str = None,
                 quiet: bool = False, verbose: bool = False):
        self.debug = debug or bool(debug_log_file)
        self.verbose = verbose or self.debug
        self.debug_log_file = debug_log_file
        self.quiet = quiet
        if self.debug:
            self.setup_debug_logging()

    def print_output(self, message: str, is_error: bool = False):
        """制御された出力（quietモードに対応）"""
        if is_error:
            print(message, file=sys.stderr)
        elif not self.quiet:
            print(message)

    def print_verbose(self, message: str):
        """verbose/debugモード時のみ出力（ステップごとの詳細進捗）"""
        if self.verbose and not self.quiet:
            print(message)

    def setup_debug_logging(self):
        """デバッグログの設定"""
        if self.debug_log_file:
            logging.basicConfig(
                level=logging.DEBUG,
                format='%(message)s',
                force=True,
                handlers=[
                    logging.FileHandler(self.debug_log_file, encoding='utf-8'),
                    logging.StreamHandler()
                ]
            )
            try:
                os.chmod(self.debug_log_file, 0o600)
            except OSError:
                pass
        else:
            logging.basicConfig(level=logging.DEBUG, format='%(message)s')

    def metadata(self, config: RunConfig, command: str) -> dict:
        """レポートの来歴情報（created_at 以外は決定的）"""
        return {
            "tool": "hpc-anomaly-detector",
            "tool_version": __version__,
            "command": command,
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }

    def run_synth(self, config: RunConfig):
        """合成フリートのCSVとマニフェストを生成"""
        data_dir = config.resolved_data_dir
        self.print_verbose(f"合成データを生成中: {config.nodes} ノード, F={config.features}, horizon={config.horizon}")
        mix = FleetMix(config.anomaly_fraction, config.dominant_share, config.anomaly_blocks)
        summary = generate_fleet(config.nodes, mix, config.seed, data_dir, horizon=config.horizon,
                                 feature_count=config.features, core_count=config.core_count,
                                 workers=config.workers)
        for node_id, counts in summary.label_counts.items():
            self.print_output(f"{node_id}: normal={counts['normal']} powersave={counts['powersave']} "
                              f"performance={counts['performance']} idle={counts['idle']}")
        self.print_output(f"{len(summary.nodes)} ノード分のCSVとマニフェストを {data_dir} に保存しました")

    def run_train(self, config: RunConfig):
        """ノードごとにモデルを学習して保存"""
        data = ingest_path(config.resolved_data_dir)
        if not data.nodes:
            raise DataError(f"{config.resolved_data_dir}: レコードがありません")
        os.makedirs(config.resolved_model_dir, exist_ok=True)
        self.print_verbose(f"{len(data.nodes)} ノードを学習します（epochs={config.epochs}, batch={config.batch_size}）")
        jobs = [(node_id, records, data.feature_names, config) for node_id, records in data.nodes.items()]
        for node_id, n_train, final_loss, train_mae, wall in _map(_train_node, jobs, config.workers):
            self.print_output(f"{node_id}: 学習完了 ({wall:.1f} 秒, D_Train={n_train}, "
                              f"最終損失={final_loss:.6f}, 学習MAE={train_mae:.6f})")
        save_run_config(os.path.join(config.resolved_model_dir, "run_config.json"), config)
        self.print_output(f"モデルを {config.resolved_model_dir} に保存しました")

    def load_models(self, model_dir: str) -> Dict[str, object]:
        if not os.path.isdir(model_dir):
            raise DataError(f"{model_dir}: モデルディレクトリが存在しません")
        models = {}
        for name in sorted(os.listdir(model_dir)):
            if name.endswith(MODEL_SUFFIX):
                model = load_model(os.path.join(model_dir, name))
                models[model.node_id] = model
        if not models:
            raise DataError(f"{model_dir}: モデルファイル（*{MODEL_SUFFIX}）が見つかりません")
        return models

    def training_split(self, model, config: RunConfig) -> SplitSpec:
        """モデルに記録された学習時の分割（記録がなければ現在の設定から導出）"""
        if model.split is None:
            return split_spec_for(config, model.node_id)
        if model.split != split_spec_for(config, model.node_id):
            self.print_verbose(f"{model.node_id}: 学習時の分割設定を使用します "
                               f"(train_fraction={model.split.train_fraction}, seed={model.split.rng_seed})")
        return model.split

    def run_eval(self, config: RunConfig):
        """学習済みモデルを評価し、レポートと描画用CSVを出力"""
        models = self.load_models(config.resolved_model_dir)
        data = ingest_path(config.resolved_data_dir)
        if set(models) != set(data.nodes):
            mismatch = sorted(set(models) ^ set(data.nodes))
            raise DataError(f"モデルとデータセットのノードが一致しません: {', '.join(mismatch)}")
        options = evaluation_options_for(config)
        jobs = []
        for node_id in sorted(data.nodes):
            model = models[node_id]
            ds = build_node_dataset(node_id, data.nodes[node_id], data.feature_names,
                                    self.training_split(model, config), norm=model.norm)
            jobs.append((model, ds, options))
        self.print_verbose(f"{len(jobs)} ノードを評価します（プロトコル: {'paper' if config.paper_protocol else 'held-out'}）")

        nodes, warnings = [], []
        for node_report, node_warnings in _map(_evaluate_node, jobs, config.workers):
            nodes.append(node_report)
            warnings.extend(node_warnings)
        report = assemble_report(nodes, options, self.metadata(config, "eval"), warnings)

        report_dir = config.resolved_report_dir
        os.makedirs(report_dir, exist_ok=True)
        write_report_json(os.path.join(report_dir, "report.json"), report)
        write_table1_csv(os.path.join(report_dir, "table1_normalized_errors.csv"), report)
        write_table2_csv(os.path.join(report_dir, "table2_f_scores.csv"), report)
        for node in report.nodes:
            write_trend_csv(os.path.join(report_dir, f"{node.node_id}.trend.csv"), node)
            write_histogram_csv(os.path.join(report_dir, f"{node.node_id}.histogram.csv"), node,
                                config.histogram_bins)
        save_run_config(os.path.join(report_dir, "run_config.json"), config)

        for node in report.nodes:
            f_a = "-" if node.f_anomaly is None else f"{node.f_anomaly:.3f}"
            self.print_output(f"{node.node_id}: n={node.threshold.percentile_n} θ={node.threshold.theta:.6f} "
                              f"F_N={node.f_normal:.3f} F_A={f_a}")
        averages = report.averages
        if averages.get("f_anomaly") is not None:
            self.print_output(f"平均: F_N={averages['f_normal']:.3f} F_A={averages['f_anomaly']:.3f} "
                              f"正規化MAE D_Test^N={averages['normalized_mae_test_normal']:.3f} "
                              f"D_Test^A={averages['normalized_mae_test_anomaly']:.3f}")
        else:
            self.print_output(f"平均: F_N={averages['f_normal']:.3f}")
        for warning in report.warnings:
            self.print_output(f"警告: {warning}", is_error=True)
        self.print_output(f"レポートを {report_dir} に保存しました")

    def run_score(self, config: RunConfig):
        """保存済みモデルでCSVの各レコードをスコアリング"""
        models = self.load_models(config.resolved_model_dir)
        data = ingest_path(config.resolved_data_dir)
        missing = sorted(set(data.nodes) - set(models))
        if missing:
            raise DataError(f"モデルのないノードがあります: {', '.join(missing)}")
        thresholds: Dict[str, Threshold] = load_thresholds(config.report_path) if config.report_path else {}
        output = config.score_output or os.path.join(config.resolved_report_dir, "scores.csv")
        os.makedirs(os.path.dirname(output) or ".", exist_ok=True)

        flagged = 0
        total = 0
        with open(output, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["node_id", "timestamp", "label", "error", "max_feature_error", "verdict"])
            for node_id, records in data.nodes.items():
                model = models[node_id]
                if model.norm is None:
                    raise DataError(f"{node_id}: モデルに正規化パラメータがありません")
                if tuple(model.norm.feature_names) != tuple(data.feature_names):
                    raise DataError(f"{node_id}: モデルの特徴量名とデータの特徴量名が一致しません")
                active = drop_idle(records)
                if not active:
                    continue
                matrix = normalize_matrix(records_matrix(active), model.norm)
                errors = reconstruction_errors(model, matrix)
                worst = max_feature_errors(model, matrix)
                threshold = thresholds.get(node_id)
                for record, error, peak in zip(active, errors, worst):
                    verdict = classify(float(error), threshold).value if threshold else ""
                    flagged += int(verdict == "anomaly")
                    total += 1
                    writer.writerow([node_id, record.timestamp, record.label.csv_value,
                                     repr(float(error)), repr(float(peak)), verdict])
        if thresholds:
            self.print_output(f"{total} 件中 {flagged} 件を異常と判定しました")
        self.print_output(f"スコアを {output} に保存しました")

    def run(self, command: str, config: RunConfig) -> int:
        """メイン実行処理（終了コードを返す）"""
        handlers = {"synth": self.run_synth, "train": self.run_train,
                    "eval": self.run_eval, "score": self.run_score}
        started = time.perf_counter()
        try:
            handlers[command](config)
            self.print_verbose(f"処理時間: {time.perf_counter() - started:.1f} 秒")
            self.print_output("処理が正常に完了しました。")
            return EXIT_OK
        except ConfigError as e:
            self.print_output(f"設定エラー: {e}", is_error=True)
            return EXIT_CONFIG
        except DivergenceError as e:
            self.print_output(f"学習が発散しました: {e}", is_error=True)
            return EXIT_DIVERGENCE
        except DataError as e:
            self.print_output(f"データエラー: {e}", is_error=True)
            return EXIT_DATA
        except Exception as e:
            self.print_output(f"処理中にエラーが発生しました: {e}", is_error=True)
            if self.debug:
                logging.exception("詳細エラー")
            return EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='設定ファイル（RunConfig のJSON表現）。コマンドライン指定が優先されます')
    common.add_argument('--seed', type=int, help='乱数シード（環境変数 HPC_AD_SEED でも指定可能、デフォルト: 42）')
    common.add_argument('--epochs', type=int, help='学習エポック数（デフォルト: 100）')
    common.add_argument('--batch-size', dest='batch_size', type=int, help='ミニバッチサイズ（デフォルト: 32）')
    common.add_argument('--learning-rate', dest='learning_rate', type=float, help='Adam の学習率（デフォルト: 0.001）')
    common.add_argument('--l1', dest='l1_lambda', type=float, help='隠れ層のL1活性正則化係数（デフォルト: 1e-5）')
    common.add_argument('--percentiles', help='閾値探索の候補パーセンタイル（例: "90..99", "90,95,99"）')
    common.add_argument('--paper-protocol', dest='paper_protocol', action='store_true', default=None,
                        help='閾値をD_Train∪D_Test^Nから求め、テスト集合全体で探索・評価する（比較用）')
    common.add_argument('--out', dest='out_dir', help='出力ディレクトリ（デフォルト: output）')
    common.add_argument('--data', dest='data_dir', help='テレメトリCSVのファイルまたはディレクトリ（デフォルト: <out>/data）')
    common.add_argument('--models', dest='model_dir', help='モデルディレクトリ（デフォルト: <out>/models）')
    common.add_argument('--report', dest='report_path', help='score で閾値を読み込む評価レポートJSON')
    common.add_argument('--output', '-o', dest='score_output', help='score の出力CSV（デフォルト: <out>/reports/scores.csv）')
    common.add_argument('--workers', type=int, help='ノード単位の並列ワーカー数（デフォルト: 1）')
    common.add_argument('--verbose', '-v', action='store_true', help='詳細な進捗を表示')
    common.add_argument('--debug', '-d', action='store_true', help='デバッグ情報を表示（--verbose の内容に加え、エポックごとの損失など）')
    common.add_argument('--debug-log', help='デバッグ情報をファイルに保存（ファイル名を指定）')
    common.add_argument('--quiet', '-q', action='store_true', help='エラー以外の出力を抑制')

    # synth 専用（他のサブコマンドはCSVから形状を読み取る）
    synth_only = argparse.ArgumentParser(add_help=False)
    synth_only.add_argument('--features', type=int, help='特徴量数 F（デフォルト: 32）')
    synth_only.add_argument('--nodes', type=int, help='合成するノード数（デフォルト: 8）')
    synth_only.add_argument('--horizon', type=int, help='ノードあたりの5分間隔の数（デフォルト: 24000）')

    parser = argparse.ArgumentParser(
        description='HPCノードのテレメトリからオートエンコーダで異常を検知',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  # 合成データ生成 → 学習 → 評価
  python hpc_anomaly_detector.py synth --nodes 8 --features 32 --seed 42
  python hpc_anomaly_detector.py train --epochs 100 --batch-size 32
  python hpc_anomaly_detector.py eval --percentiles 90..99

  # D_Train ∪ D_Test^N の誤差分布から閾値を求め、テスト集合全体で評価
  python hpc_anomaly_detector.py eval --paper-protocol

  # 保存済みモデルと評価レポートの閾値で新しいデータをスコアリング
  python hpc_anomaly_detector.py score --data new.csv --report output/reports/report.json

  # 設定ファイル（コマンドライン指定が優先）
  python hpc_anomaly_detector.py train --config run.json --workers 4

終了コード:
  0  正常終了
  1  異常終了（入出力エラー等）
  2  設定エラー
  3  データエラー（CSV形式、モデル形状、ノード不一致等）
  4  学習の発散（損失が非有限値）
        """
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', required=True)
    subparsers.add_parser('synth', parents=[common, synth_only], help='合成テレメトリCSVとマニフェストを生成')
    subparsers.add_parser('train', parents=[common], help='ノードごとにオートエンコーダを学習')
    subparsers.add_parser('eval', parents=[common], help='閾値探索と評価レポートの出力')
    subparsers.add_parser('score', parents=[common], help='保存済みモデルでレコードごとの再構成誤差を出力')
    return parser


CONFIG_FLAGS = ("seed", "features", "nodes", "horizon", "epochs", "batch_size", "learning_rate", "l1_lambda",
                "percentiles", "paper_protocol", "out_dir", "data_dir", "model_dir", "report_path",
                "score_output", "workers")


def main():
    """メイン関数"""
    parser = build_parser()
    args = parser.parse_args()

    debug_enabled = args.debug or bool(args.debug_log)
    verbose_enabled = args.verbose or debug_enabled

    detector = HpcAnomalyDetector(debug=debug_enabled, debug_log_file=args.debug_log,
                                  quiet=args.quiet, verbose=verbose_enabled)
    try:
        config = resolve_config({name: getattr(args, name, None) for name in CONFIG_FLAGS}, args.config)
    except ConfigError as e:
        detector.print_output(f"設定エラー: {e}", is_error=True)
        sys.exit(EXIT_CONFIG)

    sys.exit(detector.run(args.command, config))


if __name__ == '__main__':
    main()
