"""
スパースオートエンコーダ
Sparse autoencoder

F → 10·F（ReLU、L1活性正則化）→ F（線形）の3層オートエンコーダを numpy で実装します。
学習は平均絶対誤差 + L1 活性項を Adam で最小化します。
Three-layer dense autoencoder trained with Adam on mean absolute error plus an
L1 activity penalty on the hidden layer; per-record reconstruction error is the
anomaly score.
"""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from dataset_pipeline import NormalizationParams, SplitSpec
from telemetry import ConfigError, DataError, NodeDataset, TelemetryError, records_matrix

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
HIDDEN_MULTIPLIER = 10


class DivergenceError(TelemetryError, ArithmeticError):
    """学習中に損失またはパラメータが非有限値になった"""


@dataclass(frozen=True)
class TrainConfig:
    """学習ハイパーパラメータ"""

    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    l1_lambda: float = 1e-5
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs は1以上で指定してください: {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size は1以上で指定してください: {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate は正の値で指定してください: {self.learning_rate}")
        if self.l1_lambda < 0:
            raise ConfigError(f"l1_lambda は0以上で指定してください: {self.l1_lambda}")


@dataclass(frozen=True, eq=False)
class LayerParams:
    """全結合層の重み（out × in）とバイアス（out）"""

    weights: np.ndarray
    biases: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.weights.shape)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases)))


@dataclass(frozen=True, eq=False)
class AutoencoderModel:
    """1ノード分の学習済みオートエンコーダ"""

    encoder: LayerParams
    decoder: LayerParams
    hyper: TrainConfig
    norm: Optional[NormalizationParams] = None
    node_id: str = ""
    train_mae: float = float("nan")
    split: Optional[SplitSpec] = None  # D_Train を切り出した分割設定

    @property
    def feature_count(self) -> int:
        return int(self.encoder.weights.shape[1])

    @property
    def hidden_width(self) -> int:
        return int(self.encoder.weights.shape[0])

    def parameters(self) -> List[np.ndarray]:
        return [self.encoder.weights, self.encoder.biases, self.decoder.weights, self.decoder.biases]


class Gradients(NamedTuple):
    """全パラメータの勾配（parameters() と同じ順序）"""

    encoder_weights: np.ndarray
    encoder_biases: np.ndarray
    decoder_weights: np.ndarray
    decoder_biases: np.ndarray


@dataclass
class AdamState:
    """Adam の1次・2次モーメントとステップ数"""

    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p, dtype=np.float64) for p in params],
                   [np.zeros_like(p, dtype=np.float64) for p in params], 0)


@dataclass(frozen=True)
class TrainResult:
    model: AutoencoderModel
    loss_history: Tuple[float, ...] = field(default_factory=tuple)
    wall_time: float = 0.0


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


def _build_model(params: Sequence[np.ndarray], cfg: TrainConfig, norm=None, node_id: str = "",
                 train_mae: float = float("nan")) -> AutoencoderModel:
    return AutoencoderModel(
        encoder=LayerParams(_readonly(params[0]), _readonly(params[1])),
        decoder=LayerParams(_readonly(params[2]), _readonly(params[3])),
        hyper=cfg, norm=norm, node_id=node_id, train_mae=float(train_mae),
    )


def _glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_model(feature_count: int, cfg: TrainConfig, norm: Optional[NormalizationParams] = None,
               node_id: str = "") -> AutoencoderModel:
    """重みを ±sqrt(6/(fan_in+fan_out)) の一様分布、バイアスを0で初期化"""
    if feature_count < 1:
        raise ValueError(f"特徴量数は1以上で指定してください: {feature_count}")
    hidden = HIDDEN_MULTIPLIER * feature_count
    rng = np.random.default_rng(cfg.rng_seed)
    params = [
        _glorot_uniform(rng, hidden, feature_count), np.zeros(hidden),
        _glorot_uniform(rng, feature_count, hidden), np.zeros(feature_count),
    ]
    return _build_model(params, cfg, norm=norm, node_id=node_id)


def _forward_params(params: Sequence[np.ndarray], batch: np.ndarray):
    pre = batch @ params[0].T + params[1]
    hidden = np.maximum(pre, 0.0)
    reconstruction = hidden @ params[2].T + params[3]
    return pre, hidden, reconstruction


def _check_input(model: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.feature_count:
        raise DataError(f"入力の特徴量数 {x.shape[-1]} がモデルの特徴量数 {model.feature_count} と一致しません")
    if not np.all(np.isfinite(x)):
        raise DataError("入力に非有限値（NaN/Inf）が含まれています")
    return x


def forward(model: AutoencoderModel, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """1レコードの (隠れ層活性, 再構成) を返す"""
    x = _check_input(model, x)
    _, hidden, reconstruction = _forward_params(model.parameters(), x)
    return hidden, reconstruction


def forward_batch(model: AutoencoderModel, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """N×F 行列の (隠れ層活性, 再構成) を返す"""
    batch = _check_input(model, np.atleast_2d(batch))
    _, hidden, reconstruction = _forward_params(model.parameters(), batch)
    return hidden, reconstruction


def loss(x: np.ndarray, reconstruction: np.ndarray, hidden: np.ndarray, l1_lambda: float) -> float:
    """1レコードの損失: 平均絶対誤差 + l1_lambda · Σ|hidden|"""
    x = np.asarray(x, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    if x.shape != reconstruction.shape:
        raise DataError(f"入力と再構成の形状が一致しません: {x.shape} != {reconstruction.shape}")
    return float(np.mean(np.abs(x - reconstruction)) + l1_lambda * np.sum(np.abs(hidden)))


def _gradients(params: Sequence[np.ndarray], batch: np.ndarray, l1_lambda: float) -> Tuple[Gradients, float]:
    n, width = batch.shape
    pre, hidden, reconstruction = _forward_params(params, batch)
    residual = reconstruction - batch
    batch_loss = float(np.mean(np.abs(residual)) + l1_lambda * np.sum(hidden) / n)

    # np.sign(0) == 0: 残差0・活性0での劣勾配は0
    d_out = np.sign(residual) / (width * n)
    d_dec_w = d_out.T @ hidden
    d_dec_b = d_out.sum(axis=0)
    d_hidden = d_out @ params[2] + (l1_lambda / n) * np.sign(hidden)
    d_pre = d_hidden * (pre > 0)
    d_enc_w = d_pre.T @ batch
    d_enc_b = d_pre.sum(axis=0)
    return Gradients(d_enc_w, d_enc_b, d_dec_w, d_dec_b), batch_loss


def backward(model: AutoencoderModel, minibatch: np.ndarray, l1_lambda: Optional[float] = None) -> Gradients:
    """ミニバッチ平均損失の全パラメータに対する勾配"""
    batch = _check_input(model, np.atleast_2d(minibatch))
    if batch.shape[0] == 0:
        raise DataError("ミニバッチが空です")
    lam = model.hyper.l1_lambda if l1_lambda is None else l1_lambda
    grads, _ = _gradients(model.parameters(), batch, lam)
    return grads


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              cfg: TrainConfig) -> Tuple[List[np.ndarray], AdamState]:
    """バイアス補正付きの Adam 更新を1回行い、新しいパラメータと状態を返す"""
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        new_params.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


def reconstruction_errors(model: AutoencoderModel, batch: np.ndarray) -> np.ndarray:
    """各レコードの再構成誤差 E(x) = (1/F)·Σ|x_i − x̂_i|"""
    batch = _check_input(model, np.atleast_2d(batch))
    if batch.shape[0] == 0:
        return np.zeros(0)
    _, _, reconstruction = _forward_params(model.parameters(), batch)
    return np.mean(np.abs(batch - reconstruction), axis=1)


def reconstruction_error(model: AutoencoderModel, x: np.ndarray) -> float:
    """1レコードの再構成誤差（正則化項は含まない）"""
    _, reconstruction = forward(model, x)
    return float(np.mean(np.abs(np.asarray(x, dtype=np.float64) - reconstruction)))


def max_feature_error(model: AutoencoderModel, x: np.ndarray) -> float:
    """特徴量ごとの絶対誤差の最大値（参考値）"""
    _, reconstruction = forward(model, x)
    return float(np.max(np.abs(np.asarray(x, dtype=np.float64) - reconstruction)))


def max_feature_errors(model: AutoencoderModel, batch: np.ndarray) -> np.ndarray:
    batch = _check_input(model, np.atleast_2d(batch))
    if batch.shape[0] == 0:
        return np.zeros(0)
    _, _, reconstruction = _forward_params(model.parameters(), batch)
    return np.max(np.abs(batch - reconstruction), axis=1)


def train_matrix(data: np.ndarray, cfg: TrainConfig, norm: Optional[NormalizationParams] = None,
                 node_id: str = "") -> TrainResult:
    """正規化済み N×F 行列でオートエンコーダを学習"""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise DataError("学習データが空です")
    started = time.perf_counter()
    model = init_model(data.shape[1], cfg, norm=norm, node_id=node_id)
    params = [np.array(p) for p in model.parameters()]
    state = AdamState.zeros_like(params)
    history: List[float] = []
    n = data.shape[0]

    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.rng_seed, epoch)).permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            batch = data[order[start:start + cfg.batch_size]]
            grads, batch_loss = _gradients(params, batch, cfg.l1_lambda)
            if not np.isfinite(batch_loss):
                raise DivergenceError(f"{node_id or 'model'}: 損失が非有限値になりました "
                                      f"(epoch={epoch + 1}, step={step + 1}, loss={batch_loss})")
            params, state = adam_step(params, grads, state, cfg)
            total += batch_loss * batch.shape[0]
        if not all(np.all(np.isfinite(p)) for p in params):
            raise DivergenceError(f"{node_id or 'model'}: パラメータが非有限値になりました (epoch={epoch + 1})")
        history.append(total / n)
        logger.debug("%s epoch %d/%d loss=%.6g", node_id, epoch + 1, cfg.epochs, history[-1])

    trained = _build_model(params, cfg, norm=norm, node_id=node_id)
    train_mae = float(np.mean(reconstruction_errors(trained, data)))
    trained = _build_model(params, cfg, norm=norm, node_id=node_id, train_mae=train_mae)
    return TrainResult(trained, tuple(history), time.perf_counter() - started)


def train(ds: NodeDataset, cfg: TrainConfig) -> AutoencoderModel:
    """D_Train（正規化済み）で1ノードのモデルを学習"""
    return train_with_history(ds, cfg).model


def train_with_history(ds: NodeDataset, cfg: TrainConfig, split: Optional[SplitSpec] = None) -> TrainResult:
    """split を渡すとモデルに記録され、評価時に同じ D_Train / D_Test^N を再構成できます"""
    if not ds.train:
        raise DataError(f"{ds.node_id}: D_Train が空です")
    result = train_matrix(records_matrix(ds.train), cfg, norm=ds.norm, node_id=ds.node_id)
    return replace(result, model=replace(result.model, split=split))


def model_to_dict(model: AutoencoderModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "node_id": model.node_id,
        "F": model.feature_count,
        "hidden": model.hidden_width,
        "hyper": asdict(model.hyper),
        "norm": model.norm.to_dict() if model.norm is not None else None,
        "train_mae": model.train_mae,
        "split": asdict(model.split) if model.split is not None else None,
        "encoder": {"weights": model.encoder.weights.tolist(), "biases": model.encoder.biases.tolist()},
        "decoder": {"weights": model.decoder.weights.tolist(), "biases": model.decoder.biases.tolist()},
    }


def model_from_dict(doc: dict) -> AutoencoderModel:
    """モデルJSONを復元し、F と 10·F に対する形状を検証"""
    try:
        if doc["format_version"] != MODEL_FORMAT_VERSION:
            raise DataError(f"未対応のモデル形式バージョンです: {doc['format_version']}")
        width = int(doc["F"])
        hidden = int(doc["hidden"])
        hyper = TrainConfig(**doc["hyper"])
        norm = NormalizationParams.from_dict(doc["norm"]) if doc.get("norm") is not None else None
        params = [np.array(doc["encoder"]["weights"], dtype=np.float64),
                  np.array(doc["encoder"]["biases"], dtype=np.float64),
                  np.array(doc["decoder"]["weights"], dtype=np.float64),
                  np.array(doc["decoder"]["biases"], dtype=np.float64)]
        node_id = str(doc["node_id"])
        train_mae = float(doc["train_mae"])
        split = SplitSpec(**doc["split"]) if doc.get("split") is not None else None
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"モデルJSONの形式が不正です: {e}") from None

    if hidden != HIDDEN_MULTIPLIER * width:
        raise DataError(f"hidden={hidden} が 10·F={HIDDEN_MULTIPLIER * width} と一致しません")
    expected = [(hidden, width), (hidden,), (width, hidden), (width,)]
    for name, p, shape in zip(("encoder.weights", "encoder.biases", "decoder.weights", "decoder.biases"),
                              params, expected):
        if p.shape != shape:
            raise DataError(f"{name} の形状 {p.shape} が期待値 {shape} と一致しません")
        if not np.all(np.isfinite(p)):
            raise DataError(f"{name} に非有限値が含まれています")
    if norm is not None and norm.feature_count != width:
        raise DataError(f"正規化パラメータの特徴量数 {norm.feature_count} が F={width} と一致しません")
    return replace(_build_model(params, hyper, norm=norm, node_id=node_id, train_mae=train_mae), split=split)


def save_model(path: str, model: AutoencoderModel):
    """モデルを単一のJSON文書として保存"""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model), f, ensure_ascii=False)
        f.write("\n")


def load_model(path: str) -> AutoencoderModel:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: JSONとして読み込めません: {e}") from None
    return model_from_dict(doc)


def save_training_curve(path: str, history: Sequence[float]):
    """学習曲線CSV（epoch, loss）を保存"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, value in enumerate(history, start=1):
            writer.writerow([epoch, repr(float(value))])
