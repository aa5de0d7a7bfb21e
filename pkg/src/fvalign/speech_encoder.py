"""
Stacked-LSTM speaker encoder trained with the softmax GE2E loss.

Each layer is a standard LSTM followed by a linear projection; the projected
sequence feeds the next layer.  A window's embedding is the last layer's
projection at the final frame, L2-normalized.  An utterance embedding is the
mean of its window embeddings, normalized again.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .audio import MelSpectrogram, WindowSpec, window_utterance
from .errors import DataError, NumericError, ShapeError
from .tensor import Tape, Tensor


@dataclass
class SpeechEncoderConfig:
    n_layers: int = 3
    hidden_size: int = 256
    projection_dim: int = 256
    n_mels: int = 40
    window_frames: int = 80
    # Open question in the method description: default normalizes only after averaging.
    normalize_windows: bool = False

    def __post_init__(self):
        for name in ("n_layers", "hidden_size", "projection_dim", "n_mels", "window_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"SpeechEncoderConfig.{name} must be >= 1")

    @classmethod
    def toy(cls, **kw) -> "SpeechEncoderConfig":
        return cls(**{"hidden_size": 32, "projection_dim": 32, **kw})


@dataclass
class SpeechEmbedding:
    vector: np.ndarray
    speaker_id: str
    utterance_id: str


@dataclass
class Ge2eParams:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, w: float = 10.0, b: float = -5.0) -> "Ge2eParams":
        return cls(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))

    def clamp(self, floor: float = 1e-6) -> None:
        self.w.data = np.maximum(self.w.data, floor)


class SpeechEncoder:
    def __init__(self, config: SpeechEncoderConfig, seed: int = 0, zero: bool = False):
        self.config = config
        rng = np.random.default_rng(seed)
        h = config.hidden_size
        self.params: dict[str, Tensor] = {}
        in_dim = config.n_mels
        for layer in range(config.n_layers):
            shapes = {"wx": ((in_dim, 4 * h), in_dim), "wh": ((h, 4 * h), h),
                      "b": ((4 * h,), h)}
            for name, (shape, fan_in) in shapes.items():
                self.params[f"lstm{layer}.{name}"] = (
                    T.zeros(shape) if zero else T.fan_in_uniform(rng, shape, fan_in))
            proj_shape = (h, config.projection_dim)
            self.params[f"lstm{layer}.proj"] = (
                T.zeros(proj_shape) if zero else T.kaiming_uniform(rng, proj_shape, h))
            in_dim = config.projection_dim

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _layer(self, x: Tensor, layer: int, last: bool) -> Tensor:
        p = self.params
        h_size = self.config.hidden_size
        batch, steps, _ = x.shape
        xw = T.matmul(x, p[f"lstm{layer}.wx"]) + p[f"lstm{layer}.b"]
        h = c = None
        outputs = []
        for t in range(steps):
            gates = xw[:, t, :]
            if h is not None:
                gates = gates + T.matmul(h, p[f"lstm{layer}.wh"])
            sig = T.sigmoid(gates)
            i = sig[:, :h_size]
            f = sig[:, h_size:2 * h_size]
            o = sig[:, 3 * h_size:]
            g = T.tanh(gates[:, 2 * h_size:3 * h_size])
            c = i * g if c is None else f * c + i * g
            h = o * T.tanh(c)
            if not last:
                outputs.append(h)
        proj = p[f"lstm{layer}.proj"]
        if last:
            return T.matmul(h, proj)
        return T.matmul(T.stack(outputs, axis=1), proj)

    def project(self, windows) -> Tensor:
        """Un-normalized final-frame projection for a batch (B, frames, n_mels)."""
        x = T.as_tensor(windows)
        cfg = self.config
        if x.ndim != 3 or x.shape[2] != cfg.n_mels:
            raise ShapeError(f"speech encoder: expected (B, frames, {cfg.n_mels}), got {x.shape}")
        for layer in range(cfg.n_layers):
            x = self._layer(x, layer, last=layer == cfg.n_layers - 1)
        return x

    def forward(self, windows) -> Tensor:
        """Unit-norm window embeddings, shape (B, projection_dim)."""
        return T.normalize(self.project(windows), axis=-1)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise DataError(f"speech encoder checkpoint: mismatched parameters {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DataError(f"speech encoder checkpoint: {k} has shape {v.shape}, "
                                f"expected {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def config_dict(self) -> dict:
        return asdict(self.config)


def lstm_stack_forward(encoder: SpeechEncoder, window: np.ndarray) -> np.ndarray:
    """Embedding of a single (window_frames, n_mels) window."""
    cfg = encoder.config
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (cfg.window_frames, cfg.n_mels):
        raise ShapeError(f"lstm_stack_forward: expected window "
                         f"({cfg.window_frames}, {cfg.n_mels}), got {window.shape}")
    return encoder.forward(window[None]).data[0]


def aggregate_utterance(window_embeddings: Sequence[np.ndarray],
                        normalize_windows: bool = False) -> np.ndarray:
    """Average window embeddings and L2-normalize the mean."""
    if len(window_embeddings) == 0:
        raise DataError("aggregate_utterance: no window embeddings")
    stacked = np.asarray(window_embeddings, dtype=np.float64)
    if normalize_windows:
        norms = np.linalg.norm(stacked, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise NumericError("aggregate_utterance: zero-norm window embedding")
        stacked = stacked / norms
    mean = stacked.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise NumericError("aggregate_utterance: window embeddings average to the zero vector")
    return mean / norm


def embed_windows(encoder: SpeechEncoder, windows: np.ndarray) -> np.ndarray:
    """Per-window embeddings without recording a tape."""
    if encoder.config.normalize_windows:
        return encoder.forward(windows).data
    return encoder.project(windows).data


def embed_utterance(encoder: SpeechEncoder, mel: MelSpectrogram,
                    spec: WindowSpec = WindowSpec()) -> np.ndarray:
    windows = np.stack(window_utterance(mel, spec))
    return aggregate_utterance(embed_windows(encoder, windows),
                               normalize_windows=encoder.config.normalize_windows)


def ge2e_similarity(embeddings: Tensor) -> Tensor:
    """Cosine similarity of every utterance to every speaker centroid, shape (N, M, N).

    The centroid of an utterance's own speaker excludes that utterance.
    """
    n, m, d = embeddings.shape
    sums = T.tsum(embeddings, axis=1)
    centroids = sums / m
    exclusive = (T.reshape(sums, (n, 1, d)) - embeddings) / (m - 1)
    flat = T.normalize(T.reshape(embeddings, (n * m, d)), axis=-1)
    s_all = T.reshape(T.matmul(flat, T.transpose(T.normalize(centroids, axis=-1))), (n, m, n))
    s_own = T.cosine_similarity(embeddings, exclusive, axis=-1)
    mask = np.eye(n)[:, None, :]
    return s_all * (1.0 - mask) + T.reshape(s_own, (n, m, 1)) * mask


def ge2e_loss(embeddings, params: Ge2eParams) -> Tensor:
    """Softmax GE2E loss for embeddings shaped (N speakers, M utterances, D)."""
    e = T.as_tensor(embeddings)
    if e.ndim != 3:
        raise ShapeError(f"ge2e_loss: expected (N, M, D), got {e.shape}")
    n, m, _ = e.shape
    if n < 2 or m < 2:
        raise DataError(f"ge2e_loss: need N >= 2 speakers and M >= 2 utterances, got N={n}, M={m}")
    logits = params.w * ge2e_similarity(e) + params.b
    logp = T.log_softmax(logits, axis=-1)
    mask = np.eye(n)[:, None, :]
    return -T.tsum(logp * mask) / (n * m)


def train_speech_encoder(encoder: SpeechEncoder, windows_by_speaker: dict[str, np.ndarray],
                         steps: int, speakers_per_batch: int = 4, utterances_per_speaker: int = 4,
                         lr: float = 0.001, seed: int = 0, steps_per_epoch: int = 10,
                         ge2e: Ge2eParams | None = None) -> tuple[Ge2eParams, list[float]]:
    """Adam on GE2E over random (speakers x windows) batches; returns params and loss history.

    ``windows_by_speaker`` maps speaker id to an array (K, frames, n_mels).
    The learning rate decays by 0.9 every 5 "epochs" of ``steps_per_epoch`` steps.
    """
    speakers = sorted(windows_by_speaker)
    if len(speakers) < 2:
        raise DataError(f"train_speech_encoder: need >= 2 speakers, got {len(speakers)}")
    n = min(speakers_per_batch, len(speakers))
    rng = np.random.default_rng(seed)
    ge2e = ge2e or Ge2eParams.init()
    params = encoder.parameters() + [ge2e.w, ge2e.b]
    state = T.AdamState.init(params, lr=lr)
    history = []
    for step in range(steps):
        chosen = rng.choice(len(speakers), size=n, replace=False)
        batch = []
        for k in sorted(chosen):
            pool = windows_by_speaker[speakers[k]]
            idx = rng.choice(len(pool), size=utterances_per_speaker,
                             replace=len(pool) < utterances_per_speaker)
            batch.append(pool[idx])
        batch = np.stack(batch)
        frames, mels = batch.shape[2:]
        with Tape() as tape:
            emb = encoder.forward(batch.reshape(n * utterances_per_speaker, frames, mels))
            loss = ge2e_loss(T.reshape(emb, (n, utterances_per_speaker, -1)), ge2e)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"train_speech_encoder: loss became {value} at step {step}")
        history.append(value)
        grads = tape.backward(loss, params)
        T.adam_step(params, grads, state, T.lr_schedule(lr, step // steps_per_epoch))
        ge2e.clamp()
    return ge2e, history
