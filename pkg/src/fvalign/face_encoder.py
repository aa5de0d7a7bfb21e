"""
Face encoder: four multi-branch convolution blocks, each followed by CBAM,
then global average pooling and a 1x1 convolution to the embedding size.

A block sums three same-shaped branches: ReLU(1x1 conv), ReLU(3x3 conv) and
a linear 3x3 max-pool -> 1x1 conv branch.  It then halves the spatial size
with a 2x2 max-pool (ceil mode, so a 1x1 map stays 1x1).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import Tensor


@dataclass
class FaceEncoderConfig:
    in_channels: int = 3
    image_size: int = 64
    widths: tuple = (16, 32, 64, 128)
    embedding_dim: int = 256
    cbam_reduction: int = 8
    use_cbam: bool = True
    spatial_first: bool = False  # ablation: reverse the CBAM order
    pool_relu: bool = False      # ablation: ReLU on the pooling branch too
    # fixed input standardization: (pixel - shift) / scale
    input_shift: float = 0.5
    input_scale: float = 0.25

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"FaceEncoderConfig.widths must be positive, got {self.widths}")
        if self.image_size < 1 or self.embedding_dim < 1 or self.cbam_reduction < 1 or self.input_scale <= 0:
            raise ValueError("FaceEncoderConfig: sizes must be positive")

    def hidden(self, channels: int) -> int:
        return max(1, channels // self.cbam_reduction)


@dataclass
class FaceEmbedding:
    vector: np.ndarray
    speaker_id: str
    image_id: str


def conv_block(x: Tensor, p: dict, prefix: str, downsample: bool = True,
               pool_relu: bool = False) -> Tensor:
    """ReLU(1x1) + ReLU(3x3) + (pool -> 1x1), then 2x2 max-pool."""
    w1 = p[f"{prefix}.c1.w"]
    if x.ndim != 4 or x.shape[1] != w1.shape[1]:
        raise ShapeError(f"conv_block {prefix}: input {x.shape} does not have "
                         f"{w1.shape[1]} channels")
    b1 = T.relu(T.conv2d(x, w1, p[f"{prefix}.c1.b"]))
    b3 = T.relu(T.conv2d(x, p[f"{prefix}.c3.w"], p[f"{prefix}.c3.b"], padding=1))
    pooled = T.max_pool2d(x, 3, stride=1, padding=1)
    bp = T.conv2d(pooled, p[f"{prefix}.cp.w"], p[f"{prefix}.cp.b"])
    if pool_relu:
        bp = T.relu(bp)
    out = b1 + b3 + bp
    if downsample:
        out = T.max_pool2d(out, 2, stride=2, ceil_mode=True)
    return out


def channel_descriptors(f: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel spatial average and maximum, each (N, C)."""
    n, c, h, w = f.shape
    avg = T.mean(f, axis=(2, 3))
    mx = T.reshape(T.tmax(T.reshape(f, (n, c, h * w)), axis=-1), (n, c))
    return avg, mx


def spatial_descriptors(f: Tensor) -> tuple[Tensor, Tensor]:
    """Channel-wise mean and maximum planes, each (N, 1, H, W)."""
    return T.mean(f, axis=1, keepdims=True), T.tmax(f, axis=1)


def _mlp(v: Tensor, w1, b1, w2, b2) -> Tensor:
    return T.matmul(T.relu(T.matmul(v, w1) + b1), w2) + b2


def channel_attention(f: Tensor, w1, b1, w2, b2) -> tuple[Tensor, Tensor]:
    """Returns (reweighted map, channel weights (N, C))."""
    if f.ndim != 4 or w1.shape[0] != f.shape[1] or w2.shape[1] != f.shape[1]:
        raise ShapeError(f"channel_attention: map {f.shape} vs MLP {w1.shape}/{w2.shape}")
    avg, mx = channel_descriptors(f)
    weights = T.sigmoid(_mlp(avg, w1, b1, w2, b2) + _mlp(mx, w1, b1, w2, b2))
    n, c = weights.shape
    return f * T.reshape(weights, (n, c, 1, 1)), weights


def spatial_attention(f: Tensor, w, b) -> tuple[Tensor, Tensor]:
    """Returns (reweighted map, spatial weights (N, 1, H, W))."""
    if f.ndim != 4 or tuple(w.shape[:2]) != (1, 2):
        raise ShapeError(f"spatial_attention: map {f.shape} vs kernel {w.shape}")
    avg, mx = spatial_descriptors(f)
    k = w.shape[-1]
    weights = T.sigmoid(T.conv2d(T.concat([avg, mx], axis=1), w, b, padding=k // 2))
    return f * weights, weights


def cbam(f: Tensor, p: dict, prefix: str, spatial_first: bool = False) -> Tensor:
    def chan(x):
        return channel_attention(x, p[f"{prefix}.ca.w1"], p[f"{prefix}.ca.b1"],
                                 p[f"{prefix}.ca.w2"], p[f"{prefix}.ca.b2"])[0]

    def spat(x):
        return spatial_attention(x, p[f"{prefix}.sa.w"], p[f"{prefix}.sa.b"])[0]

    return chan(spat(f)) if spatial_first else spat(chan(f))


class FaceEncoder:
    def __init__(self, config: FaceEncoderConfig = None, seed: int = 0):
        self.config = config or FaceEncoderConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

        def conv(name, out_c, in_c, k):
            self.params[f"{name}.w"] = T.kaiming_uniform(rng, (out_c, in_c, k, k), in_c * k * k)
            self.params[f"{name}.b"] = T.zeros((out_c,))

        in_c = cfg.in_channels
        for i, width in enumerate(cfg.widths):
            conv(f"block{i}.c1", width, in_c, 1)
            conv(f"block{i}.c3", width, in_c, 3)
            conv(f"block{i}.cp", width, in_c, 1)
            if cfg.use_cbam:
                hid = cfg.hidden(width)
                self.params[f"block{i}.ca.w1"] = T.kaiming_uniform(rng, (width, hid), width)
                self.params[f"block{i}.ca.b1"] = T.zeros((hid,))
                self.params[f"block{i}.ca.w2"] = T.kaiming_uniform(rng, (hid, width), hid)
                self.params[f"block{i}.ca.b2"] = T.zeros((width,))
                conv(f"block{i}.sa", 1, 2, 7)
            in_c = width
        conv("head", cfg.embedding_dim, in_c, 1)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, images) -> Tensor:
        """Embeddings (N, embedding_dim) for images (N, C, H, W)."""
        x = T.as_tensor(images)
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"face_encode: expected images (N, {expected[0]}, {expected[1]}, "
                             f"{expected[2]}), got {x.shape}")
        x = (x - cfg.input_shift) / cfg.input_scale
        for i in range(len(cfg.widths)):
            x = conv_block(x, self.params, f"block{i}", pool_relu=cfg.pool_relu)
            if cfg.use_cbam:
                x = cbam(x, self.params, f"block{i}", cfg.spatial_first)
        n, c = x.shape[:2]
        pooled = T.reshape(T.mean(x, axis=(2, 3)), (n, c, 1, 1))
        out = T.conv2d(pooled, self.params["head.w"], self.params["head.b"])
        return T.reshape(out, (n, cfg.embedding_dim))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mismatch = set(self.params) ^ set(state)
        if mismatch:
            raise DataError(f"face encoder checkpoint: mismatched parameters {sorted(mismatch)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DataError(f"face encoder checkpoint: {k} has shape {v.shape}, "
                                f"expected {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["widths"] = list(d["widths"])
        return d


def face_encode(encoder: FaceEncoder, image: np.ndarray) -> np.ndarray:
    """Embedding of one (C, H, W) image with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"face_encode: expected a (C, H, W) image, got {image.shape}")
    return encoder.forward(image[None]).data[0]


def encode_batched(encoder: FaceEncoder, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Evaluate many images in fixed-size chunks; output order follows input order."""
    images = np.asarray(images, dtype=np.float64)
    chunks = [encoder.forward(images[i:i + batch_size]).data
              for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks, axis=0)
