"""
Face-encoder training with the tri-item loss, plus alignment metrics and
2-D projections of embedding sets.

The tri-item loss for a triplet (anchor speech A, matching face B, other
face C) is

    (1 - cos(A, B)) + sum((A - B)^2) / n + max(|A - B| - |A - C|, 0)

with Euclidean distances and no margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, NumericError, ShapeError
from .face_encoder import FaceEncoder, encode_batched
from .prior import PriorVector
from .tensor import Tape, Tensor

LOSS_VARIANTS = ("tri-item", "cosine-only", "L2-only", "cosine+L2")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    base_lr: float = 0.01
    lr_decay: float = 0.9
    decay_every: int = 5
    prior_kind: str = "neutral"
    seed: int = 0
    loss_variant: str = "tri-item"

    def __post_init__(self):
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}")
        if self.epochs < 1 or self.batch_size < 2 or self.base_lr <= 0 or self.decay_every < 1:
            raise ValueError("TrainConfig: epochs >= 1, batch_size >= 2, base_lr > 0, decay_every >= 1")


@dataclass
class EpochRecord:
    epoch: int
    variant: str
    loss: float
    mean_cos: float


@dataclass
class MetricReport:
    l1: float
    l2: float
    cos: float
    n_pairs: int

    def as_dict(self) -> dict:
        return {"L1": self.l1, "L2": self.l2, "Cos": self.cos, "n_pairs": self.n_pairs}


@dataclass
class ProjectionResult:
    coords: np.ndarray
    labels: list
    silhouette: float
    per_speaker: dict = field(default_factory=dict)
    explained_variance: tuple = ()


# ---------------------------------------------------------------- losses


def tri_item_loss(a, b, c, variant: str = "tri-item") -> Tensor:
    """Mean loss over a batch of triplets; 1-D inputs are treated as a single triplet.

    ``variant`` selects the full tri-item loss or one of the ablations
    (cosine-only, L2-only, cosine+L2).
    """
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    a, b, c = T.as_tensor(a), T.as_tensor(b), T.as_tensor(c)
    if not (a.shape == b.shape == c.shape):
        raise ShapeError(f"tri_item_loss: shapes differ {a.shape}, {b.shape}, {c.shape}")
    if a.ndim == 1:
        a, b, c = (T.reshape(t, (1, -1)) for t in (a, b, c))
    n = a.shape[-1]
    terms = []
    if variant in ("tri-item", "cosine-only", "cosine+L2"):
        na, nb = T.l2_norm(a, axis=-1), T.l2_norm(b, axis=-1)
        if np.any(na.data == 0) or np.any(nb.data == 0):
            raise NumericError("tri_item_loss: cosine term undefined for a zero-norm vector")
        # relu only trims rounding below zero when A and B are parallel
        terms.append(T.relu(1.0 - T.tsum(a * b, axis=-1) / (na * nb)))
    diff = a - b
    if variant in ("tri-item", "L2-only", "cosine+L2"):
        terms.append(T.tsum(diff * diff, axis=-1) / n)
    if variant == "tri-item":
        terms.append(T.relu(T.l2_norm(diff, axis=-1) - T.l2_norm(a - c, axis=-1)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.mean(total)


def sample_negative(speakers: Sequence, rng: np.random.Generator) -> np.ndarray:
    """For each position, a uniformly random index whose speaker differs."""
    speakers = list(speakers)
    if len(set(speakers)) < 2:
        raise DataError("sample_negative: batch needs at least 2 distinct speakers")
    labels = np.asarray(speakers, dtype=object)
    out = np.empty(len(speakers), dtype=np.int64)
    for i, s in enumerate(speakers):
        eligible = np.flatnonzero(labels != s)
        out[i] = eligible[rng.integers(len(eligible))]
    return out


# ---------------------------------------------------------------- training


def _batches(order: np.ndarray, speakers: np.ndarray, size: int) -> list[np.ndarray]:
    """Split ``order`` into batches; a single-speaker batch is merged into a neighbour."""
    batches = [order[i:i + size] for i in range(0, len(order), size)]
    merged = []
    for batch in batches:
        if merged and len(set(speakers[batch])) < 2:
            merged[-1] = np.concatenate([merged[-1], batch])
        else:
            merged.append(batch)
    if len(merged) > 1 and len(set(speakers[merged[0]])) < 2:
        merged[1] = np.concatenate([merged[0], merged[1]])
        merged.pop(0)
    return merged


def alignment_cosines(encoder: FaceEncoder, images: np.ndarray, targets: np.ndarray,
                      prior: PriorVector) -> np.ndarray:
    """cos(target, FE(image) + prior) for each item."""
    composed = encode_batched(encoder, images) + prior.vector
    num = (composed * targets).sum(axis=1)
    den = np.linalg.norm(composed, axis=1) * np.linalg.norm(targets, axis=1)
    return num / den


def validate_training_set(item_speakers: Sequence[str], targets: dict) -> None:
    missing = sorted({s for s in item_speakers if s not in targets})
    if missing:
        raise DataError(f"speakers with face images but no speech embedding: {missing}")


def train_face_encoder(encoder: FaceEncoder, images: np.ndarray, item_speakers: Sequence[str],
                       targets: dict[str, np.ndarray], prior: PriorVector,
                       config: TrainConfig, stop_at_cos: float | None = None) -> list[EpochRecord]:
    """Train ``encoder`` in place so that FE(face) + prior approaches the speech embedding.

    ``images`` is (K, C, H, W) with ``item_speakers[k]`` naming each image's
    speaker; ``targets`` maps speaker id to its speech embedding.  Returns one
    record per epoch with the mean training loss and the post-epoch mean
    cos(A, B) over all items.  Training ends early once the mean cosine
    reaches ``stop_at_cos``.
    """
    images = np.asarray(images, dtype=np.float64)
    speakers = np.asarray(list(item_speakers), dtype=object)
    if len(speakers) != len(images):
        raise DataError(f"{len(images)} images but {len(speakers)} speaker labels")
    validate_training_set(speakers, targets)
    if len(set(speakers)) < 2:
        raise DataError("sample_negative: training set needs at least 2 distinct speakers")
    anchor = np.stack([np.asarray(targets[s], dtype=np.float64) for s in speakers])
    if anchor.shape[1] != encoder.config.embedding_dim or prior.vector.shape != (anchor.shape[1],):
        raise ShapeError(f"embedding dims differ: speech {anchor.shape[1]}, "
                         f"face {encoder.config.embedding_dim}, prior {prior.vector.shape}")
    rng = np.random.default_rng(config.seed)
    params = encoder.parameters()
    state = T.AdamState.init(params, lr=config.base_lr)
    records = []
    for epoch in range(config.epochs):
        lr = T.lr_schedule(config.base_lr, epoch, config.lr_decay, config.decay_every)
        losses = []
        for batch in _batches(rng.permutation(len(images)), speakers, config.batch_size):
            neg = sample_negative(speakers[batch], rng)
            with Tape() as tape:
                composed = encoder.forward(images[batch]) + prior.vector
                loss = tri_item_loss(anchor[batch], composed, composed[neg], config.loss_variant)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"train_face_encoder: loss became {value} in epoch {epoch + 1}")
            losses.append(value)
            T.adam_step(params, tape.backward(loss, params), state, lr)
        mean_cos = float(alignment_cosines(encoder, images, anchor, prior).mean())
        if not np.isfinite(mean_cos):
            raise NumericError(f"train_face_encoder: non-finite outputs after epoch {epoch + 1}")
        records.append(EpochRecord(epoch + 1, config.loss_variant, float(np.mean(losses)), mean_cos))
        if stop_at_cos is not None and mean_cos >= stop_at_cos:
            break
    return records


def compare_loss_variants(make_encoder, images, item_speakers, targets, prior,
                          config: TrainConfig, variants: Sequence[str] = LOSS_VARIANTS,
                          stop_at_cos: float | None = None) -> dict[str, list[EpochRecord]]:
    """Train a fresh encoder per loss variant with identical seeds and initialization."""
    out = {}
    for variant in variants:
        cfg = TrainConfig(**{**config.__dict__, "loss_variant": variant})
        out[variant] = train_face_encoder(make_encoder(), images, item_speakers, targets,
                                          prior, cfg, stop_at_cos=stop_at_cos)
    return out


def epochs_to_reach(records: Sequence[EpochRecord], threshold: float) -> int | None:
    for r in records:
        if r.mean_cos >= threshold:
            return r.epoch
    return None


# ---------------------------------------------------------------- metrics


def eval_metrics(references: np.ndarray, candidates: np.ndarray) -> MetricReport:
    """Mean L1 distance, mean L2 distance and mean cosine similarity over pairs."""
    ref = np.atleast_2d(np.asarray(references, dtype=np.float64))
    cand = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if ref.size == 0 or cand.size == 0:
        raise DataError("eval_metrics: no pairs")
    if ref.shape != cand.shape:
        raise ShapeError(f"eval_metrics: shapes differ {ref.shape} vs {cand.shape}")
    diff = ref - cand
    norms = np.linalg.norm(ref, axis=1) * np.linalg.norm(cand, axis=1)
    if np.any(norms == 0):
        raise NumericError("eval_metrics: cosine undefined for a zero vector")
    cos = np.clip((ref * cand).sum(axis=1) / norms, -1.0, 1.0)
    return MetricReport(l1=float(np.abs(diff).sum(axis=1).mean()),
                        l2=float(np.linalg.norm(diff, axis=1).mean()),
                        cos=float(cos.mean()), n_pairs=len(ref))


# ---------------------------------------------------------------- projection


def _top_eigen(cov: np.ndarray, against=(), iters: int = 5000, tol: float = 1e-13):
    """Leading eigenpair by power iteration, kept orthogonal to the ``against`` axes."""

    def orth(u):
        for a in against:
            u = u - (u @ a) * a
        return u

    v = orth(np.random.default_rng(0).standard_normal(cov.shape[0]))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = orth(cov @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        done = np.linalg.norm(w - v) < tol
        v, lam = w, float(w @ cov @ w)
        if done:
            break
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return lam, v


def pca_2d(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Project mean-centred rows onto the top two principal axes (power iteration + deflation)."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(1, len(x) - 1)
    if np.trace(cov) == 0.0:
        raise DataError("project_embeddings: all embeddings are identical")
    axes, variances = [], []
    for _ in range(2):
        lam, v = _top_eigen(cov, axes)
        axes.append(v)
        variances.append(max(lam, 0.0))
        cov = cov - lam * np.outer(v, v)
    return centered @ np.stack(axes, axis=1), tuple(variances)


def silhouette_samples(points: np.ndarray, labels: Sequence) -> np.ndarray:
    labels = np.asarray(list(labels), dtype=object)
    dist = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    out = np.zeros(len(points))
    groups = {lab: np.flatnonzero(labels == lab) for lab in dict.fromkeys(labels)}
    for i, lab in enumerate(labels):
        own = groups[lab]
        if len(own) < 2:
            continue
        a = dist[i, own].sum() / (len(own) - 1)
        b = min(dist[i, idx].mean() for other, idx in groups.items() if other != lab)
        denom = max(a, b)
        out[i] = 0.0 if denom == 0 else (b - a) / denom
    return out


def project_embeddings(embeddings: np.ndarray, labels: Sequence) -> ProjectionResult:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    if len(embeddings) < 3 or len(set(labels)) < 2:
        raise DataError("project_embeddings: need >= 3 embeddings from >= 2 speakers")
    if len(labels) != len(embeddings):
        raise DataError(f"{len(embeddings)} embeddings but {len(labels)} labels")
    coords, variances = pca_2d(embeddings)
    scores = silhouette_samples(coords, labels)
    per = {lab: float(scores[[i for i, x in enumerate(labels) if x == lab]].mean())
           for lab in dict.fromkeys(labels)}
    return ProjectionResult(coords, labels, float(scores.mean()), per, variances)


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def scatter_svg(result: ProjectionResult, size: int = 480, margin: int = 24) -> str:
    """Minimal SVG scatter plot, one colour per speaker."""
    xy = result.coords
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    scaled = margin + (xy - lo) / span * (size - 2 * margin)
    colours = {lab: _PALETTE[i % len(_PALETTE)] for i, lab in enumerate(dict.fromkeys(result.labels))}
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for (px, py), lab in zip(scaled, result.labels):
        lines.append(f'<circle cx="{px:.2f}" cy="{size - py:.2f}" r="4" '
                     f'fill="{colours[lab]}"><title>{lab}</title></circle>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
