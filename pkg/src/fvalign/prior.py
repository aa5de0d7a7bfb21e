"""Speech priors and the residual composition ``FE(face) + prior``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError

PRIOR_KINDS = ("none", "neutral", "female", "male")
GENDERS = ("female", "male")
SUPPORTED_N = (10, 50, 100, 500, 1000)


@dataclass
class PriorVector:
    vector: np.ndarray
    kind: str
    n_sources: int

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise DataError(f"prior kind must be one of {PRIOR_KINDS}, got {self.kind!r}")
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.kind == "none" and np.any(self.vector != 0):
            raise DataError("prior of kind 'none' must be the zero vector")

    @classmethod
    def none(cls, dim: int) -> "PriorVector":
        return cls(np.zeros(dim), "none", 0)


@dataclass
class ConditioningVector:
    vector: np.ndarray
    face_id: str
    prior_kind: str


def _check_gender(g: str) -> str:
    if g not in GENDERS:
        raise DataError(f"gender must be one of {GENDERS}, got {g!r}")
    return g


def compute_neutral_prior(embeddings: Sequence[np.ndarray], genders: Sequence[str],
                          n: int | None = None) -> PriorVector:
    """Mean of ``n`` per-speaker embeddings, half female and half male.

    ``embeddings[i]`` is speaker i's utterance-averaged embedding.  The first
    ``n / 2`` speakers of each gender (in input order) are used.  When ``n`` is
    None, every speaker is used and the set must already be balanced.
    """
    if len(embeddings) != len(genders):
        raise DataError(f"{len(embeddings)} embeddings but {len(genders)} gender labels")
    genders = [_check_gender(g) for g in genders]
    by_gender = {g: [i for i, x in enumerate(genders) if x == g] for g in GENDERS}
    counts = {g: len(v) for g, v in by_gender.items()}
    if n is None:
        if counts["female"] != counts["male"] or counts["female"] == 0:
            raise DataError(f"neutral prior needs a gender-balanced set, got {counts}")
        n = 2 * counts["female"]
    if n < 2 or n % 2:
        raise DataError(f"neutral prior: n must be even and >= 2, got {n}")
    if n > len(embeddings):
        raise DataError(f"neutral prior: n={n} exceeds the {len(embeddings)} available speakers")
    half = n // 2
    if min(counts.values()) < half:
        raise DataError(f"neutral prior: n={n} needs {half} speakers per gender, got {counts}")
    chosen = by_gender["female"][:half] + by_gender["male"][:half]
    vecs = np.asarray([embeddings[i] for i in sorted(chosen)], dtype=np.float64)
    return PriorVector(vecs.mean(axis=0), "neutral", n)


def compute_gender_priors(embeddings: Sequence[np.ndarray],
                          genders: Sequence[str]) -> tuple[PriorVector, PriorVector]:
    """Per-gender mean embeddings as (female, male) priors."""
    if len(embeddings) != len(genders):
        raise DataError(f"{len(embeddings)} embeddings but {len(genders)} gender labels")
    arr = np.asarray(embeddings, dtype=np.float64)
    out = []
    for g in GENDERS:
        idx = [i for i, x in enumerate(genders) if _check_gender(x) == g]
        if not idx:
            raise DataError(f"gender prior: no {g} speakers")
        out.append(PriorVector(arr[idx].mean(axis=0), g, len(idx)))
    return out[0], out[1]


def _same_dim(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dimension mismatch {a.shape} vs {b.shape}")


def compose_conditioning(face_emb: np.ndarray, prior: PriorVector,
                         face_id: str = "") -> ConditioningVector:
    face_emb = np.asarray(face_emb, dtype=np.float64)
    _same_dim("compose_conditioning", face_emb, prior.vector)
    return ConditioningVector(face_emb + prior.vector, face_id, prior.kind)


def residual_target(speech_emb: np.ndarray, prior: PriorVector) -> np.ndarray:
    speech_emb = np.asarray(speech_emb, dtype=np.float64)
    _same_dim("residual_target", speech_emb, prior.vector)
    return speech_emb - prior.vector
