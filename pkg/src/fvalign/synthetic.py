"""
Seeded synthetic datasets: a mel-template speaker task for the speech
encoder, a face task whose speech targets are a hidden linear map of the
images plus a common offset, and the small on-disk fixture used by the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, write_wav
from .io import Manifest, SpeakerRecord, atomic_write, dump_manifest, json_text, write_ppm


def mel_template_task(n_speakers: int = 4, windows_per_speaker: int = 8, frames: int = 80,
                      n_mels: int = 40, noise: float = 0.1, seed: int = 0,
                      template_seed: int | None = None) -> dict[str, np.ndarray]:
    """Each speaker is a fixed random (frames, n_mels) template; windows add Gaussian noise.

    ``template_seed`` fixes the speaker templates independently of the noise
    draws, so fresh windows of the same speakers can be generated.
    """
    trng = np.random.default_rng(seed if template_seed is None else template_seed)
    templates = trng.standard_normal((n_speakers, frames, n_mels))
    rng = np.random.default_rng(seed + 1_000_003)
    return {f"spk{k:02d}": templates[k] + noise * rng.standard_normal(
        (windows_per_speaker, frames, n_mels)) for k in range(n_speakers)}


def _image_basis(n_latent: int, size: int) -> np.ndarray:
    """Fixed smooth patterns (n_latent, 3, size, size) with unit RMS."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    rng = np.random.default_rng(12345)
    basis = np.empty((n_latent, 3, size, size))
    for j in range(n_latent):
        colour = rng.uniform(-1, 1, size=3)
        fx, fy = rng.integers(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        pattern = np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
        basis[j] = colour[:, None, None] * (0.5 + 0.5 * pattern)[None]
        basis[j] /= np.sqrt((basis[j] ** 2).mean())
    return basis


@dataclass
class FaceTask:
    images: np.ndarray        # (K, 3, S, S)
    item_speakers: list       # K speaker ids
    targets: dict             # speaker id -> target embedding
    genders: dict             # speaker id -> "female" / "male"
    offset: np.ndarray        # common component of every target
    clean_images: dict        # speaker id -> noise-free image


def linear_face_task(n_speakers: int = 8, images_per_speaker: int = 4, image_size: int = 64,
                     dim: int = 256, n_latent: int = 3, offset_norm: float = 1.0,
                     residual_norm: float = 1.0, image_noise: float = 0.02,
                     unit_targets: bool = False, seed: int = 0) -> FaceTask:
    """Faces rendered linearly from a per-speaker latent; targets linear in the clean face.

    target(s) = H @ coeffs(clean_image(s)) + offset, where coeffs is the
    (linear) least-squares projection of the image onto the rendering basis.
    With ``unit_targets`` each target is then scaled to unit norm, like the
    speech encoder's utterance embeddings.
    """
    rng = np.random.default_rng(seed)
    basis = _image_basis(n_latent, image_size)
    flat_basis = basis.reshape(n_latent, -1)
    latents = rng.uniform(-1, 1, size=(n_speakers, n_latent))
    hidden = rng.standard_normal((dim, n_latent))
    hidden *= residual_norm / np.sqrt(n_latent / 3.0) / np.linalg.norm(hidden, axis=0).mean()
    offset = rng.standard_normal(dim)
    offset *= offset_norm / np.linalg.norm(offset)
    proj = np.linalg.pinv(flat_basis.T)  # (n_latent, pixels)
    images, speakers, targets, genders, clean = [], [], {}, {}, {}
    for k in range(n_speakers):
        sid = f"spk{k:02d}"
        face = 0.5 + 0.15 * np.tensordot(latents[k], basis, axes=1)
        clean[sid] = face
        target = hidden @ (proj @ (face - 0.5).reshape(-1)) / 0.15 + offset
        targets[sid] = target / np.linalg.norm(target) if unit_targets else target
        genders[sid] = "female" if k % 2 == 0 else "male"
        for _ in range(images_per_speaker):
            noisy = face + image_noise * rng.standard_normal(face.shape)
            images.append(np.clip(noisy, 0.0, 1.0))
            speakers.append(sid)
    return FaceTask(np.stack(images), speakers, targets, genders, offset, clean)


def _voice(rng: np.random.Generator, f0: float, formants: np.ndarray, seconds: float) -> np.ndarray:
    n = int(SAMPLE_RATE * seconds)
    t = np.arange(n) / SAMPLE_RATE
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / SAMPLE_RATE
    signal = np.zeros(n)
    for h in range(1, 25):
        freq = f0 * h
        if freq >= SAMPLE_RATE / 2:
            break
        gain = sum(np.exp(-((freq - f) / 150.0) ** 2) for f in formants) + 0.05
        signal += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(1, 3) * t) ** 2
    signal = signal * envelope + 0.01 * rng.standard_normal(n)
    return 0.5 * signal / np.max(np.abs(signal))


def make_fixture(root, n_speakers: int = 8, utterances: int = 3, images: int = 2,
                 image_size: int = 32, seconds: float = 1.6, seed: int = 0) -> Path:
    """Write a small speaker corpus (WAV, PPM, manifest.jsonl, config.json) under ``root``.

    Speakers alternate female/male; the last quarter of speakers form the test split.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    basis = _image_basis(4, image_size)
    n_test = max(1, n_speakers // 4)
    records = []
    for k in range(n_speakers):
        sid = f"spk{k:02d}"
        gender = "female" if k % 2 == 0 else "male"
        f0 = rng.uniform(180, 250) if gender == "female" else rng.uniform(95, 140)
        formants = np.sort(rng.uniform(300, 3500, size=3))
        utt_paths = []
        for u in range(utterances):
            rel = f"audio/{sid}_{u}.wav"
            atomic_write(root / rel, write_wav(_voice(rng, f0, formants, seconds)))
            utt_paths.append(rel)
        latent = rng.uniform(-1, 1, size=4)
        face = 0.5 + 0.15 * np.tensordot(latent, basis, axes=1)
        img_paths = []
        for i in range(images):
            rel = f"faces/{sid}_{i}.ppm"
            noisy = np.clip(face + 0.02 * rng.standard_normal(face.shape), 0, 1)
            atomic_write(root / rel, write_ppm(noisy))
            img_paths.append(rel)
        split = "test" if k >= n_speakers - n_test else "train"
        records.append(SpeakerRecord(sid, gender, utt_paths, img_paths, split))
    atomic_write(root / "manifest.jsonl", dump_manifest(Manifest(records, root)))
    config = {"seed": seed, "manifest": "manifest.jsonl", "workdir": "work",
              "se_layers": 2, "se_hidden": 16, "embedding_dim": 16, "se_steps": 6,
              "se_lr": 0.01, "se_speakers_per_batch": 4, "se_windows_per_speaker": 2,
              "prior_kind": "neutral", "image_size": image_size, "fe_widths": [4, 4, 8, 8],
              "epochs": 3, "batch_size": 4}
    atomic_write(root / "config.json", json_text(config))
    return root
