"""
On-disk formats: FVA1 tensor containers, JSON-lines manifests, JSON run
configs, PPM/PGM face images and CSV tables.

FVA1 layout (all integers little-endian)::

    b"FVA1"
    u32  metadata length, then that many bytes of UTF-8 JSON (sorted keys)
    u32  tensor count
    per tensor:
        u16  name length, then the UTF-8 name
        u8   dtype tag (1 = float64)
        u8   ndim, then ndim x u32 dims
        u64  payload length in bytes (must equal 8 * prod(dims))
        payload, float64 little-endian, row-major

Nothing follows the last tensor.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

MAGIC = b"FVA1"
DTYPE_F64 = 1


class ContainerError(DataError):
    pass


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class PayloadMismatchError(ContainerError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- FVA1


@dataclass
class Container:
    tensors: dict
    metadata: dict = field(default_factory=dict)

    @property
    def data(self) -> np.ndarray:
        return self.tensors["data"]


def encode_container(tensors, metadata: dict | None = None) -> bytes:
    if isinstance(tensors, np.ndarray):
        tensors = {"data": tensors}
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"container truncated while reading {what}: need {n} bytes at "
                                 f"offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_container(data: bytes) -> Container:
    if data[:4] != MAGIC:
        raise BadMagicError(f"not an FVA1 container (magic {data[:4]!r})")
    r = _Reader(data)
    r.pos = 4
    (meta_len,) = r.unpack("<I", "metadata length")
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"container metadata is not valid JSON: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        dtype, ndim = r.unpack("<BB", f"header of {name!r}")
        if dtype != DTYPE_F64:
            raise ContainerError(f"tensor {name!r}: unsupported dtype tag {dtype}")
        shape = r.unpack(f"<{ndim}I", f"shape of {name!r}")
        (nbytes,) = r.unpack("<Q", f"payload length of {name!r}")
        expected = 8 * math.prod(shape)
        if nbytes != expected:
            raise PayloadMismatchError(f"tensor {name!r}: shape {shape} needs {expected} bytes, "
                                       f"header declares {nbytes}")
        payload = r.take(nbytes, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise ContainerError(f"{len(data) - r.pos} unexpected trailing bytes after last tensor")
    return Container(tensors, metadata)


def save_container(path, tensors, metadata: dict | None = None) -> None:
    atomic_write(path, encode_container(tensors, metadata))


def load_container(path) -> Container:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"container not found: {path}") from None
    return decode_container(data)


# ---------------------------------------------------------------- manifest

GENDERS = ("female", "male")
SPLITS = ("train", "val", "test")


@dataclass
class SpeakerRecord:
    speaker_id: str
    gender: str
    utterance_paths: list
    face_image_paths: list
    split: str


@dataclass
class Manifest:
    records: list
    root: Path = Path(".")

    def by_split(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def speaker_ids(self) -> list:
        return [r.speaker_id for r in self.records]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def filter_gender(self, gender: str) -> "Manifest":
        return Manifest([r for r in self.records if r.gender == gender], self.root)


def validate_manifest(records: Sequence[SpeakerRecord]) -> None:
    seen: dict[str, str] = {}
    for r in records:
        if r.speaker_id in seen:
            if seen[r.speaker_id] != r.split:
                raise DataError(f"speaker {r.speaker_id!r} appears in both the "
                                f"{seen[r.speaker_id]} and {r.split} splits")
            raise DataError(f"duplicate speaker id {r.speaker_id!r}")
        seen[r.speaker_id] = r.split


def parse_manifest(text: str, root=".") -> Manifest:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DataError(f"manifest line {lineno}: expected an object")
        required = {"speaker_id", "gender", "utterance_paths", "face_image_paths", "split"}
        missing = required - obj.keys()
        unknown = obj.keys() - required
        if missing or unknown:
            raise DataError(f"manifest line {lineno}: missing keys {sorted(missing)}, "
                            f"unknown keys {sorted(unknown)}")
        if obj["gender"] not in GENDERS:
            raise DataError(f"manifest line {lineno}: gender must be one of {GENDERS}")
        if obj["split"] not in SPLITS:
            raise DataError(f"manifest line {lineno}: split must be one of {SPLITS}")
        records.append(SpeakerRecord(str(obj["speaker_id"]), obj["gender"],
                                     list(obj["utterance_paths"]),
                                     list(obj["face_image_paths"]), obj["split"]))
    validate_manifest(records)
    return Manifest(records, Path(root))


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    return parse_manifest(text, path.parent)


def dump_manifest(manifest: Manifest) -> str:
    lines = []
    for r in manifest.records:
        lines.append(json.dumps({"speaker_id": r.speaker_id, "gender": r.gender,
                                 "utterance_paths": r.utterance_paths,
                                 "face_image_paths": r.face_image_paths,
                                 "split": r.split}, sort_keys=True))
    return "\n".join(lines) + "\n"


def split_speakers(speaker_ids: Sequence[str], ratio: Sequence[int] = (8, 2),
                   seed: int = 0) -> dict[str, str]:
    """Seeded speaker-disjoint split; ``ratio`` is (train, test) or (train, val, test).

    The first ``floor(n * train / total)`` shuffled speakers train; with three
    parts, validation takes the next ``floor(n * val / total)``.
    """
    ids = sorted(set(speaker_ids))
    if len(ids) != len(speaker_ids):
        raise DataError("split_speakers: duplicate speaker ids")
    names = ("train", "test") if len(ratio) == 2 else ("train", "val", "test")
    if len(ratio) not in (2, 3) or min(ratio) <= 0:
        raise DataError(f"split_speakers: ratio must have 2 or 3 positive parts, got {ratio}")
    if len(ids) < len(ratio):
        raise DataError(f"split_speakers: {len(ids)} speakers cannot fill {len(ratio)} splits")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    total = sum(ratio)
    n_train = max(1, len(ids) * ratio[0] // total)
    counts = [n_train]
    if len(ratio) == 3:
        counts.append(max(1, len(ids) * ratio[1] // total))
    if sum(counts) >= len(ids):
        raise DataError(f"split_speakers: {len(ids)} speakers leave no test speakers")
    out, pos = {}, 0
    for name, count in zip(names, counts + [len(ids) - sum(counts)]):
        for sid in order[pos:pos + count]:
            out[sid] = name
        pos += count
    return out


# ---------------------------------------------------------------- images


def _header_tokens(data: bytes, count: int) -> tuple[list, int]:
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("image header truncated")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(data: bytes) -> np.ndarray:
    """Decode binary PPM (P6) or PGM (P5) into a (3, H, W) array in [0, 1]."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"image: expected P5 or P6 magic, got {magic!r}")
    (w, h, maxval), pos = _header_tokens(data, 3)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise DataError("image: malformed header") from None
    if not 0 < maxval < 256:
        raise DataError(f"image: only 8-bit images supported, maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    body = data[pos:pos + need]
    if len(body) < need:
        raise DataError(f"image: pixel data truncated ({len(body)} of {need} bytes)")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels).astype(np.float64) / maxval
    pix = np.transpose(pix, (2, 0, 1))
    return np.repeat(pix, 3, axis=0) if channels == 1 else pix


def write_ppm(image: np.ndarray) -> bytes:
    """Encode a (3, H, W) array in [0, 1] as binary PPM."""
    image = np.asarray(image)
    _, h, w = image.shape
    pix = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def load_image(path, size: int | None = None) -> np.ndarray:
    try:
        img = read_pnm(Path(path).read_bytes())
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    if size is not None and img.shape[1:] != (size, size):
        raise DataError(f"image {path}: expected {size}x{size}, got "
                        f"{img.shape[2]}x{img.shape[1]} (resize before ingestion)")
    return img


# ---------------------------------------------------------------- tables


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    """All pipeline settings; JSON keys must match these field names."""

    seed: int = 0
    manifest: str = "manifest.jsonl"
    workdir: str = "work"
    # audio features
    frame_len_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 40
    window_ms: float = 800.0
    overlap: float = 0.5
    # speech encoder
    se_layers: int = 3
    se_hidden: int = 256
    embedding_dim: int = 256
    se_steps: int = 100
    se_lr: float = 0.001
    se_speakers_per_batch: int = 4
    se_windows_per_speaker: int = 4
    ge2e_w: float = 10.0
    ge2e_b: float = -5.0
    # priors
    prior_kind: str = "neutral"
    prior_n: int | None = None
    # face encoder
    image_size: int = 64
    fe_widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    cbam_reduction: int = 8
    epochs: int = 50
    batch_size: int = 8
    base_lr: float = 0.01
    lr_decay: float = 0.9
    decay_every: int = 5
    loss_variant: str = "tri-item"
    compare_variants: bool = False

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise DataError(f"config: unknown keys {unknown}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        from .prior import PRIOR_KINDS
        from .training import LOSS_VARIANTS

        if self.prior_kind not in PRIOR_KINDS:
            raise DataError(f"config: prior_kind must be one of {PRIOR_KINDS}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise DataError(f"config: loss_variant must be one of {LOSS_VARIANTS}")
        positive = ("n_fft", "n_mels", "se_layers", "se_hidden", "embedding_dim", "se_steps",
                    "image_size", "epochs", "decay_every", "cbam_reduction")
        bad = [k for k in positive if getattr(self, k) < 1]
        if bad or self.batch_size < 2:
            raise DataError(f"config: fields must be positive: {bad or ['batch_size >= 2']}")
        if not 0.0 <= self.overlap < 1.0:
            raise DataError("config: overlap must be in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_config(path=None, env=None) -> RunConfig:
    """Read a JSON config (defaults when ``path`` is None); FVA_SEED overrides the seed."""
    env = os.environ if env is None else env
    obj = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"config {path}: invalid JSON at line {exc.lineno}") from None
        if not isinstance(obj, dict):
            raise DataError(f"config {path}: expected a JSON object")
    if env.get("FVA_SEED"):
        try:
            obj["seed"] = int(env["FVA_SEED"])
        except ValueError:
            raise DataError(f"FVA_SEED must be an integer, got {env['FVA_SEED']!r}") from None
    return RunConfig.from_dict(obj)
