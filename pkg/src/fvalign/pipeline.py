"""
File-based pipeline steps behind the command line.  Each step reads its
inputs, validates them before computing anything, and writes its artifacts
atomically.  Artifacts carry no timestamps, so identical inputs and seed
give byte-identical outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import WindowSpec, log_mel, read_wav, window_utterance, MelSpectrogram
from .errors import DataError
from .face_encoder import FaceEncoder, FaceEncoderConfig, encode_batched
from .io import (Container, Manifest, RunConfig, atomic_write, csv_text, json_text,
                 load_container, load_image, load_manifest, save_container)
from .prior import PriorVector, compute_gender_priors, compute_neutral_prior
from .speech_encoder import (Ge2eParams, SpeechEncoder, SpeechEncoderConfig, aggregate_utterance,
                             embed_windows, train_speech_encoder)
from .training import (LOSS_VARIANTS, TrainConfig, eval_metrics, project_embeddings,
                       scatter_svg, train_face_encoder)

log = logging.getLogger(__name__)


@dataclass
class Paths:
    """Default artifact locations inside the work directory."""

    workdir: Path

    @property
    def mels(self) -> Path:
        return self.workdir / "mels"

    def mel(self, utterance_id: str) -> Path:
        return self.mels / f"{utterance_id.replace('/', '_')}.fva"

    @property
    def se(self) -> Path:
        return self.workdir / "se.fva"

    @property
    def se_loss(self) -> Path:
        return self.workdir / "se_loss.csv"

    @property
    def speech(self) -> Path:
        return self.workdir / "speech_embeddings.fva"

    @property
    def prior(self) -> Path:
        return self.workdir / "prior.fva"

    @property
    def fe(self) -> Path:
        return self.workdir / "fe.fva"

    @property
    def fe_loss(self) -> Path:
        return self.workdir / "fe_loss.csv"

    @property
    def fe_metrics(self) -> Path:
        return self.workdir / "fe_metrics.json"

    @property
    def conditioning(self) -> Path:
        return self.workdir / "conditioning.fva"

    @property
    def face(self) -> Path:
        return self.workdir / "face_embeddings.fva"


def require(*paths) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise DataError(f"missing inputs: {', '.join(missing)}")


def utterance_ids(manifest: Manifest):
    for rec in manifest.records:
        for i, path in enumerate(rec.utterance_paths):
            yield rec, f"{rec.speaker_id}/utt{i}", path


def window_spec(cfg: RunConfig) -> WindowSpec:
    return WindowSpec(cfg.window_ms, cfg.overlap)


# ---------------------------------------------------------------- features


def run_features(cfg: RunConfig, manifest: Manifest, paths: Paths) -> list[Path]:
    """One log-mel container per utterance."""
    items = list(utterance_ids(manifest))
    require(*(manifest.resolve(p) for _, _, p in items))
    written = []
    for rec, uid, rel in items:
        audio = read_wav(manifest.resolve(rel).read_bytes())
        mel = log_mel(audio, cfg.frame_len_ms, cfg.hop_ms, cfg.n_fft, cfg.n_mels)
        window_utterance(mel, window_spec(cfg))  # rejects utterances shorter than one window
        out = paths.mel(uid)
        save_container(out, mel.frames, {"type": "mel", "speaker_id": rec.speaker_id,
                                         "utterance_id": uid, "source": rel,
                                         "frame_hop_ms": cfg.hop_ms,
                                         "frame_len_ms": cfg.frame_len_ms})
        written.append(out)
    log.info("wrote %d mel containers", len(written))
    return written


def load_mel(path) -> MelSpectrogram:
    c = load_container(path)
    return MelSpectrogram(c.data, c.metadata.get("frame_hop_ms", 10.0),
                          c.metadata.get("frame_len_ms", 25.0))


# ---------------------------------------------------------------- speech encoder


def se_config(cfg: RunConfig) -> SpeechEncoderConfig:
    length = int(round(cfg.window_ms / cfg.hop_ms))
    return SpeechEncoderConfig(n_layers=cfg.se_layers, hidden_size=cfg.se_hidden,
                               projection_dim=cfg.embedding_dim, n_mels=cfg.n_mels,
                               window_frames=length)


def run_train_se(cfg: RunConfig, manifest: Manifest, paths: Paths) -> SpeechEncoder:
    train = [r for r in manifest.records if r.split == "train"]
    if len(train) < 2:
        raise DataError(f"train-se: need >= 2 training speakers, got {len(train)}")
    mel_paths = {uid: paths.mel(uid) for rec, uid, _ in utterance_ids(Manifest(train))}
    require(*mel_paths.values())
    spec = window_spec(cfg)
    windows = {}
    for rec in train:
        ws = []
        for i in range(len(rec.utterance_paths)):
            ws.extend(window_utterance(load_mel(mel_paths[f"{rec.speaker_id}/utt{i}"]), spec))
        windows[rec.speaker_id] = np.stack(ws)
    encoder = SpeechEncoder(se_config(cfg), seed=cfg.seed)
    ge2e, history = train_speech_encoder(
        encoder, windows, steps=cfg.se_steps, speakers_per_batch=cfg.se_speakers_per_batch,
        utterances_per_speaker=cfg.se_windows_per_speaker, lr=cfg.se_lr, seed=cfg.seed,
        ge2e=Ge2eParams.init(cfg.ge2e_w, cfg.ge2e_b))
    tensors = encoder.state_dict()
    tensors["ge2e.w"] = ge2e.w.data
    tensors["ge2e.b"] = ge2e.b.data
    save_container(paths.se, tensors, {"type": "speech_encoder", "config": encoder.config_dict()})
    atomic_write(paths.se_loss, csv_text(["step", "loss"], enumerate(history, start=1)))
    return encoder


def load_speech_encoder(path) -> SpeechEncoder:
    c = load_container(path)
    if c.metadata.get("type") != "speech_encoder":
        raise DataError(f"{path}: not a speech encoder checkpoint")
    encoder = SpeechEncoder(SpeechEncoderConfig(**c.metadata["config"]), zero=True)
    encoder.load_state_dict({k: v for k, v in c.tensors.items() if not k.startswith("ge2e.")})
    return encoder


def run_embed_speech(cfg: RunConfig, manifest: Manifest, paths: Paths,
                     checkpoint=None, out=None) -> Container:
    checkpoint = checkpoint or paths.se
    items = list(utterance_ids(manifest))
    require(checkpoint, *(paths.mel(uid) for _, uid, _ in items))
    encoder = load_speech_encoder(checkpoint)
    spec = window_spec(cfg)
    vectors, meta = [], {"speaker_ids": [], "item_ids": [], "genders": [], "splits": []}
    for rec, uid, _ in items:
        windows = np.stack(window_utterance(load_mel(paths.mel(uid)), spec))
        vectors.append(aggregate_utterance(embed_windows(encoder, windows),
                                           encoder.config.normalize_windows))
        meta["speaker_ids"].append(rec.speaker_id)
        meta["item_ids"].append(uid)
        meta["genders"].append(rec.gender)
        meta["splits"].append(rec.split)
    container = Container({"data": np.stack(vectors)}, {"type": "speech_embeddings", **meta})
    save_container(out or paths.speech, container.tensors, container.metadata)
    return container


def speaker_embeddings(container: Container, split: str | None = None):
    """Utterance-averaged, renormalized embedding per speaker (first-seen order)."""
    meta = container.metadata
    rows: dict[str, list] = {}
    genders, splits = {}, {}
    for i, sid in enumerate(meta["speaker_ids"]):
        s = meta.get("splits", [None] * len(meta["speaker_ids"]))[i]
        if split is not None and s is not None and s != split:
            continue
        rows.setdefault(sid, []).append(container.data[i])
        if "genders" in meta:
            genders[sid] = meta["genders"][i]
        splits[sid] = s
    return ({sid: aggregate_utterance(v) for sid, v in rows.items()}, genders, splits)


# ---------------------------------------------------------------- priors


def run_compute_prior(embeddings_path, kind: str, n: int | None, out, split: str | None = "train",
                      dim: int | None = None) -> PriorVector:
    require(embeddings_path)
    container = load_container(embeddings_path)
    vectors, genders, _ = speaker_embeddings(container, split)
    if not vectors:
        raise DataError(f"compute-prior: no speakers in split {split!r}")
    ids = list(vectors)
    if kind == "none":
        prior = PriorVector.none(dim or container.data.shape[1])
    elif kind == "neutral":
        prior = compute_neutral_prior([vectors[s] for s in ids], [genders.get(s) for s in ids], n)
    else:
        female, male = compute_gender_priors([vectors[s] for s in ids],
                                             [genders.get(s) for s in ids])
        prior = female if kind == "female" else male
    save_container(out, prior.vector, {"type": "prior", "kind": prior.kind,
                                       "n_sources": prior.n_sources})
    return prior


def load_prior(path) -> PriorVector:
    c = load_container(path)
    if c.metadata.get("type") != "prior":
        raise DataError(f"{path}: not a prior container")
    return PriorVector(c.data, c.metadata["kind"], int(c.metadata["n_sources"]))


# ---------------------------------------------------------------- face encoder


def fe_config(cfg: RunConfig) -> FaceEncoderConfig:
    return FaceEncoderConfig(image_size=cfg.image_size, widths=tuple(cfg.fe_widths),
                             embedding_dim=cfg.embedding_dim, cbam_reduction=cfg.cbam_reduction)


def load_face_set(manifest: Manifest, split: str | None, size: int):
    images, speakers, ids = [], [], []
    records = [r for r in manifest.records if split is None or r.split == split]
    require(*(manifest.resolve(p) for r in records for p in r.face_image_paths))
    for rec in records:
        if not rec.face_image_paths:
            raise DataError(f"speaker {rec.speaker_id!r} has no face images")
        for i, rel in enumerate(rec.face_image_paths):
            images.append(load_image(manifest.resolve(rel), size))
            speakers.append(rec.speaker_id)
            ids.append(f"{rec.speaker_id}/img{i}")
    if not images:
        return np.zeros((0, 3, size, size)), [], []
    return np.stack(images), speakers, ids


def gender_subset(manifest: Manifest, prior: PriorVector) -> Manifest:
    """Gender priors train and test on speakers of that gender only."""
    return manifest.filter_gender(prior.kind) if prior.kind in ("female", "male") else manifest


def _metrics_block(encoder, images, speakers, targets, prior) -> dict:
    if not speakers:
        return {}
    face = encode_batched(encoder, images)
    ref = np.stack([targets[s] for s in speakers])
    return {"face_plus_prior": eval_metrics(ref, face + prior.vector).as_dict(),
            "face_only": eval_metrics(ref, face).as_dict()}


def run_train_fe(cfg: RunConfig, manifest: Manifest, paths: Paths, speech=None,
                 prior_path=None) -> FaceEncoder:
    speech = speech or paths.speech
    prior_path = prior_path or paths.prior
    require(speech, prior_path)
    prior = load_prior(prior_path)
    manifest = gender_subset(manifest, prior)
    targets, _, _ = speaker_embeddings(load_container(speech))
    train_ids = [r.speaker_id for r in manifest.records if r.split == "train"]
    missing = [s for s in train_ids if s not in targets]
    if missing:
        raise DataError(f"train-fe: training speakers without speech embeddings: {missing}")
    images, speakers, _ = load_face_set(manifest, "train", cfg.image_size)
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, base_lr=cfg.base_lr,
                       lr_decay=cfg.lr_decay, decay_every=cfg.decay_every,
                       prior_kind=prior.kind, seed=cfg.seed, loss_variant=cfg.loss_variant)
    variants = LOSS_VARIANTS if cfg.compare_variants else (cfg.loss_variant,)
    rows, encoder = [], None
    for variant in variants:
        candidate = FaceEncoder(fe_config(cfg), seed=cfg.seed)
        vcfg = TrainConfig(**{**tcfg.__dict__, "loss_variant": variant})
        records = train_face_encoder(candidate, images, speakers, targets, prior, vcfg)
        rows.extend((r.epoch, r.variant, r.loss, r.mean_cos) for r in records)
        if variant == cfg.loss_variant:
            encoder = candidate
    save_container(paths.fe, encoder.state_dict(),
                   {"type": "face_encoder", "config": encoder.config_dict(),
                    "prior_kind": prior.kind, "loss_variant": cfg.loss_variant})
    atomic_write(paths.fe_loss, csv_text(["epoch", "variant", "loss", "mean_cos"], rows))
    report = {"prior_kind": prior.kind,
              "train": _metrics_block(encoder, images, speakers, targets, prior)}
    test_images, test_speakers, _ = load_face_set(manifest, "test", cfg.image_size)
    keep = [i for i, s in enumerate(test_speakers) if s in targets]
    report["test"] = _metrics_block(encoder, test_images[keep],
                                    [test_speakers[i] for i in keep], targets, prior)
    atomic_write(paths.fe_metrics, json_text(report))
    return encoder


def load_face_encoder(path) -> FaceEncoder:
    c = load_container(path)
    if c.metadata.get("type") != "face_encoder":
        raise DataError(f"{path}: not a face encoder checkpoint")
    cfg = dict(c.metadata["config"])
    cfg["widths"] = tuple(cfg["widths"])
    encoder = FaceEncoder(FaceEncoderConfig(**cfg))
    encoder.load_state_dict(c.tensors)
    return encoder


# ---------------------------------------------------------------- eval / project / export


def run_eval(reference, candidate, out=None, pair_by: str = "item") -> dict:
    """Compare two embedding sets.

    ``pair_by="item"`` pairs rows with equal item ids; ``"speaker"`` pairs each
    candidate row with the utterance-averaged reference embedding of its speaker.
    """
    require(reference, candidate)
    ref, cand = load_container(reference), load_container(candidate)
    if pair_by == "item":
        lookup = {iid: i for i, iid in enumerate(ref.metadata["item_ids"])}
        missing = [iid for iid in cand.metadata["item_ids"] if iid not in lookup]
        if missing:
            raise DataError(f"eval: candidate items absent from reference: {missing[:5]}")
        refs = ref.data[[lookup[iid] for iid in cand.metadata["item_ids"]]]
    elif pair_by == "speaker":
        per_speaker, _, _ = speaker_embeddings(ref)
        missing = sorted({s for s in cand.metadata["speaker_ids"] if s not in per_speaker})
        if missing:
            raise DataError(f"eval: candidate speakers absent from reference: {missing}")
        refs = np.stack([per_speaker[s] for s in cand.metadata["speaker_ids"]])
    else:
        raise DataError(f"eval: pair_by must be 'item' or 'speaker', got {pair_by!r}")
    report = eval_metrics(refs, cand.data).as_dict()
    report["pair_by"] = pair_by
    report["candidate"] = cand.metadata.get("type", "unknown")
    if out is not None:
        atomic_write(out, json_text(report))
    return report


def run_project(embeddings, out_csv, out_svg=None) -> dict:
    require(embeddings)
    c = load_container(embeddings)
    result = project_embeddings(c.data, c.metadata["speaker_ids"])
    rows = [(iid, sid, x, y) for iid, sid, (x, y) in
            zip(c.metadata["item_ids"], c.metadata["speaker_ids"], result.coords)]
    atomic_write(out_csv, csv_text(["id", "speaker", "x", "y"], rows))
    if out_svg is not None:
        atomic_write(out_svg, scatter_svg(result))
    return {"silhouette": result.silhouette, "per_speaker": result.per_speaker,
            "explained_variance": list(result.explained_variance)}


def run_export_conditioning(cfg: RunConfig, manifest: Manifest, paths: Paths, checkpoint=None,
                            prior_path=None, out=None, face_out=None,
                            split: str | None = None) -> Container:
    """Write FE(face) + prior for every face image (the synthesizer's speaker input)."""
    checkpoint = checkpoint or paths.fe
    prior_path = prior_path or paths.prior
    require(checkpoint, prior_path)
    encoder = load_face_encoder(checkpoint)
    prior = load_prior(prior_path)
    manifest = gender_subset(manifest, prior)
    images, speakers, ids = load_face_set(manifest, split, encoder.config.image_size)
    if not ids:
        raise DataError("export-conditioning: no face images selected")
    face = encode_batched(encoder, images)
    meta = {"speaker_ids": speakers, "item_ids": ids, "prior_kind": prior.kind}
    container = Container({"data": face + prior.vector}, {"type": "conditioning", **meta})
    save_container(out or paths.conditioning, container.tensors, container.metadata)
    if face_out is not None:
        save_container(face_out, face, {"type": "face_embeddings", **meta})
    return container


def load_run(cfg: RunConfig, base: Path) -> tuple[Manifest, Paths]:
    manifest_path = base / cfg.manifest
    require(manifest_path)
    return load_manifest(manifest_path), Paths(base / cfg.workdir)
