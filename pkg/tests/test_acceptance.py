"""
Acceptance suite: one test per criterion, each emitting a single PASS/FAIL line.

Criteria 3 to 6 train real models on seeded synthetic tasks and take a
few minutes in total on one core.
"""

import math
import time

import numpy as np

from fvalign import tensor as T
from fvalign.audio import SAMPLE_RATE, MelSpectrogram, WavAudio, log_mel, window_utterance
from fvalign.cli import main
from fvalign.face_encoder import (FaceEncoder, FaceEncoderConfig, channel_attention, conv_block,
                                  encode_batched, spatial_attention)
from fvalign.gradcheck import check_gradients, numeric_grad, relative_error
from fvalign.io import decode_container, encode_container
from fvalign.prior import PriorVector, compute_neutral_prior
from fvalign.speech_encoder import (Ge2eParams, SpeechEncoder, SpeechEncoderConfig,
                                    embed_utterance, ge2e_loss, ge2e_similarity,
                                    train_speech_encoder)
from fvalign.synthetic import linear_face_task, mel_template_task
from fvalign.tensor import Tensor
from fvalign.training import (TrainConfig, compare_loss_variants, epochs_to_reach, eval_metrics,
                              project_embeddings, train_face_encoder, tri_item_loss)
from oracles import dft_oracle_log_mel, ge2e_brute, tri_item_loop

FE_LR = 0.01


def face_split(n_speakers=16, seed=0):
    """Seeded linear face task; the first half of the speakers train, the rest are held out."""
    task = linear_face_task(n_speakers=n_speakers, seed=seed)
    speakers = sorted(task.targets)
    train = speakers[:n_speakers // 2]
    idx = [i for i, s in enumerate(task.item_speakers) if s in train]
    held = [i for i, s in enumerate(task.item_speakers) if s not in train]
    prior = compute_neutral_prior([task.targets[s] for s in train],
                                  [task.genders[s] for s in train])
    return task, train, idx, held, prior


def p(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    errors = {}

    x, w, b = p(rng, 2, 3, 5, 5), p(rng, 4, 3, 3, 3), p(rng, 4)
    errors["conv2d"] = check_gradients(
        lambda: T.tsum(T.tanh(T.conv2d(x, w, b, stride=2, padding=1))), [x, w, b])
    wm = rng.standard_normal((2, 3, 3, 3))
    errors["max_pool2d"] = check_gradients(
        lambda: T.tsum(T.max_pool2d(x, 2, 2, ceil_mode=True) * wm), [x])
    wa = rng.standard_normal((2, 3, 2, 2))
    errors["avg_pool2d"] = check_gradients(lambda: T.tsum(T.avg_pool2d(x, 2) * wa), [x])

    se = SpeechEncoder(SpeechEncoderConfig(n_layers=1, hidden_size=3, projection_dim=3, n_mels=4,
                                           window_frames=5), seed=1)
    frames = rng.standard_normal((2, 5, 4))
    wl = rng.standard_normal((2, 3))
    errors["lstm_cell+projection"] = check_gradients(
        lambda: T.tsum(se.project(frames) * wl), se.parameters())

    f = p(rng, 2, 4, 4, 4)
    w1, b1, w2, b2 = p(rng, 4, 2), p(rng, 2), p(rng, 2, 4), p(rng, 4)
    wc = rng.standard_normal((2, 4, 4, 4))
    errors["cbam_channel"] = check_gradients(
        lambda: T.tsum(channel_attention(f, w1, b1, w2, b2)[0] * wc), [f, w1, b1, w2, b2])
    ws, bs = p(rng, 1, 2, 7, 7), p(rng, 1)
    errors["cbam_spatial"] = check_gradients(
        lambda: T.tsum(spatial_attention(f, ws, bs)[0] * wc), [f, ws, bs])

    blk = {f"b.{n}.{t}": p(rng, *(s if t == "w" else s[:1]))
           for n, s in (("c1", (3, 3, 1, 1)), ("c3", (3, 3, 3, 3)), ("cp", (3, 3, 1, 1)))
           for t in ("w", "b")}
    xb = p(rng, 1, 3, 4, 4)
    wb = rng.standard_normal((1, 3, 2, 2))
    errors["conv_block"] = check_gradients(
        lambda: T.tsum(conv_block(xb, blk, "b") * wb), [xb] + list(blk.values()))

    a, bb, c = rng.standard_normal((4, 8)), p(rng, 4, 8), rng.standard_normal((4, 8))
    errors["tri_item_loss"] = check_gradients(lambda: tri_item_loss(a, bb, c), [bb])
    e = p(rng, 3, 3, 4)
    g = Ge2eParams(Tensor(5.0, requires_grad=True), Tensor(-1.0, requires_grad=True))
    errors["ge2e_loss"] = check_gradients(lambda: ge2e_loss(e, g), [e, g.w])

    worst_layer = max(max(v) for v in errors.values())

    fe = FaceEncoder(FaceEncoderConfig(image_size=8, widths=(4, 4, 4, 4), embedding_dim=4,
                                       cbam_reduction=2), seed=2)
    images = rng.random((2, 3, 8, 8))
    anchor = rng.standard_normal((1, 4))

    def chain():
        out = fe.forward(images)
        return tri_item_loss(anchor, out[0:1], out[1:2])

    # The chain is judged on the whole first-block gradient vector.  Its channel-attention
    # gates start saturated, so those slices are ~1e-8 and sit at the finite-difference
    # noise floor; the worst per-tensor absolute error is reported alongside.
    first_block = [v for k, v in fe.params.items() if k.startswith("block0.")]
    with T.Tape() as tape:
        loss = chain()
    analytic = tape.backward(loss, first_block)
    numeric = [numeric_grad(chain, t) for t in first_block]
    worst_chain = relative_error(np.concatenate([a.ravel() for a in analytic]),
                                 np.concatenate([n.ravel() for n in numeric]))
    worst_abs = max(np.abs(a - n).max() for a, n in zip(analytic, numeric))
    elapsed = time.perf_counter() - start
    ok = worst_layer < 1e-6 and worst_chain < 1e-5 and elapsed < 60
    verdict(1, "gradient suite", ok,
            f"max layer/loss rel err {worst_layer:.2e} (<1e-6) over {len(errors)} checks, "
            f"FE chain first-block rel err {worst_chain:.2e} (<1e-5, worst abs {worst_abs:.1e}), "
            f"{elapsed:.1f}s (<60s)")


# ---------------------------------------------------------------- 2


def test_criterion_2_tri_item_oracle(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        a, b, c = rng.standard_normal((3, 256))
        worst = max(worst, abs(tri_item_loss(a, b, c).item() - tri_item_loop(a, b, c)))
    hand = tri_item_loss([1.0, 0.0], [0.0, 1.0], [1.0, 0.0]).item()
    hand_err = abs(hand - (2 + math.sqrt(2)))
    verdict(2, "tri-item loss oracle", worst < 1e-12 and hand_err < 1e-12,
            f"max |loss - loop| {worst:.1e} over 1000 triplets (<1e-12), "
            f"hand case {hand:.12f} vs 2+sqrt2")


# ---------------------------------------------------------------- 3


def test_criterion_3_convergence_speed(verdict):
    start = time.perf_counter()
    task, train, idx, _, prior = face_split()
    images = task.images[idx]
    speakers = [task.item_speakers[i] for i in idx]
    runs = compare_loss_variants(lambda: FaceEncoder(seed=0), images, speakers, task.targets,
                                 prior, TrainConfig(epochs=50, base_lr=FE_LR),
                                 variants=("tri-item", "cosine-only", "L2-only"), stop_at_cos=0.85)
    reach = {v: epochs_to_reach(r, 0.85) for v, r in runs.items()}
    elapsed = time.perf_counter() - start
    inf = float("inf")
    tri = reach["tri-item"] or inf
    ok = (tri <= (reach["cosine-only"] or inf) and tri <= (reach["L2-only"] or inf)
          and tri != inf and elapsed < 600)
    verdict(3, "tri-item converges no slower", ok,
            f"epochs to mean cos>=0.85: " + ", ".join(f"{v}={n}" for v, n in reach.items())
            + f"; {elapsed:.0f}s (<600s)")


# ---------------------------------------------------------------- 4


def test_criterion_4_prior_improves_metrics(verdict):
    task, train, idx, held, prior = face_split()
    speakers = [task.item_speakers[i] for i in idx]
    reports = {}
    for name, pr in (("none", PriorVector.none(prior.vector.size)), ("neutral", prior)):
        fe = FaceEncoder(seed=0)
        train_face_encoder(fe, task.images[idx], speakers, task.targets, pr,
                           TrainConfig(epochs=20, base_lr=FE_LR))
        for split, ii in (("train", idx), ("held-out", held)):
            refs = np.stack([task.targets[task.item_speakers[i]] for i in ii])
            reports[name, split] = eval_metrics(refs, encode_batched(fe, task.images[ii]) + pr.vector)
    # asserted on the training speakers; held-out numbers are reported only
    new, old = reports["neutral", "train"], reports["none", "train"]
    ok = new.l1 < old.l1 and new.l2 < old.l2 and new.cos > old.cos
    detail = "; ".join(
        f"{s} L1 {reports['none', s].l1:.3f}->{reports['neutral', s].l1:.3f}, "
        f"L2 {reports['none', s].l2:.4f}->{reports['neutral', s].l2:.4f}, "
        f"Cos {reports['none', s].cos:.4f}->{reports['neutral', s].cos:.4f}"
        for s in ("train", "held-out"))
    verdict(4, "prior lowers L1/L2 and raises Cos", ok, detail)


# ---------------------------------------------------------------- 5


def test_criterion_5_speaker_separation(verdict):
    train = mel_template_task(n_speakers=10, windows_per_speaker=16, seed=0)
    fresh = mel_template_task(n_speakers=10, windows_per_speaker=10, seed=11, template_seed=0)
    enc = SpeechEncoder(SpeechEncoderConfig.toy(), seed=0)
    train_speech_encoder(enc, train, steps=200, speakers_per_batch=4, utterances_per_speaker=4,
                         lr=0.001, seed=0)
    emb, labels = [], []
    for sid, windows in sorted(fresh.items()):
        for u in range(5):  # 160-frame utterances: three overlapping windows each
            mel = MelSpectrogram(np.concatenate([windows[2 * u], windows[2 * u + 1]]))
            emb.append(embed_utterance(enc, mel))
            labels.append(sid)
    emb = np.stack(emb)
    result = project_embeddings(emb, labels)
    lab = np.array(labels)
    sims = emb @ emb.T
    same = (lab[:, None] == lab[None]) & ~np.eye(len(lab), dtype=bool)
    cross = lab[:, None] != lab[None]
    same_cos, cross_cos = sims[same].mean(), sims[cross].mean()
    ok = result.silhouette > 0.5 and same_cos > cross_cos
    verdict(5, "10x5 speaker separation", ok,
            f"silhouette {result.silhouette:.4f} (>0.5), same-speaker cos {same_cos:.4f} "
            f"vs cross {cross_cos:.4f}")


# ---------------------------------------------------------------- 6


def test_criterion_6_ge2e_separation(verdict):
    data = mel_template_task(n_speakers=4, windows_per_speaker=16, seed=0)
    fresh = mel_template_task(n_speakers=4, windows_per_speaker=5, seed=7, template_seed=0)
    enc = SpeechEncoder(SpeechEncoderConfig.toy(), seed=0)
    train_speech_encoder(enc, data, steps=200, speakers_per_batch=4, utterances_per_speaker=4,
                         lr=0.001, seed=0)
    emb = {s: enc.forward(w).data for s, w in fresh.items()}
    same, cross = [], []
    ids = sorted(emb)
    for i, a in enumerate(ids):
        for j in range(i, len(ids)):
            s = emb[a] @ emb[ids[j]].T
            if i == j:
                same.extend(s[np.triu_indices(len(s), 1)])
            else:
                cross.extend(s.ravel())
    gap = np.mean(same) - np.mean(cross)
    e = np.random.default_rng(3).standard_normal((4, 4, 8))
    sims, _ = ge2e_brute(e, 10.0, -5.0)
    centroid_err = np.abs(ge2e_similarity(Tensor(e)).data - sims).max()
    verdict(6, "GE2E toy separation", gap >= 0.3 and centroid_err < 1e-14,
            f"same {np.mean(same):.4f} - cross {np.mean(cross):.4f} = {gap:.4f} (>=0.3) after "
            f"200 steps; exclusive-centroid max err vs brute force {centroid_err:.1e}")


# ---------------------------------------------------------------- 7


def run_pipeline(root, seed):
    assert main(["make-fixture", str(root)]) == 0
    cfg = ["--config", str(root / "config.json"), "--seed", str(seed)]
    for step in ("features", "train-se", "embed-speech", "compute-prior", "train-fe",
                 "export-conditioning"):
        assert main(cfg + [step]) == 0, step
    work = root / "work"
    assert main(["eval", "--reference", str(work / "speech_embeddings.fva"),
                 "--candidate", str(work / "conditioning.fva"), "--pair-by", "speaker",
                 "--out", str(work / "eval.json")]) == 0
    assert main(["project", "--embeddings", str(work / "speech_embeddings.fva"),
                 "--out-csv", str(work / "proj.csv"), "--out-svg", str(work / "proj.svg")]) == 0
    return {str(f.relative_to(root)): f.read_bytes() for f in sorted(root.rglob("*")) if f.is_file()}


def test_criterion_7_pipeline_determinism(verdict, tmp_path):
    first = run_pipeline(tmp_path / "a", seed=0)
    second = run_pipeline(tmp_path / "b", seed=0)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    containers = [k for k in first if k.endswith(".fva")]
    not_exact = [k for k in containers
                 if encode_container(*(lambda c: (c.tensors, c.metadata))(
                     decode_container(first[k]))) != first[k]]
    ok = not differing and not not_exact and len(containers) > 0
    verdict(7, "pipeline determinism", ok,
            f"{len(first)} files byte-identical across runs (differing: {differing or 'none'}); "
            f"{len(containers) - len(not_exact)}/{len(containers)} containers re-encode bit-exactly")


# ---------------------------------------------------------------- 8


def test_criterion_8_feature_oracle(verdict):
    worst = 0.0
    for seed in range(5):
        samples = np.random.default_rng(seed).uniform(-0.8, 0.8, SAMPLE_RATE // 10)
        ours = log_mel(WavAudio(SAMPLE_RATE, samples)).frames
        ref, _ = dft_oracle_log_mel(samples)
        worst = max(worst, np.abs(ours - ref).max())
    bad = [t for t in range(80, 1201)
           if len(window_utterance(MelSpectrogram(np.zeros((t, 1))))) != (t - 80) // 40 + 1]
    verdict(8, "feature pipeline oracle", worst < 1e-9 and not bad,
            f"max |log_mel - DFT| {worst:.1e} on 0.1 s inputs (<1e-9); "
            f"window counts match floor((T-80)/40)+1 for T in 80..1200 ({len(bad)} mismatches)")
