"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also collected into the terminal
summary) and then asserts. Criteria 5, 7 and 8 share one pair of same-seed
pretraining runs; they take tens of minutes on a single core.
"""
import math
import time

import numpy as np
import pytest
import torch
import torch.nn as nn

from gradcheck import PoolSignature, max_relative_error, numeric_gradients
from ppgalign.checkpoint import load_checkpoint, save_checkpoint
from ppgalign.contrastive import l2_normalize, symmetric_info_nce
from ppgalign.encoder import (
    REFERENCE_TOTAL_PARAMS, EncoderConfig, build_encoder, build_projector, compute_gradients,
    count_parameters, parameter_count,
)
from ppgalign.preprocess import (
    PreprocessConfig, bandpass_filter, notch_filter, preprocess_recordings, zscore_normalize,
)
from ppgalign.probe import ProbeTask, binary_auc, nested_cv_evaluate
from ppgalign.retrieval import AggregateMode, RetrievalReport, aggregate_metrics, evaluate_embeddings, retrieval_metrics
from ppgalign.signal import Modality, Waveform, stack_samples
from ppgalign.synth import synth_dataset
from ppgalign.trainer import (
    TrainConfig, embed_pairs, encoder_from_checkpoint, finetune_multilabel, predict_logits,
    pretrain_contrastive, restore_contrastive,
)
from test_encoder import REFERENCE_SHAPES
from test_retrieval import MACRO_ROW, TABLE_N, TABLE_ROWS, WEIGHTED_ROW, brute_force

pytestmark = pytest.mark.acceptance

N_PAIRS = 2000
N_VAL = 256
N_TEST = 256
PRETRAIN = TrainConfig(total_steps=2000, warmup_steps=400, batch_size=64, eval_every=100, seed=0)
FINETUNE = TrainConfig(total_steps=600, warmup_steps=60, batch_size=64, base_lr=1e-3, seed=0)
ENCODER = EncoderConfig.desk()


def _report(log, capsys, number, title, ok, detail, elapsed, limit_s=None):
    timing = f"{elapsed:.1f}s" + (f" (limit {limit_s:.0f}s)" if limit_s else "")
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}; {timing}"
    log.append(line)
    with capsys.disabled():
        print("\n" + line)


# -- 1 ------------------------------------------------------------------------------

def test_criterion_1_architecture(acceptance_log, capsys):
    t0 = time.perf_counter()
    enc = build_encoder(EncoderConfig(), seed=0).eval()
    with torch.no_grad():
        shapes = enc.stage_shapes(torch.randn(2, 1, 1250))
    stem = count_parameters(enc.stem)
    literal = parameter_count(enc)
    grouped = parameter_count(build_encoder(EncoderConfig.grouped()))
    elapsed = time.perf_counter() - t0
    ok = (
        shapes == REFERENCE_SHAPES and shapes[-1] == (2, 1024) and stem == 384
        and literal.reference_total == REFERENCE_TOTAL_PARAMS == 5_850_864
        and grouped.total == REFERENCE_TOTAL_PARAMS and elapsed < 10
    )
    _report(acceptance_log, capsys, 1, "architecture fidelity", ok,
            f"shapes match={shapes == REFERENCE_SHAPES}, stem={stem}, literal total={literal.total:,} "
            f"vs reference {literal.reference_total:,}, grouped total={grouped.total:,}", elapsed, 10)
    assert ok


# -- 2 ------------------------------------------------------------------------------

def _fd_toy_model(n):
    cfg = EncoderConfig(stem_channels=2, stage_specs=((1, 2, 2),) * 6, dropout_p=0.0)
    torch.manual_seed(0)
    enc_p, enc_e = build_encoder(cfg, 1).double().eval(), build_encoder(cfg, 2).double().eval()
    proj_p = build_projector(2, seed=3, hidden_dim=4, out_dim=3).double()
    proj_e = build_projector(2, seed=4, hidden_dim=4, out_dim=3).double()
    for m in (enc_p, enc_e):
        for bn in m.modules():
            if isinstance(bn, nn.BatchNorm1d):
                with torch.no_grad():
                    bn.weight.uniform_(0.5, 1.5)
                    bn.bias.uniform_(-0.5, 0.5)
    tau = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
    xp = torch.randn(n, 1250, dtype=torch.float64)
    xe = torch.randn(n, 1250, dtype=torch.float64)

    def loss():
        return symmetric_info_nce(l2_normalize(proj_p(enc_p(xp))), l2_normalize(proj_e(enc_e(xe))), tau)

    params = [*enc_p.parameters(), *enc_e.parameters(), *proj_p.parameters(), *proj_e.parameters(), tau]
    return loss, params, (enc_p, enc_e)


def test_criterion_2_loss(acceptance_log, capsys):
    t0 = time.perf_counter()
    one = symmetric_info_nce(torch.tensor([[0.6, 0.8]]), torch.tensor([[1.0, 0.0]]), 0.07).item()
    flat = torch.ones(5, 3, dtype=torch.float64) / math.sqrt(3)
    uniform = symmetric_info_nce(flat, flat, 0.2).item()
    eye = torch.eye(2, dtype=torch.float64)
    closed = symmetric_info_nce(eye, eye, 1.0).item()
    errors = []
    for n in (2, 8):
        loss, params, encs = _fd_toy_model(n)
        analytic = compute_gradients(loss(), params)
        sig = PoolSignature(*encs)
        numeric, valid = numeric_gradients(sig.wrap(loss), params, h=3e-4, signature=sig)
        sig.close()
        assert all(bool(v.all()) for v in valid)
        errors.append(max_relative_error(analytic, numeric))
    # embedding-level check at the largest batch
    g = np.random.default_rng(0)
    hp = torch.tensor(g.normal(size=(8, 6)), requires_grad=True)
    he = torch.tensor(g.normal(size=(8, 6)), requires_grad=True)
    f = lambda: symmetric_info_nce(l2_normalize(hp), l2_normalize(he), 0.1)
    errors.append(max_relative_error(compute_gradients(f(), [hp, he]), numeric_gradients(f, [hp, he], h=1e-6)))
    elapsed = time.perf_counter() - t0
    ok = (
        one == 0.0 and abs(uniform - math.log(5)) < 1e-12 and abs(closed - 0.3133) <= 1e-4
        and max(errors) < 1e-4 and elapsed < 60
    )
    _report(acceptance_log, capsys, 2, "loss correctness", ok,
            f"N=1 loss={one}, uniform={uniform:.6f} (ln5={math.log(5):.6f}), closed form={closed:.6f}, "
            f"max FD rel err={max(errors):.2e}", elapsed, 60)
    assert ok


# -- 3 ------------------------------------------------------------------------------

def test_criterion_3_retrieval(acceptance_log, capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for trial in range(1000):
        n = int(rng.integers(1, 65))
        sim = rng.integers(-2, 3, size=(n, n)).astype(float) if trial % 4 == 0 else rng.normal(size=(n, n))
        rep, ref = retrieval_metrics(sim), brute_force(sim)
        mismatches += sum(getattr(rep, k) != v for k, v in ref.items())
    reports = [(RetrievalReport(*row, n_samples=n), n) for row, n in zip(TABLE_ROWS, TABLE_N)]
    w = aggregate_metrics(reports, AggregateMode.WEIGHTED)
    m = aggregate_metrics(reports, AggregateMode.MACRO)
    elapsed = time.perf_counter() - t0
    w1, m1 = round(w.r_at_1, 3), round(m.r_at_1, 3)
    ok = mismatches == 0 and w1 == WEIGHTED_ROW[0] == 0.736 and m1 == MACRO_ROW[0] == 0.742 and elapsed < 30
    _report(acceptance_log, capsys, 3, "retrieval oracle equivalence", ok,
            f"1000 matrices, {mismatches} metric mismatches; weighted R@1={w1:.3f}, macro R@1={m1:.3f}",
            elapsed, 30)
    assert ok


# -- 4 ------------------------------------------------------------------------------

def _amp(x, fs, freq):
    w = np.hanning(len(x))
    n = 16 * len(x)
    spectrum = np.abs(np.fft.rfft(x * w, n)) * 2 / w.sum()
    k = np.argmin(np.abs(np.fft.rfftfreq(n, 1 / fs) - freq))
    return spectrum[k - 2:k + 3].max()


def test_criterion_4_preprocessing(acceptance_log, capsys):
    t0 = time.perf_counter()
    cfg = PreprocessConfig()
    fs = cfg.target_rate_hz
    t = np.arange(int(60 * fs)) / fs
    lo, hi = cfg.ppg_band_hz
    drift = np.sin(2 * np.pi * 0.05 * t)
    pulse = np.sin(2 * np.pi * 1.2 * t + 0.4)
    drift_db = 20 * np.log10(_amp(bandpass_filter(Waveform(drift, fs, Modality.PPG), lo, hi).samples, fs, 0.05)
                             / _amp(drift, fs, 0.05))
    keep = _amp(bandpass_filter(Waveform(pulse, fs, Modality.PPG), lo, hi).samples, fs, 1.2) / _amp(pulse, fs, 1.2)
    mains = np.sin(2 * np.pi * 50 * t[:1250])
    notch_ratio = np.sqrt(np.mean(notch_filter(Waveform(mains, fs, Modality.ECG), cfg.notch_hz).samples ** 2)) \
        / np.sqrt(np.mean(mains ** 2))
    probe = np.random.default_rng(0).normal(size=1250)
    lags = []
    for out in (bandpass_filter(Waveform(pulse[:1250], fs, Modality.PPG), lo, hi).samples,
                notch_filter(Waveform(pulse[:1250], fs, Modality.ECG), cfg.notch_hz).samples):
        c = np.correlate(out, pulse[:1250], mode="full")
        lags.append(int(np.argmax(c)) - (1250 - 1))
    z = zscore_normalize(Waveform(3.0 + 7.0 * probe, fs, Modality.PPG)).samples
    elapsed = time.perf_counter() - t0
    ok = (
        drift_db <= -20 and abs(keep - 1) < 0.05 and notch_ratio <= 0.01 and lags == [0, 0]
        and abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6 and elapsed < 60
    )
    _report(acceptance_log, capsys, 4, "preprocessing spectral contract", ok,
            f"0.05 Hz drift {drift_db:.1f} dB, 1.2 Hz gain {keep:.4f}, 50 Hz residual "
            f"{100 * notch_ratio:.3f}% RMS, lags {lags}, z mean {z.mean():.1e} std {z.std():.8f}",
            elapsed, 60)
    assert ok


# -- 5, 7, 8: shared pretraining ------------------------------------------------------

@pytest.fixture(scope="session")
def desk_data():
    """2,000 preprocessed training/validation pairs plus unseen pairs for testing."""
    t0 = time.perf_counter()
    ds = synth_dataset(N_PAIRS + N_TEST, seed=0)
    ppg = [Waveform(x, ds.rate_hz, Modality.PPG) for x in ds.ppg]
    ecg = [Waveform(x, ds.rate_hz, Modality.ECG) for x in ds.ecg]
    res = preprocess_recordings(ppg, ecg)
    rec = np.array([d.recording for d in res.decisions if d.kept])
    P = stack_samples([p.ppg for p in res.pairs])
    E = stack_samples([p.ecg for p in res.pairs])
    pool, test = rec < N_PAIRS, rec >= N_PAIRS
    n_train = int(pool.sum()) - N_VAL
    labels = np.stack([ds.heart_rates > 80, ds.irregular], axis=1).astype(np.float32)[rec]
    return {
        "train": (P[pool][:n_train], E[pool][:n_train], labels[pool][:n_train]),
        "val": (P[pool][n_train:], E[pool][n_train:], labels[pool][n_train:]),
        "test": (P[test], E[test], labels[test]),
        "kept": int(pool.sum()),
        "prep_s": time.perf_counter() - t0,
    }


@pytest.fixture(scope="session")
def pretraining_runs(desk_data):
    (tp, te, _), (vp, ve, _) = desk_data["train"], desk_data["val"]
    runs = []
    for _ in range(2):
        t0 = time.perf_counter()
        hist = pretrain_contrastive(tp, te, vp, ve, PRETRAIN, ENCODER)
        runs.append((hist, time.perf_counter() - t0))
    return runs


@pytest.mark.slow
def test_criterion_5_end_to_end_alignment(desk_data, pretraining_runs, acceptance_log, capsys):
    (a, ta), (b, tb) = pretraining_runs
    tp, te, _ = desk_data["test"]
    vp, ve, _ = desk_data["val"]
    model = restore_contrastive(a.best)
    _, test_rep, _ = evaluate_embeddings(*embed_pairs(model, tp, te), batch_size=64)
    _, val_rep, _ = evaluate_embeddings(*embed_pairs(model, vp, ve), batch_size=64)
    same = a.losses == b.losses and all(x.tensors_equal(y) for x, y in zip(a.checkpoints, b.checkpoints))
    elapsed = desk_data["prep_s"] + ta + tb
    ok = (
        test_rep.r_at_1 >= 0.5 and test_rep.mrr >= 0.6 and same
        and a.losses[-1] < a.losses[0] and elapsed < 30 * 60
    )
    _report(acceptance_log, capsys, 5, "end-to-end alignment at desk scale", ok,
            f"{desk_data['kept']} pairs kept, best step {a.best_step}; unseen pairs {test_rep.format()}; "
            f"validation R@1={val_rep.r_at_1:.3f} MRR={val_rep.mrr:.3f}; two same-seed runs identical={same}; "
            f"prep {desk_data['prep_s']:.0f}s + runs {ta:.0f}s/{tb:.0f}s",
            elapsed, 30 * 60)
    assert ok


# -- 6 ------------------------------------------------------------------------------

def test_criterion_6_probe_harness(acceptance_log, capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    X = rng.normal(size=(2000, 1024))
    y = X @ rng.normal(size=1024) / 32 + 1.5
    reg = nested_cv_evaluate(ProbeTask("reg", X, y), seed=0)
    Xc = rng.normal(size=(500, 1024))
    yc = rng.permutation(np.r_[np.zeros(250), np.ones(250)]).astype(int)
    clf = nested_cv_evaluate(ProbeTask("clf", Xc, yc), seed=0)
    leaks = reg.leaked_fits() + clf.leaked_fits()
    fits = len(reg.fit_log) + len(clf.fit_log)
    elapsed = time.perf_counter() - t0
    ok = reg.mean["r2"] > 0.999 and 0.4 <= clf.mean["auc"] <= 0.6 and leaks == 0 and elapsed < 300
    _report(acceptance_log, capsys, 6, "probe harness", ok,
            f"realizable R2={reg.mean['r2']:.6f} MAE={reg.mean['mae']:.2e}, permuted AUC={clf.mean['auc']:.3f}, "
            f"{leaks} of {fits} fits touched outer-test rows", elapsed, 300)
    assert ok


# -- 7 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_finetuning(desk_data, pretraining_runs, acceptance_log, capsys):
    t0 = time.perf_counter()
    ckpt = pretraining_runs[0][0].best
    tp, _, ty = desk_data["train"]
    xp, _, xy = desk_data["test"]
    res = finetune_multilabel(ckpt, tp, ty, 2, FINETUNE)
    scores = predict_logits(res.model, xp)
    aucs = [binary_auc(xy[:, k], scores[:, k]) for k in range(2)]
    frozen_cfg = TrainConfig(**{**FINETUNE.to_dict(), "total_steps": 50, "warmup_steps": 5})
    frozen = finetune_multilabel(ckpt, tp, ty, 2, frozen_cfg, freeze_encoder=True)
    before = encoder_from_checkpoint(ckpt).state_dict()
    after = frozen.model.encoder.state_dict()
    head_moved = not torch.equal(frozen.model.head.weight, res.model.head.weight)
    unchanged = all(torch.equal(before[k], after[k]) for k in before)
    elapsed = time.perf_counter() - t0
    ok = min(aucs) >= 0.9 and unchanged and head_moved and elapsed < 15 * 60
    _report(acceptance_log, capsys, 7, "fine-tuning mechanism", ok,
            f"unseen-pair AUC HR>80={aucs[0]:.3f}, irregular={aucs[1]:.3f}; "
            f"frozen encoder bit-identical={unchanged} over {frozen_cfg.total_steps} steps", elapsed, 15 * 60)
    assert ok


# -- 8 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_reproducibility(desk_data, pretraining_runs, tmp_path, acceptance_log, capsys):
    t0 = time.perf_counter()
    (a, _), (b, _) = pretraining_runs
    same_losses = a.losses == b.losses
    same_ckpts = len(a.checkpoints) == len(b.checkpoints) and all(
        x.tensors_equal(y) and x.validation_loss == y.validation_loss for x, y in zip(a.checkpoints, b.checkpoints)
    )
    pa = save_checkpoint(a.best, tmp_path / "a.ckpt")
    pb = save_checkpoint(b.best, tmp_path / "b.ckpt")
    same_bytes = pa.read_bytes() == pb.read_bytes()
    tp, te, _ = desk_data["test"]
    before = embed_pairs(restore_contrastive(a.best), tp, te)
    after = embed_pairs(restore_contrastive(load_checkpoint(pa, expected_config=ENCODER)), tp, te)
    round_trip = all(np.array_equal(x, y) for x, y in zip(before, after))
    elapsed = time.perf_counter() - t0
    ok = same_losses and same_ckpts and same_bytes and round_trip
    _report(acceptance_log, capsys, 8, "reproducibility", ok,
            f"{len(a.losses)} losses identical={same_losses}, {len(a.checkpoints)} checkpoints identical="
            f"{same_ckpts}, saved files byte-identical={same_bytes}, reload eval outputs identical={round_trip}",
            elapsed)
    assert ok
