"""The ten acceptance criteria at their stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts, so a failing criterion also fails the test run.
"""
import dataclasses
import os
import time

import numpy as np
import pytest
import torch
from sklearn.metrics import adjusted_rand_score

from gesfi import dsp, evaluation, latent, models, pipeline, synth
from gesfi.core import CsiRecord, SampleMeta
from gesfi.latent import TrainConfig

DESK = pipeline.DspConfig(size=32)
SEEDS = range(5)
FS = 1000.0
LAMBDA = 0.0517


def _elapsed(t0):
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def mixture3():
    src, tgt, truth = synth.planted_benchmark("mixture3", 0)
    return pipeline.build_image_set(src, DESK), pipeline.build_image_set(tgt, DESK)


# ---------------------------------------------------------------- 1


def test_c1_ratio_cancels_common_phase(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        A, C, T = rng.integers(2, 5), rng.integers(4, 31), 1000
        data = (rng.normal(1, 0.3, (A, C, T)) + 1j * rng.normal(0, 0.3, (A, C, T))) + 2.0
        rec = CsiRecord(data, FS, LAMBDA, SampleMeta("g"))
        theta = np.exp(1j * rng.uniform(0, 2 * np.pi, T))
        noisy = CsiRecord(data * theta, FS, LAMBDA, SampleMeta("g"))
        pair = dsp.select_antenna_pair(rec)
        clean_r = dsp.csi_ratio(rec, pair).values
        noisy_r = dsp.csi_ratio(noisy, pair).values
        worst = max(worst, float(np.max(np.abs(noisy_r - clean_r) / np.abs(clean_r))))
    dt = _elapsed(t0)
    ok = verdict(1, worst <= 1e-9 and dt < 5, f"max relative change {worst:.1e} (<= 1e-9), {dt:.1f}s (< 5s)")
    assert ok


# ---------------------------------------------------------------- 2


def _doppler_hit(f0, seed, sigma, rician_k):
    g = synth.GestureProfile("lin", "linear", peak_speed=-f0 * LAMBDA, duration_s=1.0)
    spec = synth.ScenarioSpec([g], [synth.DomainFactor(0)], reps=1, wavelength_m=LAMBDA, path_directions_rad=(0.0,),
                              path_gains=(0.3,), speed_jitter=0.0, amplitude_jitter=0.0, noise_sigma=sigma,
                              rician_k=rician_k, seed=seed)
    ds, truth = synth.generate(spec)
    rec = ds.records[0]
    sp = dsp.dfs_spectrogram(dsp.highpass(dsp.csi_ratio(rec, dsp.select_antenna_pair(rec))))
    peak = int(sp.power.mean(axis=1).argmax())
    want = int(np.abs(sp.frequencies - truth.doppler_hz[0][0][len(truth.doppler_hz[0][0]) // 2]).argmin())
    return abs(peak - want) <= 1


def test_c2_doppler_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    freqs = rng.uniform(-60, 60, 50)
    # SNR 10 dB against the total received power: unit static path plus the 0.3 moving path
    sigma = float(np.sqrt((1.0 + 0.3 ** 2) / 10))
    # the oracle is one line-of-sight static path and one mover; the default fading channel is reported alongside
    clean = np.mean([_doppler_hit(f, i, 0.0, np.inf) for i, f in enumerate(freqs)])
    noisy = np.mean([_doppler_hit(f, 100 + i, sigma, np.inf) for i, f in enumerate(freqs)])
    dt = _elapsed(t0)
    fading = np.mean([_doppler_hit(f, 100 + i, sigma, 4.0) for i, f in enumerate(freqs)])
    ok = verdict(2, clean == 1.0 and noisy >= 0.95 and dt < 30,
                 f"noise-free {clean:.0%} (100%), 10 dB {noisy:.0%} (>= 95%), {dt:.1f}s (< 30s); "
                 f"not gated: 10 dB over a Rician K=4 static channel {fading:.0%}")
    assert ok


# ---------------------------------------------------------------- 3


def _direct_scores(data):
    A, C, T = data.shape
    out = []
    for a in range(A):
        total = 0.0
        for c in range(C):
            amp = np.abs(data[a, c])
            m = sum(amp) / T
            total += sum((amp - m) ** 2) / T / m
        out.append(total / C)
    return np.array(out)


def test_c3_antenna_ordering(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        A = int(rng.integers(2, 6))
        data = rng.normal(size=(A, 3, 40)) + 1j * rng.normal(size=(A, 3, 40))
        data *= rng.uniform(0.2, 3.0, (A, 1, 1))
        got, ref = dsp.antenna_scores(data), _direct_scores(data)
        same_order = np.array_equal(np.argsort(got, kind="stable"), np.argsort(ref, kind="stable"))
        pair = dsp.select_antenna_pair(data)
        mismatches += not (same_order and pair == (int(np.argmax(ref)), int(np.argmin(ref))))
    dt = _elapsed(t0)
    ok = verdict(3, mismatches == 0 and dt < 5, f"{mismatches}/1000 ordering mismatches (0), {dt:.1f}s (< 5s)")
    assert ok


# ---------------------------------------------------------------- 4


def _grads(extractor, head, x, y, lambd):
    extractor.zero_grad()
    head.zero_grad()
    feats = extractor(x)
    if lambd is not None:
        feats = models.grad_reverse(feats, lambd)
    torch.nn.functional.cross_entropy(head(feats), y).backward()
    return [p.grad.clone() for p in extractor.parameters()], [p.grad.clone() for p in head.parameters()]


def test_c4_gradient_reversal(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(4)
    extractor = torch.nn.Sequential(torch.nn.Linear(6, 5), torch.nn.Tanh()).double()
    head = models.Head("domain-adversary", 5, 3, bottleneck=4, hidden=4, norm=False).double()
    x, y = torch.randn(8, 6, dtype=torch.float64), torch.randint(0, 3, (8,))
    lambd = 0.7
    plain_e, plain_h = _grads(extractor, head, x, y, None)
    rev_e, rev_h = _grads(extractor, head, x, y, lambd)
    rel_rev = max(float(((r + lambd * p).abs() / p.abs().clamp_min(1e-12)).max()) for r, p in zip(rev_e, plain_e))
    rel_head = max(float(((r - p).abs() / p.abs().clamp_min(1e-12)).max()) for r, p in zip(rev_h, plain_h))

    def loss():
        with torch.no_grad():
            return float(torch.nn.functional.cross_entropy(head(models.grad_reverse(extractor(x), lambd)), y))

    h = 1e-6
    rel_fd = 0.0
    for p, g in zip(head.parameters(), rev_h):
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            fd = (up - down) / (2 * h)
            rel_fd = max(rel_fd, abs(fd - gflat[i].item()) / max(abs(fd), 1e-6))
    dt = _elapsed(t0)
    ok = verdict(4, rel_rev <= 1e-6 and rel_head <= 1e-6 and rel_fd <= 1e-3 and dt < 30,
                 f"reversed vs -lambda*plain {rel_rev:.1e} (<= 1e-6), head finite differences {rel_fd:.1e} "
                 f"(<= 1e-3), {dt:.1f}s (< 30s)")
    assert ok


# ---------------------------------------------------------------- 5

MINING_PASSES = 30


def test_c5_mining_recovers_planted_domains(verdict):
    t0 = time.perf_counter()
    aris = []
    for seed in SEEDS:
        spec, target_ids = synth.benchmark_spec("mixture3", seed)
        # only the source rooms are mined; per-record seeds make this identical to the source split
        spec = dataclasses.replace(spec, domain_factors=[d for d in spec.domain_factors
                                                         if d.domain_id not in target_ids])
        src, truth = synth.generate(spec)
        images = pipeline.build_image_set(src, DESK, workers=os.cpu_count() or 1)
        cfg = TrainConfig(seed=seed, backbone="identity", extractor_trainable=False, epochs=MINING_PASSES + 2,
                          early_stop=False)
        run = latent.GesFi(images, cfg)
        for _ in range(MINING_PASSES):
            state, _, _ = run.mine()
        aris.append(adjusted_rand_score(truth.domain_ids[:len(images)], state.pseudo_labels))
    dt = _elapsed(t0)
    ok = verdict(5, min(aris) >= 0.9 and dt < 60,
                 f"ARI per seed {np.round(aris, 3).tolist()} (all >= 0.9), {dt:.0f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 6


def test_c6_domain_weights(verdict):
    w = latent.domain_weights([60, 30, 10])
    balanced = [latent.domain_weights([n] * K) for K in (2, 3, 7) for n in (1, 13, 100)]
    exact = w.tolist() == [100 / 60, 100 / 30, 10.0]
    flat = all(b.tolist() == [float(len(b))] * len(b) for b in balanced)
    state = latent.make_state(np.eye(3), np.repeat(np.arange(3), [60, 30, 10]), 3, 10.0)
    ok = verdict(6, exact and flat and state.weights.tolist() == w.tolist(),
                 f"weights {w.tolist()}, balanced counts give K: {flat}")
    assert ok


# ---------------------------------------------------------------- 7


def test_c7_purity_entropy_ideals(verdict):
    p9, h9 = evaluation.purity([4] * 9), evaluation.entropy([4] * 9)
    p5, h5 = evaluation.purity([4] * 5), evaluation.entropy([4] * 5)
    ok = verdict(7, abs(p9 - 0.1111) <= 1e-4 and abs(h9 - 2.197) <= 1e-3
                 and abs(p5 - 0.200) <= 1e-3 and abs(h5 - 1.609) <= 1e-3,
                 f"M=9 purity {p9:.4f} entropy {h9:.3f}; M=5 purity {p5:.4f} entropy {h5:.3f}")
    assert ok


# ---------------------------------------------------------------- 8

C8_BUDGET_S = 15 * 60 * 4 / max(1, min(4, os.cpu_count() or 1))  # stated for 4 cores


def _protocol(kind, src, tgt, seed, domain_factor="location"):
    cfg = TrainConfig(seed=seed, early_stop=False)
    if kind == "gesfi":
        return latent.train_gesfi(src, cfg, tgt).target_accuracy
    return evaluation.train_baseline(kind, src, cfg, tgt, domain_factor=domain_factor).target_accuracy


def test_c8_desk_generalization(mixture3, verdict):
    src, tgt = mixture3
    t0 = time.perf_counter()
    acc = {k: [_protocol(k, src, tgt, s) for s in SEEDS] for k in ("erm", "gesfi", "kmeans-latent")}
    dt = _elapsed(t0)
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    margin = mean["gesfi"] - mean["erm"]
    gap = abs(mean["kmeans-latent"] - mean["gesfi"])
    ok = verdict(8, margin >= 0.10 and gap <= 0.03 and dt < C8_BUDGET_S,
                 f"GesFi {mean['gesfi']:.3f} vs ERM {mean['erm']:.3f} (margin {100 * margin:+.1f} pts, >= +10); "
                 f"kmeans-latent {mean['kmeans-latent']:.3f} (gap {100 * gap:.1f} pts, <= 3); "
                 f"{dt / 60:.1f} min (< {C8_BUDGET_S / 60:.0f} min on {os.cpu_count()} cores)")
    print({k: np.round(v, 3).tolist() for k, v in acc.items()})
    assert ok


# ---------------------------------------------------------------- 9


def test_c9_semantic_conflict(verdict):
    src_ds, tgt_ds, truth = synth.planted_benchmark("semantic-conflict", 0)
    src, tgt = pipeline.build_image_set(src_ds, DESK), pipeline.build_image_set(tgt_ds, DESK)
    dom = np.asarray(truth.domain_ids[:len(src)])
    feats = models.IdentityBackbone()(torch.from_numpy(src.images)).numpy()
    eta = evaluation.estimate_eta(feats[dom == 0], src.gestures[dom == 0], feats[dom == 1], src.gestures[dom == 1]).eta
    ges = [_protocol("gesfi", src, tgt, s) for s in SEEDS]
    phys = [_protocol("physical-adversarial", src, tgt, s, domain_factor="orientation") for s in SEEDS]
    wins = sum(g >= p for g, p in zip(ges, phys))
    ok = verdict(9, eta > 0.4 and wins == len(ges),
                 f"eta {eta:.3f} (> 0.4); GesFi {np.round(ges, 3).tolist()} vs physical-adversarial "
                 f"{np.round(phys, 3).tolist()} ({wins}/{len(ges)} seeds GesFi >= baseline)")
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_determinism(mixture3, tmp_path, verdict):
    src, tgt = mixture3
    cfg = TrainConfig(seed=3, epochs=6, early_stop=False)
    paths = []
    for i in range(2):
        rep = latent.train_gesfi(src, cfg, tgt)
        rep.write_jsonl(tmp_path / f"run{i}.jsonl")
        paths.append(tmp_path / f"run{i}.jsonl")
    a, b = (p.read_bytes() for p in paths)
    ok = verdict(10, a == b and len(a) > 0, f"two seed-3 runs: {len(a)} bytes each, identical: {a == b}")
    assert ok
