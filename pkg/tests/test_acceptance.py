"""Acceptance criteria, one test per criterion.

Each test prints a single ``[C<n>] PASS|FAIL ...`` line before asserting.
Criterion 8 trains full-size models on the default synthetic corpus and is
marked ``slow``; deselect it with ``-m "not slow"``.
"""

import hashlib
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch
from scipy.optimize import minimize

from avwws import augment as aug
from avwws.backbones import ARCHITECTURES, INPUT_SHAPES, build_model, count_parameters, simam, simam_energy
from avwws.fusion import cascaded_decision, score_fusion
from avwws.metrics import evaluate
from avwws.training import weighted_bce

LAMBDA = 1e-3
BATCH_SIZE = 64


@pytest.fixture
def verdict(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[C{criterion}] {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return emit


# ---------------------------------------------------------------------------
# 1. closed-form energy vs numeric minimisation
# ---------------------------------------------------------------------------


def _numeric_min_energy(x, t_index, lam):
    """Minimise the regularised target/peer energy over (w, b) with BFGS."""
    t = x[t_index]
    others = np.delete(x, t_index)

    def energy(p):
        w, b = p
        r_o = -1.0 - (w * others + b)
        r_t = 1.0 - (w * t + b)
        e = np.mean(r_o**2) + r_t**2 + lam * w**2
        grad = np.array([
            -2 * np.mean(r_o * others) - 2 * r_t * t + 2 * lam * w,
            -2 * np.mean(r_o) - 2 * r_t,
        ])
        return e, grad

    res = minimize(energy, np.zeros(2), jac=True, method="BFGS", options={"gtol": 1e-13, "maxiter": 1000})
    return res.fun


def test_c1_simam_energy_matches_numeric_minimum(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for k in range(100):
        m = (4, 16, 64)[k % 3]
        x = rng.standard_normal(m)
        closed = simam_energy(x, LAMBDA)
        for i in range(m):
            numeric = _numeric_min_energy(x, i, LAMBDA)
            worst = max(worst, abs(closed[i] - numeric) / numeric)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 60
    verdict(1, ok, f"max relative error {worst:.2e} (tol 1e-3), runtime {elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------------------
# 2-4. parameter counts and shape contract
# ---------------------------------------------------------------------------


def test_c2_simam_adds_no_parameters(verdict):
    counts = {}
    for modality in ("audio", "video"):
        counts[modality] = (count_parameters(build_model("hybrid", modality)),
                            count_parameters(build_model("hybrid_simam", modality)))
    ok = all(a == b for a, b in counts.values())
    verdict(2, ok, f"hybrid without/with SimAM: {counts}")
    assert ok


def test_c3_hybrid_smaller_than_resnet3d34(verdict):
    rows = {}
    for modality in ("audio", "video"):
        rows[modality] = (count_parameters(build_model("hybrid", modality)),
                          count_parameters(build_model("resnet3d34", modality)))
    ok = all(h < r for h, r in rows.values())
    verdict(3, ok, "hybrid vs resnet3d34: " + ", ".join(f"{m} {h / 1e6:.2f}M < {r / 1e6:.2f}M"
                                                          for m, (h, r) in rows.items()))
    assert ok


def test_c4_shape_contract(verdict):
    torch.manual_seed(0)
    failures = []
    for arch in ARCHITECTURES:
        for modality in ("audio", "video"):
            model = build_model(arch, modality).eval()
            x = torch.rand(1, *INPUT_SHAPES[modality])
            with torch.no_grad():
                out = model(x)
            dims = tuple(level.shape[-1] for level in out.levels)
            p = float(out.prob)
            if not (0.0 <= p <= 1.0) or dims != (64, 128, 256, 512) or out.prob.shape != (1,):
                failures.append(f"{arch}/{modality}: p={p}, dims={dims}")
            del model
    ok = not failures
    verdict(4, ok, "4 architectures x 2 modalities" + ("" if ok else f"; failures: {failures}"))
    assert ok


# ---------------------------------------------------------------------------
# 5. gradient checks
# ---------------------------------------------------------------------------


def _central_difference(f, tensor, index, h):
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = f().item()
        tensor[index] = orig - h
        down = f().item()
        tensor[index] = orig
    return (up - down) / (2 * h)


def test_c5_gradient_checks(verdict):
    rng = np.random.default_rng(7)
    errors = {}

    # weighted BCE w.r.t. probabilities
    p = torch.tensor(rng.uniform(0.05, 0.95, 16), dtype=torch.float64, requires_grad=True)
    y = torch.tensor(rng.integers(0, 2, 16), dtype=torch.float64)
    weighted_bce(p, y).backward()
    num = torch.tensor([_central_difference(lambda: weighted_bce(p, y), p.data, i, 1e-6) for i in range(16)])
    errors["weighted_bce"] = ((p.grad - num).norm() / num.norm()).item()

    # SimAM w.r.t. its input
    x = torch.tensor(rng.standard_normal((2, 3, 4, 4)), dtype=torch.float64, requires_grad=True)
    v = torch.tensor(rng.standard_normal((2, 3, 4, 4)), dtype=torch.float64)
    (simam(x) * v).sum().backward()
    flat = x.data.view(-1)
    num = torch.tensor([_central_difference(lambda: (simam(x.data) * v).sum(), flat, i, 1e-6)
                        for i in range(flat.numel())])
    errors["simam"] = ((x.grad.view(-1) - num).norm() / num.norm()).item()

    # one random weight per residual stage of the full hybrid SimAM model
    torch.manual_seed(0)
    # train-mode BN: batch statistics keep activations (and the sigmoid) in range
    model = build_model("hybrid_simam", "audio").double().train()
    inp = torch.rand(2, *INPUT_SHAPES["audio"], dtype=torch.float64)
    lab = torch.tensor([1.0, 0.0], dtype=torch.float64)

    def loss():
        return weighted_bce(model(inp).prob, lab)

    loss().backward()
    stages = [("front3d", s) for s in range(4)] + [("back2d", s) for s in range(4)]
    for part, s in stages:
        w = getattr(model, part).stages[s][0].conv1.weight
        g = w.grad.abs().view(-1)
        # draw among weights with a usable gradient so the ratio is meaningful
        candidates = torch.nonzero(g > 1e-3 * g.max()).view(-1).numpy()
        k = int(rng.choice(candidates))
        index = np.unravel_index(k, w.shape)
        analytic = w.grad[index].item()
        # small step: early conv weights feed ~1e5 ReLUs, larger steps cross kinks
        numeric = _central_difference(loss, w.data, index, 1e-6)
        errors[f"{part}.stage{s + 1}"] = abs(analytic - numeric) / abs(numeric)
    worst = max(errors.values())
    ok = worst <= 1e-3
    verdict(5, ok, "relative errors " + ", ".join(f"{k}={v:.1e}" for k, v in errors.items()))
    assert ok


# ---------------------------------------------------------------------------
# 6. WWS = FRR + FAR on the published table rows
# ---------------------------------------------------------------------------

# (row, split, FRR, FAR, WWS) transcribed from the published result tables;
# rows without FRR/FAR are left out
PUBLISHED = [
    ("D1", "dev", 12.5, 3.42, 15.92), ("D1", "eval", 16.62, 4.75, 21.36),
    ("D2", "dev", 10.42, 5.68, 16.09), ("D2", "eval", 13.24, 6.77, 20.01),
    ("D3", "dev", 9.78, 5.44, 15.21), ("D3", "eval", 12.08, 8.12, 20.2),
    ("D4", "dev", 8.33, 6.35, 14.68), ("D4", "eval", 13.12, 7.42, 20.54),
    ("D5", "dev", 7.53, 4.62, 12.15), ("D5", "eval", 7.66, 8.59, 16.25),
    ("D6", "dev", 8.65, 4.71, 13.37), ("D6", "eval", 10.79, 6.35, 17.14),
    ("D7", "dev", 5.45, 7.12, 12.57), ("D7", "eval", 7.05, 10.15, 17.2),
    ("D8", "dev", 5.45, 4.76, 10.21), ("D8", "eval", 5.64, 6.05, 11.69),
    ("D9", "dev", 6.09, 4.43, 10.51), ("D9", "eval", 4.97, 7.33, 12.3),
    ("A1", "dev", 5.45, 4.76, 10.21), ("A1", "eval", 5.64, 6.05, 11.69),
    ("A2", "dev", 5.77, 4.28, 10.05), ("A2", "eval", 5.46, 5.88, 11.34),
    ("A3", "dev", 6.76, 2.98, 9.71), ("A3", "eval", 7.05, 4.19, 11.24),
    ("A4", "dev", 5.93, 3.61, 9.54), ("A4", "eval", 6.38, 4.65, 11.03),
    ("V1", "dev", 8.81, 8.03, 16.85), ("V1", "eval", 18.52, 9.03, 27.54),
    ("V2", "dev", 9.78, 6.64, 16.41), ("V2", "eval", 14.41, 9.62, 24.03),
    ("V3", "dev", 10.1, 6.3, 16.3), ("V3", "eval", 11.83, 9.51, 21.34),
    ("V4", "dev", 6.89, 9.09, 15.98), ("V4", "eval", 9.56, 13.37, 22.93),
    ("V5", "dev", 9.13, 6.25, 15.39), ("V5", "eval", 8.03, 11.1, 19.13),
    ("VA1", "dev", 7.3, 6.8, 14.1), ("VA1", "eval", 10.1, 15.0, 25.1),
    ("VA3", "dev", 3.85, 3.42, 7.27),
    ("VA5", "dev", 1.92, 3.37, 5.29), ("VA5", "eval", 1.54, 4.82, 6.36),
    ("VA6", "dev", 5.29, 2.3, 7.59), ("VA6", "eval", 7.29, 3.5, 10.79),
    ("VA7", "dev", 3.04, 2.55, 5.59), ("VA7", "eval", 2.15, 3.44, 5.59),
]


def _scores_for(frr, far, n=10000):
    """Score list with exactly ``frr`` / ``far`` percent errors out of n per class."""
    n_fr, n_fa = round(frr * n / 100), round(far * n / 100)
    probs = np.r_[np.full(n_fr, 0.1), np.full(n - n_fr, 0.9), np.full(n_fa, 0.9), np.full(n - n_fa, 0.1)]
    labels = np.r_[np.ones(n, dtype=int), np.zeros(n, dtype=int)]
    return probs, labels


def test_c6_wws_identity_on_published_rows(verdict):
    bad = []
    for row, split, frr, far, wws in PUBLISHED:
        r = evaluate(_scores_for(frr, far))
        reproduced = math.isclose(r.frr, frr, abs_tol=1e-9) and math.isclose(r.far, far, abs_tol=1e-9)
        if not reproduced or abs(r.wws - wws) > 0.01 + 1e-9:
            bad.append(f"{row} {split}: {frr} + {far} = {r.wws:.2f} vs published {wws}")
    ok = not bad
    verdict(6, ok, f"{len(PUBLISHED) - len(bad)}/{len(PUBLISHED)} rows within 0.01"
            + ("" if ok else "; inconsistent: " + "; ".join(bad)))
    assert ok


# ---------------------------------------------------------------------------
# 7. fusion oracles on a 101 x 101 grid
# ---------------------------------------------------------------------------


def test_c7_fusion_brute_force_grid(verdict):
    grid = [i / 100 for i in range(101)]
    mismatches = 0
    pa = np.array([a for a in grid for _ in grid])
    pv = np.array([v for _ in grid for v in grid])
    fused = score_fusion(pa, pv, 0.5, 0.5)
    cascade = cascaded_decision(pv, pa, 0.1, 0.4)
    k = 0
    for a in grid:
        for v in grid:
            expected_score = 0.5 * a + 0.5 * v
            expected_cascade = 1 if v >= 0.1 and a >= 0.4 else 0
            if fused[k] != expected_score or cascade[k] != expected_cascade:
                mismatches += 1
            if score_fusion(a, v) != expected_score or cascaded_decision(v, a) != bool(expected_cascade):
                mismatches += 1
            k += 1
    ok = mismatches == 0
    verdict(7, ok, f"{mismatches} mismatches over {len(grid) ** 2} grid points (alpha=beta=0.5, th_l=0.1, th_h=0.4)")
    assert ok


# ---------------------------------------------------------------------------
# 8. desk-scale learnability on the default synthetic corpus
# ---------------------------------------------------------------------------

DESK = dict(arch="hybrid_simam", epochs=50, batch_size=BATCH_SIZE, target_dev_wws=20.0, amp=True, seed=0,
            max_minutes=30.0)


@pytest.mark.slow
def test_c8_desk_scale_learnability(tmp_path_factory, verdict):
    from avwws.data import SynthConfig, generate_synthetic_dataset, load_manifest
    from avwws.fusion import HMAFusion
    from avwws.training import WakeWordClassifier

    torch.manual_seed(0)
    manifests = generate_synthetic_dataset(SynthConfig(), tmp_path_factory.mktemp("default_corpus"))
    train, dev = load_manifest(manifests["train"]), load_manifest(manifests["dev"])
    y_train = np.array([r.label for r in train])
    y_dev = np.array([r.label for r in dev])

    start = time.perf_counter()
    audio = WakeWordClassifier(modality="audio", **DESK).fit(train, dev=dev)
    audio_minutes = (time.perf_counter() - start) / 60
    audio_curve = [h[3] for h in audio.history_]
    video = WakeWordClassifier(modality="video", **DESK).fit(train, dev=dev)
    video_curve = [h[3] for h in video.history_]

    wws_a = evaluate((audio.predict_proba(dev)[:, 1], y_dev)).wws
    wws_v = evaluate((video.predict_proba(dev)[:, 1], y_dev)).wws
    hma = HMAFusion(lr=1e-4, epochs=200, seed=0)
    hma.fit(np.hstack([audio.embed(train), video.embed(train)]), y_train)
    wws_av = evaluate((hma.predict_proba(np.hstack([audio.embed(dev), video.embed(dev)]))[:, 1], y_dev)).wws

    learn_ok = min(audio_curve) <= 20.0 and len(audio_curve) <= 50 and audio_minutes < 30
    fusion_ok = wws_av <= min(wws_a, wws_v)
    ok = learn_ok and fusion_ok
    verdict(8, ok, f"audio dev WWS per epoch {[round(w, 2) for w in audio_curve]} in {audio_minutes:.1f} min "
                   f"(<= 20% within 50 epochs, < 30 min); video per epoch {[round(w, 2) for w in video_curve]}; "
                   f"averaged dev WWS audio {wws_a:.2f}, video {wws_v:.2f}, HMA {wws_av:.2f} "
                   f"(HMA <= better unimodal)")
    assert ok


# ---------------------------------------------------------------------------
# 9. augmentation invariants
# ---------------------------------------------------------------------------


def test_c9_augmentation_invariants(verdict):
    rng = np.random.default_rng(11)
    notes = []

    ratios = rng.uniform(0.9, 1.1, 100)
    lengths = rng.integers(1000, 64000, 100)
    speed_ok = True
    for r, n in zip(ratios, lengths):
        expected = math.floor(Fraction(int(n)) / Fraction(float(r)) + Fraction(1, 2))
        if aug.speed_perturb(np.zeros(int(n)), float(r)).size != expected:
            speed_ok = False
    notes.append(f"speed lengths {'exact' if speed_ok else 'WRONG'}")

    bound = 1 - (1 - 2 * 10 / 80) * (1 - 2 * 20 / 256)
    spec = rng.random((256, 80)) + 0.5
    worst = 0.0
    for seed in range(1000):
        out = aug.spec_augment(spec, seed=seed)
        cols = np.all(out == 0, axis=0).sum()
        rows = np.all(out == 0, axis=1).sum()
        worst = max(worst, float(np.mean(out == 0)))
        if cols > 20 or rows > 40:
            worst = math.inf
    mask_ok = worst <= bound
    notes.append(f"max masked fraction {worst:.3f} <= {bound:.3f}")

    try:
        aug.negative_subsegment(np.zeros(16000), 1, seed=0)
        ns_ok = False
    except ValueError:
        ns_ok = True
    notes.append(f"NS on positive {'rejected' if ns_ok else 'ACCEPTED'}")

    wave = rng.standard_normal(24000) * 0.1
    spec = rng.standard_normal((256, 80))
    clip = rng.integers(0, 256, (64, 112, 112, 3), dtype=np.uint8)
    noise = [rng.standard_normal(32000) * 0.1]
    policy = aug.AugmentPolicy(audio=frozenset({"NR", "NS", "VP", "SP", "TS", "SA"}),
                               video=frozenset(aug.VIDEO_METHODS), default_prob=1.0, seed=5, noise_dir="unused")
    same = [
        np.array_equal(aug.augment_waveform(wave, 0, policy, 17, noise_pool=noise),
                       aug.augment_waveform(wave, 0, policy, 17, noise_pool=noise)),
        np.array_equal(aug.augment_spectrogram(spec, policy, 17), aug.augment_spectrogram(spec, policy, 17)),
        np.array_equal(aug.augment_video(clip, policy, 17), aug.augment_video(clip, policy, 17)),
        np.array_equal(aug.negative_subsegment(wave, 0, 3), aug.negative_subsegment(wave, 0, 3)),
        np.array_equal(aug.spec_augment(spec, seed=4), aug.spec_augment(spec, seed=4)),
    ]
    det_ok = all(same)
    notes.append(f"deterministic {sum(same)}/{len(same)}")

    ok = speed_ok and mask_ok and ns_ok and det_ok
    verdict(9, ok, "; ".join(notes))
    assert ok


# ---------------------------------------------------------------------------
# 10. reproducible CLI runs
# ---------------------------------------------------------------------------

SMALL_CORPUS = """\
n_train_pos = 4
n_train_neg = 4
n_dev_pos = 2
n_dev_neg = 2
n_eval_pos = 3
n_eval_neg = 3
n_noise_files = 1
duration_range = 1.0, 1.5
"""


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_c10_deterministic_runs_identical_scores(tmp_path, verdict):
    from avwws.cli import main

    (tmp_path / "synth.cfg").write_text(SMALL_CORPUS)
    digests = []
    for k in range(2):
        root = tmp_path / f"run{k}"
        assert main(["synth", "--config", str(tmp_path / "synth.cfg"), "--seed", "21", "--out",
                     str(root / "data"), "--deterministic"]) == 0
        (root / "train.cfg").write_text(f"arch = resnet2d34\nepochs = 2\nbatch_size = 8\n"
                                        f"augment_audio = NS, SP, SA\ndata_dir = {root / 'data'}\n")
        assert main(["train", "--config", str(root / "train.cfg"), "--seed", "21", "--out", str(root / "model"),
                     "--deterministic"]) == 0
        assert main(["eval", "--checkpoint", str(root / "model" / "model.pt"), "--manifest",
                     str(root / "data" / "eval.jsonl"), "--seed", "21", "--out", str(root / "eval"),
                     "--deterministic"]) == 0
        digests.append(_digest(root / "eval" / "scores.csv"))
    ok = digests[0] == digests[1]
    verdict(10, ok, f"scores.csv sha256 {digests[0][:16]} vs {digests[1][:16]}")
    assert ok
