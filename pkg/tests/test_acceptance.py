"""Acceptance criteria. Each test prints one ``[criterion N] PASS|FAIL`` line."""

import math
import time

import numpy as np
import pytest
import torch
from PIL import Image

from crowdattack.artifacts import sha256_file
from crowdattack.cli import main
from crowdattack.config import LossWeights
from crowdattack.generator import PerturbationGenerator, apply, budget_levels, quantize_adversarial
from crowdattack.losses import (
    adaptive_threshold, attack_loss, cam_loss, density_suppression, detect_peaks, freq_loss,
    heatmap_suppression, high_confidence_set, hinge_loss, isolation_ratio, logit_suppression,
    peak_suppression, perturbation_loss, tv_loss,
)
from crowdattack.metrics import evaluate, psnr, ssim, transfer_matrix, transfer_ratio
from crowdattack.surrogate import DENSITY, POINT, ModelOutput, PointOutput

from oracles import (
    freq_naive, gradcheck_points, isolation_bruteforce, peaks_bruteforce, ssim_constant,
)

W = LossWeights()


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


# -- 1: gradient suite ------------------------------------------------------------------

def _points(logits):
    return PointOutput(torch.zeros(logits.shape[-1], 2, dtype=logits.dtype), logits, torch.sigmoid(logits))


def _kink(fn, h=1e-6, tol=1e-4):
    """Skip coordinates where one-sided differences disagree (set flips, ties, |.| at 0)."""
    def skip(x, index):
        base = float(fn(x))
        xp, xm = x.clone(), x.clone()
        xp[index] += h
        xm[index] -= h
        fwd, bwd = (float(fn(xp)) - base) / h, (base - float(fn(xm))) / h
        return abs(fwd - bwd) > tol * max(1.0, abs(fwd), abs(bwd))
    return skip


def _peak_sets_stable(d_fn):
    def skip(x, index):
        ref = detect_peaks(d_fn(x), W)
        for sgn in (-1, 1):
            y = x.clone()
            y[index] += sgn * 1e-5
            p = detect_peaks(d_fn(y), W)
            if not (torch.equal(p.significant, ref.significant) and torch.equal(p.near_threshold, ref.near_threshold)):
                return True
        return _kink(lambda z: density_suppression(d_fn(z), W).value)(x, index)
    return skip


def gradient_cases(rng):
    g = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
    logits = torch.randn(16, generator=g, dtype=torch.float64) * 2
    dmap = torch.rand(4, 4, generator=g, dtype=torch.float64)
    delta = (torch.rand(3, 4, 4, generator=g, dtype=torch.float64) * 2 - 1) * 0.03
    rho = torch.rand(4, 4, generator=g, dtype=torch.float64)
    img = torch.rand(3, 4, 4, generator=g, dtype=torch.float64)
    proj_d = torch.randn(3, dtype=torch.float64, generator=g)
    proj_p = torch.randn(16, 48, dtype=torch.float64, generator=g) * 3
    tau = 0.4

    def density_of(dl):
        # tiny differentiable stand-in for a surrogate: per-pixel softplus of a colour projection
        return torch.nn.functional.softplus(torch.einsum("c,chw->hw", proj_d, (img + dl).clamp(0, 1)) * 4)

    def logits_of(dl):
        return proj_p @ ((img + dl).clamp(0, 1).reshape(-1)) - proj_p.sum(1) * 0.5

    def peaks_fixed(x):
        return detect_peaks(x.detach(), W)

    cases = {
        "L_dense": (lambda x: logit_suppression(_points(x), 300, tau, W), logits),
        "L_sparse": (lambda x: logit_suppression(_points(x), 40, tau, W), logits),
        "L_hmap": (lambda x: heatmap_suppression(x, peaks_fixed(x), W), dmap),
        "L_peak": (lambda x: peak_suppression(x, peaks_fixed(x), W), dmap),
        "L_freq": (freq_loss, delta),
        "L_cam": (lambda x: cam_loss(x, rho), delta),
        "L_hinge": (hinge_loss, delta),
        "L_tv": (tv_loss, delta),
        "L_pert": (lambda x: perturbation_loss(x, rho, W)[0], delta),
        "L_attack[density]": (lambda x: attack_loss(ModelOutput(DENSITY, density=density_of(x)), x, rho,
                                                    250, tau, W).value, delta),
        "L_attack[point]": (lambda x: attack_loss(ModelOutput(POINT, points=_points(logits_of(x))), x, rho,
                                                  250, tau, W).value, delta),
    }
    skips = {name: _kink(fn) for name, (fn, _) in cases.items()}
    skips["L_hmap"] = _peak_sets_stable(lambda z: z)
    skips["L_peak"] = _peak_sets_stable(lambda z: z)
    skips["L_attack[density]"] = _peak_sets_stable(density_of)
    return cases, skips


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures, counts = {}, {}
    for trial in range(3):
        cases, skips = gradient_cases(rng)
        for name, (fn, x) in cases.items():
            checked, bad = gradcheck_points(fn, x, n=10, rtol=1e-3, atol=1e-8, seed=trial, skip=skips[name])
            counts[name] = counts.get(name, 0) + checked
            if checked < 10 or bad:
                failures[name] = (checked, bad[:2])
    secs = time.perf_counter() - t0
    ok = not failures and secs < 60
    verdict(1, ok, f"{len(counts)} losses x 3 random 4x4 inputs x 10 coords, rtol 1e-3; "
                   f"failures {failures or 'none'}; {secs:.1f}s")


# -- 2: oracle equivalence --------------------------------------------------------------

def test_criterion_2_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mism = 0
    for k in range(200):
        d = rng.uniform(0, 1, (16, 16))
        if k % 4 == 1:
            d = np.round(d * 4) / 4  # ties and plateaus
        elif k % 4 == 2:
            d = d * (rng.uniform(0, 1, d.shape) < 0.1)  # sparse peaks on zero background
        elif k % 50 == 3:
            d = np.zeros_like(d)  # fallback path
        chi, sig, nt, fb = peaks_bruteforce(d)
        p = detect_peaks(torch.from_numpy(d), W)
        same = (p.local_maxima_points() == chi and p.significant_points() == sig
                and p.near_threshold_points() == nt and p.fallback_used == fb
                and isolation_ratio(p) == isolation_bruteforce(sig))
        mism += not same
    freq_err = 0.0
    for k in range(5):
        x = rng.normal(size=(3, 8, 8))
        freq_err = max(freq_err, abs(float(freq_loss(torch.from_numpy(x))) - freq_naive(x)))
    ssim_err = 0.0
    psnr_err = 0.0
    for a, b in [(0.5, 0.6), (0.1, 0.9), (0.3, 0.3), (1.0, 0.0)]:
        A, B = np.full((16, 16, 3), a), np.full((16, 16, 3), b)
        ssim_err = max(ssim_err, abs(ssim(A, B) - ssim_constant(a, b)))
    for k in (1, 3, 8, 20):
        A = np.full((16, 16, 3), 60 / 255)
        psnr_err = max(psnr_err, abs(psnr(A, A + k / 255)[0] - 10 * math.log10(255 ** 2 / k ** 2)))
    secs = time.perf_counter() - t0
    ok = mism == 0 and freq_err <= 1e-5 and ssim_err <= 1e-6 and psnr_err <= 1e-6 and secs < 60
    verdict(2, ok, f"peaks/isolation mismatches {mism}/200; freq err {freq_err:.2e}; "
                   f"SSIM err {ssim_err:.2e}; PSNR err {psnr_err:.2e}; {secs:.1f}s")


# -- 3: formula spot values -------------------------------------------------------------

def test_criterion_3_spot_values(verdict):
    t0, tT = adaptive_threshold(0, 30, W), adaptive_threshold(30, 30, W)
    tr1, tr2 = transfer_ratio(420.71, 249.19), transfer_ratio(171.53, 313.45)
    clean = np.random.default_rng(0).integers(0, 200, (32, 32, 3)) / 255
    p, _ = psnr(clean, clean + 8 / 255)
    ok = (abs(t0 - 0.5) < 1e-12 and abs(tT - 0.3) < 1e-12 and round(tr1, 2) == 1.69
          and round(tr2, 2) == 0.55 and abs(p - 30.07) <= 0.01)
    verdict(3, ok, f"tau(0)={t0:.4f} tau(T)={tT:.4f} TR={tr1:.4f},{tr2:.4f} PSNR(8/255)={p:.4f} dB")


# -- 4: budget invariant ----------------------------------------------------------------

def _states():
    yield "zero-init", PerturbationGenerator()
    for seed, scale in ((1, 0.5), (2, 3.0), (3, 50.0)):
        torch.manual_seed(seed)
        g = PerturbationGenerator()
        with torch.no_grad():
            for prm in g.parameters():
                prm.normal_(0, scale / max(1, prm[0].numel()) ** 0.5)
        yield f"random x{scale}", g.eval()
    torch.manual_seed(4)
    g = PerturbationGenerator()
    with torch.no_grad():
        g.out.bias.fill_(1e4)  # saturated at +epsilon
    yield "saturated", g.eval()


def test_criterion_4_budget(verdict, tmp_path):
    rng = np.random.default_rng(11)
    eps = 8 / 255
    q = budget_levels(eps)
    worst_saved, worst_round, worst_float, n = 0, 0, 0.0, 0
    for name, gen in _states():
        for i in range(100 // 5):
            if i % 2:
                clean = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)  # off-grid values
            else:
                clean = (rng.integers(0, 256, (64, 64, 3)) / 255).astype(np.float32)
            x = torch.from_numpy(clean).permute(2, 0, 1)[None]
            with torch.no_grad():
                adv = apply(x, gen(x))
            worst_float = max(worst_float, float((adv - x).abs().max()))
            adv_np = adv[0].permute(1, 2, 0).numpy()
            clean_u8 = np.rint(clean.astype(np.float64) * 255).astype(np.uint8)
            path = tmp_path / f"{n}.png"
            Image.fromarray(quantize_adversarial(clean_u8, adv_np, eps)).save(path)
            saved = np.asarray(Image.open(path)).astype(np.int64)
            worst_saved = max(worst_saved, int(np.abs(saved - clean_u8.astype(np.int64)).max()))
            if i % 2 == 0:  # on-grid clean: rounding alone must already respect the budget
                rounded = np.rint(np.clip(adv_np.astype(np.float64), 0, 1) * 255)
                worst_round = max(worst_round, int(np.abs(rounded - clean_u8).max()))
            n += 1
    ok = n == 100 and worst_saved <= q and worst_round <= q and worst_float <= eps + 1e-7
    verdict(4, ok, f"{n} images over 5 generator states: max saved diff {worst_saved} levels "
                   f"(budget {q}), rounding-only {worst_round}, float {worst_float * 255:.4f}/255")


# -- 5 and 6: desk-scale efficacy and transfer ------------------------------------------

@pytest.fixture(scope="module")
def desk_eval(desk):
    test = desk["test"]
    out = {}
    for s, gen in desk["generators"].items():
        for t, model in desk["models"].items():
            out[(s, t)] = evaluate(gen, model, test).report
    mat = transfer_matrix(desk["generators"], desk["models"], test)
    return out, mat


@pytest.mark.slow
def test_criterion_5_efficacy(verdict, desk, desk_eval):
    reps, _ = desk_eval
    r = reps[(DENSITY, DENSITY)]
    ratio_gt = r.adv_mae_gt / r.clean_mae
    ratio_clean = r.mae / r.clean_mae
    ok = (ratio_gt >= 3 and ratio_clean >= 3 and r.psnr_mean >= 18
          and desk["generator_epochs"] <= 50 and desk["seconds"] < 1800)
    verdict(5, ok, f"density surrogate: clean MAE {r.clean_mae:.2f}, adversarial MAE vs GT {r.adv_mae_gt:.2f} "
                   f"({ratio_gt:.1f}x), vs clean prediction {r.mae:.2f} ({ratio_clean:.1f}x), "
                   f"PSNR {r.psnr_mean:.2f} dB, SSIM {r.ssim_mean:.3f}; "
                   f"{desk['generator_epochs']} generator epochs; pipeline {desk['seconds'] / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6_transfer(verdict, desk_eval):
    reps, mat = desk_eval
    cross = {}
    for s, t in ((DENSITY, POINT), (POINT, DENSITY)):
        r = reps[(s, t)]
        cross[(s, t)] = (r.adv_mae_gt / r.clean_mae, r.mae / r.clean_mae)
    trs = {k: v for k, v in mat.tr.items()}
    ok = all(a >= 2 and b >= 2 for a, b in cross.values()) and all(v is not None and v > 0.55 for v in trs.values())
    cells = "; ".join(f"{s}->{t}: {a:.1f}x/{b:.1f}x" for (s, t), (a, b) in cross.items())
    tr_txt = ", ".join(f"{s}->{t} {v:.2f}" for (s, t), v in trs.items())
    verdict(6, ok, f"cross-paradigm degradation (vs GT / vs clean) {cells}; TR {tr_txt}")


# -- 7: descent direction ----------------------------------------------------------------

def _blob_map(rng, size=16):
    yy, xx = np.mgrid[0:size, 0:size]
    d = np.zeros((size, size))
    for _ in range(rng.integers(1, 8)):
        cx, cy, s = rng.uniform(0, size), rng.uniform(0, size), rng.uniform(0.6, 2.0)
        d += rng.uniform(0.2, 1.0) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return d + rng.uniform(0, 0.02, d.shape)


def test_criterion_7_descent(verdict):
    rng = np.random.default_rng(99)
    lr = 1e-2
    fails = {"dense": 0, "sparse": 0, "dmap": 0}
    branches = {"peak": 0, "hmap": 0}
    for trial in range(100):
        tau = float(rng.uniform(0.3, 0.5))
        logits = torch.from_numpy(rng.normal(0.5, 2.0, 64)).requires_grad_(True)
        pts = _points(logits)
        hi = high_confidence_set(pts, tau)
        if hi.numel() == 0:
            logits.data[0] = 3.0
            pts = _points(logits)
            hi = high_confidence_set(pts, tau)
        (g,) = torch.autograd.grad(logit_suppression(pts, 300, tau, W), logits)
        s_new = torch.sigmoid(logits.detach() - lr * g)
        fails["dense"] += not bool((s_new[hi] < pts.scores.detach()[hi]).all())

        (g,) = torch.autograd.grad(logit_suppression(_points(logits), 40, tau, W), logits)

        def sparse_sum(z):  # sum of w_i * l_i over the pre-step high-confidence set
            return float(((torch.sigmoid(z[hi]) - tau).abs() * z[hi]).sum())

        fails["sparse"] += not (sparse_sum(logits.detach() - lr * g) < sparse_sum(logits.detach()))

        d = torch.from_numpy(_blob_map(rng)).requires_grad_(True)
        res = density_suppression(d, W)
        branches[res.branch.split("+")[0]] += 1
        (g,) = torch.autograd.grad(res.value, d)
        q = res.peaks.significant
        fails["dmap"] += not (float((d.detach() - lr * g)[q].mean()) < float(d.detach()[q].mean()))
    ok = not any(fails.values())
    verdict(7, ok, f"100 trials each; failures {fails}; density branches used {branches}")


# -- 8: reproducibility -------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_reproducibility(verdict, tmp_path):
    import yaml
    cfg = {"data": {"root": str(tmp_path / "data"), "num_train": 12, "num_test": 2, "height": 64, "width": 64,
                    "min_count": 5, "max_count": 30},
           "surrogate": {"epochs": 1, "batch_size": 4},
           "generator": {"widths": [8, 16, 16]},
           "train": {"epochs": 3, "lr": 1e-3, "checkpoint_every": 1}}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    c = ["--config", str(path)]
    assert main(["gen-data", *c, "--out", str(tmp_path / "data")]) == 0
    assert main(["train-surrogate", *c, "--out", str(tmp_path / "sur")]) == 0
    s = ["--surrogate", str(tmp_path / "sur" / "surrogate.pt")]
    for run in ("a", "b"):
        assert main(["train-generator", *c, *s, "--out", str(tmp_path / run)]) == 0
    assert main(["train-generator", *c, *s, "--out", str(tmp_path / "r"), "--stop-after", "1"]) == 0
    assert not (tmp_path / "r" / "generator.pt").exists()
    assert main(["train-generator", *c, *s, "--out", str(tmp_path / "r"),
                 "--resume", str(tmp_path / "r" / "last.pt")]) == 0
    names = ["last.pt", "best.pt", "epoch_0001.pt", "epoch_0002.pt", "epoch_0003.pt", "generator.pt",
             "train_log.jsonl"]
    same_ab = all(sha256_file(tmp_path / "a" / n) == sha256_file(tmp_path / "b" / n) for n in names)
    same_resume = all(sha256_file(tmp_path / "a" / n) == sha256_file(tmp_path / "r" / n) for n in names)
    ok = same_ab and same_resume
    verdict(8, ok, f"identical-config runs bit-identical: {same_ab}; "
                   f"stop-after-1 + resume matches uninterrupted: {same_resume} ({len(names)} files)")
