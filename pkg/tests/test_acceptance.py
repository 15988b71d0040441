"""End-to-end criteria on the desk artifacts.

Each test appends one PASS/FAIL line (printed in the terminal summary) and
then asserts the criterion. The desk build is cached under
``$DIFFENDER_DESK`` (default ``~/.cache/diffender``); the first run trains
every model.
"""

import time

import numpy as np
import pytest
import torch

from conftest import ToyNet, fd_check
from diffender import bench
from diffender.attacker import AttackSpec
from diffender.bench import ExperimentConfig, baseline_purify, cached_attack, evaluate_defense, file_digest, metrics_equal
from diffender.data_io import load_checkpoint, load_dataset
from diffender.desk import build_desk
from diffender.diffusion import (
    NoiseSource,
    derive_seed,
    empty_prompt,
    forward_diffuse,
    make_schedule,
    model_from_checkpoint,
    predict_x0_one_step,
    sample,
)
from diffender.localizer import LocalizerConfig, aap_difference, binarize, dilate, iou, localize, refine_mask, smooth
from diffender.losses import (
    dice_loss,
    local_uniformity,
    loss_ce,
    loss_l1,
    loss_tnc,
    perceptual_distance,
    sobel_magnitude,
    ssim,
)
from diffender.restorer import DefenseConfig, DiffenderDefense, restore
from diffender.tuner import IDC_TEMPLATES, idc_from_checkpoint, prompts_from_checkpoint, template_tokens
from diffender.victims import Classifier, classifier_from_checkpoint, to_tensor
from test_losses import brute_force_perceptual, brute_local_uniformity

pytestmark = pytest.mark.acceptance

N_EVAL = 128
N_LOC = 64
RESULTS: list[str] = []


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)


def best_of(n: int, fn) -> float:
    fn()
    times = []
    for _ in range(n):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def psnr(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    mse = (a - b).pow(2).flatten(1).mean(1).clamp_min(1e-12)
    return 10 * torch.log10(1 / mse)


# --------------------------------------------------------------------------
# shared state


@pytest.fixture(scope="module")
def desk():
    return build_desk()


@pytest.fixture(scope="module")
def diffusion(desk):
    return model_from_checkpoint(load_checkpoint(desk.diffusion))


@pytest.fixture(scope="module")
def prompts(desk):
    return prompts_from_checkpoint(load_checkpoint(desk.prompts))


_REPORTS: dict = {}


def base_cfg(desk, **kw) -> dict:
    d = dict(
        eval_data=str(desk.eval), classifier=str(desk.classifier), diffusion=str(desk.diffusion),
        prompts=str(desk.prompts), cache_dir=str(desk.root / "cache"), num_eval_images=N_EVAL,
    )  # fmt: skip
    d.update(kw)
    return d


def run(desk, defense: str, kind: str = "advp", **kw):
    key = (defense, kind, tuple(sorted(kw.items())))
    if key not in _REPORTS:
        cfg = ExperimentConfig(**base_cfg(desk, **kw), name=f"{defense}__{kind}", defense=defense, attack=AttackSpec(kind))
        _REPORTS[key] = evaluate_defense(cfg)
    return _REPORTS[key]


def attacked(desk, n: int):
    """First ``n`` correctly classified eval images and their cached AdvP attacks."""
    cfg = ExperimentConfig(**base_cfg(desk, num_eval_images=n), attack=AttackSpec("advp"))
    _, x_all, y_all, digest = bench._load_eval(desk.eval)
    clf = classifier_from_checkpoint(load_checkpoint(desk.classifier))
    with torch.no_grad():
        keep = (clf(x_all).argmax(1) == y_all).nonzero().flatten()[:n]
    adv, _ = cached_attack(cfg, x_all[keep], y_all[keep], keep.tolist(), clf, file_digest(desk.classifier), digest)
    return x_all[keep], adv, [derive_seed(0, 77, int(i)) for i in keep]


# --------------------------------------------------------------------------
# 1-2: numerical core and morphology


def test_01_numerical_core():
    t0 = time.perf_counter()
    r = lambda *s, seed=0: torch.rand(*s, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)  # noqa: E731
    torch.manual_seed(0)
    clf = Classifier(width=4).double().eval()
    m = (r(2, 8, 8, seed=1) > 0.5).double()
    ref = r(1, 1, 12, 12, seed=2)
    errs = {
        "ce": fd_check(lambda p: loss_ce(m, p), 0.05 + 0.9 * r(2, 8, 8, seed=3)),
        "l1": fd_check(lambda x: loss_l1(x, ref), r(1, 1, 12, 12, seed=4)),
        "perceptual": fd_check(lambda a: perceptual_distance(a, r(1, 3, 32, 32, seed=5), clf), r(1, 3, 32, 32, seed=6)),
        "uniformity": fd_check(lambda x: local_uniformity(x), r(1, 1, 12, 12, seed=7)),
        "ssim": fd_check(lambda x: ssim(ref, x), r(1, 1, 12, 12, seed=8)),
        "tnc": fd_check(lambda x: loss_tnc(ref, x), r(1, 1, 12, 12, seed=9)),
        "dice": fd_check(lambda b: dice_loss(m, b), r(2, 8, 8, seed=10)),
    }
    # the edge loss is straight-through: its gradient is that of the soft edge surrogate
    x_ie = r(1, 1, 12, 12, seed=11)
    peak = float(sobel_magnitude(x_ie).amax())
    soft_edges = lambda x: torch.sigmoid((sobel_magnitude(x) / peak - 0.2) / 0.05)  # noqa: E731
    hard_ref = (sobel_magnitude(ref) > 0.2 * sobel_magnitude(ref).amax()).double()
    errs["ie_surrogate"] = fd_check(lambda x: 0.7 * dice_loss(hard_ref, soft_edges(x)) + 0.3 * dice_loss(1 - hard_ref, 1 - soft_edges(x)), x_ie)
    img = r(1, 1, 16, 16, seed=12)
    a = r(2, 3, 32, 32, seed=13)
    sched_check = []
    s = make_schedule(250)
    for t in (0, 124, 249):
        x0, eps = r(2, 3, 8, 8, seed=t), torch.randn(2, 3, 8, 8, generator=torch.Generator().manual_seed(t), dtype=torch.float64)
        rec = predict_x0_one_step(forward_diffuse(x0, t, eps, s), t, torch.zeros(16, 8, dtype=torch.float64), lambda *_: eps, s)
        sched_check.append(float((rec - x0).abs().max()))
    with torch.no_grad():
        checks = {
            "ssim_self": abs(float(ssim(img, img)) - 1) <= 1e-6,
            "dice_self": float(dice_loss(m, m)) <= 1e-5,
            "uniform_const": float(local_uniformity(torch.full((1, 1, 8, 8), 0.3, dtype=torch.float64))) == 0.0,
            "perceptual_self": float(perceptual_distance(a, a, clf)) == 0.0,
            "inversion": max(sched_check) <= 1e-5,
        }
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst <= 1e-3 and all(checks.values()) and secs <= 120
    record(1, ok, f"max fd rel err {worst:.2e} ({max(errs, key=errs.get)}), identities {all(checks.values())}, {secs:.1f}s")
    assert ok, (errs, checks)


def test_02_morphology():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    d = torch.rand(1000, 12, 12, generator=g)
    monotone = bool((binarize(d, 0.7) <= binarize(d, 0.3)).all())
    masks = (torch.rand(1000, 16, 16, generator=g) > 0.6).float()
    cfg = LocalizerConfig()
    kept = (smooth(masks, cfg.gauss_size, cfg.gauss_sigma) >= 0.5).float()
    superset = bool((refine_mask(masks, cfg) >= kept).all())
    rng = np.random.default_rng(0)
    img = rng.random((7, 6))
    err_u = abs(float(local_uniformity(torch.from_numpy(img)[None, None], 3)) - brute_local_uniformity(img, 3))
    net = ToyNet().double()
    a = torch.from_numpy(rng.random((2, 2, 4, 4)))
    b = torch.from_numpy(rng.random((2, 2, 4, 4)))
    with torch.no_grad():
        err_p = abs(float(perceptual_distance(a, b, net)) - brute_force_perceptual(a, b, net))
    secs = time.perf_counter() - t0
    ok = monotone and superset and err_u <= 1e-8 and err_p <= 1e-8 and secs <= 60
    record(2, ok, f"monotone {monotone}, superset {superset}, oracle errs {err_u:.1e}/{err_p:.1e}, {secs:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 3: diffusion sanity


def test_03_diffusion_sanity(desk, diffusion):
    t0 = time.perf_counter()
    model, sched = diffusion
    x = to_tensor(load_dataset(desk.eval).images)
    t = sched.step_at(0.5)
    eps = NoiseSource.for_batch(0, len(x)).randn(x.shape[1:], x.dtype)
    with torch.no_grad():
        x0 = predict_x0_one_step(forward_diffuse(x, t, eps, sched), t, empty_prompt(model), model, sched).clamp(0, 1)
    p = float(psnr(x0, x).mean())
    samples = sample(empty_prompt(model), 50, model, sched, seed=0, batch=64)
    data_mean = to_tensor(load_dataset(desk.train).images).mean((0, 2, 3))
    gap = float((samples.mean((0, 2, 3)) - data_mean).abs().max())
    train_s = float(load_checkpoint(desk.diffusion).metadata.get("seconds", "nan"))
    secs = train_s + time.perf_counter() - t0
    ok = p >= 15 and gap <= 0.15 and secs <= 1800
    record(3, ok, f"one-step PSNR {p:.2f} dB (>=15), channel-mean gap {gap:.3f} (<=0.15), {secs / 60:.1f} min incl. training")
    assert ok


# --------------------------------------------------------------------------
# 4: localization of AdvP patches


@pytest.fixture(scope="module")
def loc_maps(desk, diffusion, prompts):
    model, sched = diffusion
    _, adv, seeds = attacked(desk, N_LOC)
    cfg = prompts.localizer_config()
    diff = aap_difference(adv.x_adv, prompts.left(), cfg, model, sched, seeds)
    mask, _ = localize(adv.x_adv, prompts.left(), cfg, model, sched, seeds)
    return adv, diff, mask, seeds


def test_04_aap_localization(loc_maps):
    adv, diff, mask, _ = loc_maps
    m_iou = float(iou(mask, adv.gt_mask).mean())
    gt = adv.gt_mask > 0
    ratio = float(diff[gt].mean() / diff[~gt].mean())
    ok = m_iou >= 0.35 and ratio >= 2.0
    record(4, ok, f"mean IoU {m_iou:.3f} (>=0.35), in/out diff ratio {ratio:.2f} (>=2) over {len(gt)} images")
    assert ok


# --------------------------------------------------------------------------
# 5-7: defense effectiveness, adaptive attack, baselines


def test_05_defense_effectiveness(desk):
    none, d = run(desk, "none"), run(desk, "diffender")
    ok = d.robust_acc >= none.robust_acc + 0.40 and d.clean_acc >= none.clean_acc - 0.10
    record(5, ok, f"robust {none.robust_acc:.3f} -> {d.robust_acc:.3f} (+0.40 needed), clean {none.clean_acc:.3f} -> {d.clean_acc:.3f} (-0.10 allowed)")
    assert ok


def test_06_adaptive_robustness(desk):
    none, d, ad = run(desk, "none"), run(desk, "diffender"), run(desk, "diffender", "bpda_advp")
    ok = ad.robust_acc >= 0.5 * d.robust_acc and ad.robust_acc > none.robust_acc
    record(6, ok, f"adaptive robust {ad.robust_acc:.3f} vs non-adaptive {d.robust_acc:.3f} (>=50%), undefended {none.robust_acc:.3f}")
    assert ok


def test_07_baseline_ordering(desk):
    ours = run(desk, "diffender", "bpda_advp").robust_acc
    others = {name: run(desk, name, "bpda_advp").robust_acc for name in ("jpeg", "smoothing", "purify")}
    ok = all(ours >= v for v in others.values())
    record(7, ok, f"adaptive robust: diffender {ours:.3f}, " + ", ".join(f"{k} {v:.3f}" for k, v in others.items()))
    assert ok


# --------------------------------------------------------------------------
# 8: purification trade-off


def test_08_purify_tradeoff(desk, diffusion):
    model, sched = diffusion
    x, adv, seeds = attacked(desk, N_LOC)
    gt = adv.gt_mask[:, None].expand_as(x) > 0
    ratios = {}
    for t in (0.15, 0.5):
        out = baseline_purify(adv.x_adv, t, model, sched, 20, seeds)
        d = (out - x).abs()
        ratios[t] = (float(d[gt].mean()), float(d[~gt].mean()))
    clean = {t: float(psnr(baseline_purify(x, t, model, sched, 20, seeds), x).mean()) for t in (0.15, 0.9)}
    ok = all(i > o for i, o in ratios.values()) and clean[0.9] < clean[0.15]
    detail = ", ".join(f"t*={t}: in {i:.3f} / out {o:.3f}" for t, (i, o) in ratios.items())
    record(8, ok, f"{detail}; clean PSNR t*=0.9 {clean[0.9]:.2f} < t*=0.15 {clean[0.15]:.2f}")
    assert ok


# --------------------------------------------------------------------------
# 9: prompt tuning


def test_09_prompt_tuning(desk, diffusion, prompts, loc_maps):
    model, sched = diffusion
    adv, _, mask, seeds = loc_maps
    drop = 1 - prompts.final_loss / prompts.initial_loss
    cfg = prompts.localizer_config()
    empty_mask, _ = localize(adv.x_adv, torch.zeros_like(prompts.left()), cfg, model, sched, seeds)
    tuned_iou, empty_iou = float(iou(mask, adv.gt_mask).mean()), float(iou(empty_mask, adv.gt_mask).mean())
    loc = {"localizer": cfg}
    tuned, empty = run(desk, "diffender"), run(desk, "diffender", prompt_mode="empty", **loc)
    ok = drop >= 0.20 and tuned_iou > empty_iou and tuned.robust_acc > empty.robust_acc
    record(9, ok, f"L_PT {prompts.initial_loss:.3f} -> {prompts.final_loss:.3f} ({drop:.0%}, >=20%), IoU {tuned_iou:.3f} vs empty {empty_iou:.3f}, robust {tuned.robust_acc:.3f} vs empty {empty.robust_acc:.3f}")
    assert ok


# --------------------------------------------------------------------------
# 10: infrared extension


def test_10_infrared(desk, diffusion):
    model, sched = diffusion
    ir = dict(eval_data=str(desk.ir_eval), classifier=str(desk.classifier_ir))
    none = run(desk, "none", "ir_cold", **ir)
    asr = {v: run(desk, "diffender", "ir_cold", **ir, prompts=str(desk.ir_prompts(v))).asr for v in ("full", "no_idc", "no_losses")}
    idc = idc_from_checkpoint(load_checkpoint(desk.idc))
    tok = template_tokens(model, IDC_TEMPLATES[0], idc)
    energy = {}
    for name, p in (("idc", tok), ("empty", empty_prompt(model))):
        energy[name] = float(sobel_magnitude(sample(p, 50, model, sched, seed=3, batch=64)).mean())
    ok = (
        none.asr >= 0.70
        and asr["full"] <= none.asr / 2
        and asr["no_idc"] >= asr["full"] + 0.05
        and asr["no_losses"] >= asr["full"] + 0.05
        and energy["idc"] < energy["empty"]
    )
    record(10, ok, f"ASR undefended {none.asr:.3f} (>=0.70), full {asr['full']:.3f}, no IDC {asr['no_idc']:.3f}, no TNC/IE {asr['no_losses']:.3f}; Sobel energy IDC {energy['idc']:.4f} vs empty {energy['empty']:.4f}")
    assert ok


# --------------------------------------------------------------------------
# 11: efficiency


def test_11_efficiency(desk, diffusion, prompts):
    model, sched = diffusion
    x = to_tensor(load_dataset(desk.eval).images)
    loc = prompts.localizer_config()
    defense = DiffenderDefense(prompts.pair(), DefenseConfig(loc, restore_steps=250), model, sched)
    seeds = [derive_seed(0, 78, i) for i in range(len(x))]
    t0 = time.perf_counter()
    out = defense.run(x, seeds)
    per_defend = (time.perf_counter() - t0) / len(x)
    tokens = prompts.left()[None].expand(len(x), -1, -1)
    t_idx = torch.full((len(x),), sched.step_at(loc.t_star))
    # both sides timed warm, best of 3, so scheduler noise on a shared core cancels
    per_loc = best_of(3, lambda: localize(x, prompts.left(), loc, model, sched, seeds)) / len(x)
    with torch.no_grad():
        per_step = best_of(3, lambda: model(x, t_idx, tokens)) / len(x)
    k = 8
    mask = torch.zeros(k, *x.shape[2:])
    mask[:, 10:17, 10:17] = 1
    t0 = time.perf_counter()
    restore(x[:k], mask, prompts.right(), model, sched, 250, seeds[:k])
    per_restore = (time.perf_counter() - t0) / k
    # m prompt+empty one-step pairs, plus 50% for normalization, refinement and gating
    budget = 2 * loc.m * per_step * 1.5
    speedup = per_restore / per_defend
    # clean vs attacked cost: attacked images always pay the restoration
    ratio = per_defend / (per_loc + per_restore)
    ratio_cap = (loc.m + 1) / (loc.m + 250) + 0.1
    ok = per_loc <= budget and speedup >= 5 and ratio <= ratio_cap
    record(11, ok, f"localize {per_loc * 1e3:.2f} ms/img (budget {budget * 1e3:.2f}), defend {per_defend * 1e3:.1f} ms/img, restore@250 {per_restore * 1e3:.0f} ms/img, {speedup:.1f}x cheaper (>=5x), clean/attacked cost {ratio:.3f} (<={ratio_cap:.3f}), gated {int(out.gated.sum())}/{len(x)}")
    assert ok


def test_11b_second_pass_shrinks(desk, diffusion, prompts, loc_maps):
    model, sched = diffusion
    adv, _, _, seeds = loc_maps
    loc = prompts.localizer_config()
    defense = DiffenderDefense(prompts.pair(), DefenseConfig(loc, restore_steps=50), model, sched)
    first = defense.run(adv.x_adv, seeds)
    second = defense.run(first.restored, [derive_seed(s, 5) for s in seeds])
    # one dilation margin on each side of the first mask
    grown = dilate(first.mask, 2 * loc.dilate_radius)
    frac = float((second.mask.flatten(1).mean(1) <= grown.flatten(1).mean(1)).double().mean())
    ok = frac >= 0.9
    record(11, ok, f"(restorer property) second-pass area within first mask + 2 dilation margins for {frac:.0%} of attacked images (>=90%)")
    assert ok


# --------------------------------------------------------------------------
# 12: reproducibility


def test_12_reproducibility(desk, tmp_path):
    reports = []
    for i in range(2):
        cfg = ExperimentConfig(**base_cfg(desk, num_eval_images=16, cache_dir=str(tmp_path / f"c{i}")), name="repro", defense="diffender")
        bench._ARTIFACTS.clear()
        reports.append(evaluate_defense(cfg))
    ok = metrics_equal(*reports)
    record(12, ok, f"two fresh runs (no shared cache): identical metrics and per-image rows = {ok}")
    assert ok
