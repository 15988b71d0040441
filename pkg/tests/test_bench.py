import copy
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffender.attacker import AttackSpec
from diffender.bench import (
    ConfigError,
    ExperimentConfig,
    MissingArtifactError,
    baseline_jpeg,
    baseline_purify,
    baseline_smoothing,
    evaluate_defense,
    load_suite_config,
    median_smoothing_torch,
    metrics_equal,
    run_experiment_suite,
    summary_table,
)
from diffender.data_io import REPORT_COLUMNS, save_checkpoint
from diffender.diffusion import CrossAttention, model_to_checkpoint


def psnr(a, b):
    mse = float(((a - b) ** 2).mean())
    return 10 * math.log10(1 / mse) if mse else math.inf


def smooth_batch(n=2, c=3):
    yy, xx = torch.meshgrid(torch.linspace(0, 1, 32), torch.linspace(0, 1, 32), indexing="ij")
    base = 0.2 + 0.5 * xx * yy
    return base.expand(n, c, 32, 32).clone()


# --------------------------------------------------------------------------
# baselines


def test_jpeg_high_quality_is_near_lossless():
    x = smooth_batch()
    assert psnr(baseline_jpeg(x, 100), x) >= 40
    assert baseline_jpeg(x[0], 90).shape == (3, 32, 32)
    assert baseline_jpeg(smooth_batch(1, 1), 90).shape == (1, 1, 32, 32)


def test_jpeg_quality_orders_distortion():
    x = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    assert psnr(baseline_jpeg(x, 10), x) < psnr(baseline_jpeg(x, 90), x)


@pytest.mark.parametrize("q", [0, 101])
def test_jpeg_quality_range(q):
    with pytest.raises(ValueError):
        baseline_jpeg(smooth_batch(), q)


def test_smoothing_removes_salt_and_keeps_constant():
    c = torch.full((1, 3, 16, 16), 0.4)
    assert torch.equal(baseline_smoothing(c), c)
    s = c.clone()
    s[0, :, 8, 8] = 1.0
    assert torch.equal(baseline_smoothing(s), c)


@pytest.mark.parametrize("w", [0, 2, 4])
def test_smoothing_window_must_be_odd(w):
    with pytest.raises(ValueError):
        baseline_smoothing(smooth_batch(), w)


def test_purify_at_zero_noise_is_near_identity(tiny_model):
    model, sched = tiny_model
    x = smooth_batch()
    out = baseline_purify(x, 0.0, model, sched, 1, 0)
    assert out.shape == x.shape
    # at the first step the residual noise is tiny, so the untrained predictor barely moves pixels
    assert (out - x).abs().max() < 0.05
    assert torch.equal(out, baseline_purify(x, 0.0, model, sched, 1, 0))


# --------------------------------------------------------------------------
# configuration


def test_experiment_config_contract():
    with pytest.raises(ConfigError):
        ExperimentConfig(defense="magic")
    with pytest.raises(ConfigError):
        ExperimentConfig(prompt_mode="random")
    with pytest.raises(ConfigError):
        ExperimentConfig(num_eval_images=0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"attack": {"kind": "gdpa"}})
    c = ExperimentConfig.from_dict({"attack": {"kind": "lavan"}, "localizer": {"m": 2}})
    assert c.attack.kind == "lavan" and c.localizer.m == 2
    assert ExperimentConfig.from_dict(c.to_dict()) == c
    assert c.config_hash() == ExperimentConfig.from_dict(c.to_dict()).config_hash()


def test_missing_artifact_is_reported():
    with pytest.raises(MissingArtifactError):
        evaluate_defense(ExperimentConfig(eval_data="/nonexistent/data"))


def test_suite_config_validation(tmp_path):
    p = tmp_path / "s.json"
    for bad in ({"defenses": ["magic"]}, {"unknown": 1}, {"base": {"defense": "none"}},
                {"expect": [{"defense": "none", "attack": "advp", "metric": "speed"}]}):  # fmt: skip
        p.write_text(json.dumps(bad))
        with pytest.raises(ConfigError):
            load_suite_config(p)
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_suite_config(p)
    with pytest.raises(MissingArtifactError):
        load_suite_config(tmp_path / "none.json")


def test_empty_suite_writes_header_only(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"name": "empty", "out_dir": str(tmp_path / "out"), "defenses": [], "attacks": []}))
    res = run_experiment_suite(p)
    assert res.reports == [] and res.regressions == []
    assert res.combined_csv.read_text() == ",".join(REPORT_COLUMNS) + "\n"
    assert summary_table([]).split() == list(REPORT_COLUMNS)


# --------------------------------------------------------------------------
# evaluation on tiny artifacts


def test_undefended_robust_is_one_minus_asr(artifacts):
    _, base = artifacts
    r = evaluate_defense(ExperimentConfig(**base, defense="none", name="none"))
    assert r.clean_acc == 1.0
    assert r.robust_acc == pytest.approx(1 - r.asr)
    assert r.robust_acc == pytest.approx(1 - np.mean([row["attack_success"] for row in r.rows]))
    assert math.isnan(r.mean_iou) and len(r.rows) == 4


def test_attack_cache_is_reused_across_defenses(artifacts, tmp_path):
    _, base = artifacts
    base = dict(base, cache_dir=str(tmp_path))
    first = evaluate_defense(ExperimentConfig(**base, defense="none", name="a"))
    assert not any(row["cached"] for row in first.rows)
    files = sorted((tmp_path / "attacks").rglob("*.npz"))
    assert len(files) == 4
    r = evaluate_defense(ExperimentConfig(**base, defense="jpeg", name="b"))
    assert all(row["cached"] for row in r.rows)
    assert sorted((tmp_path / "attacks").rglob("*.npz")) == files


def test_prompt_blind_defense_equals_undefended(artifacts, tmp_path, tiny_model):
    _, base = artifacts
    model, sched = tiny_model
    blind = copy.deepcopy(model)
    # zero value projections make cross-attention add nothing, whatever the prompt
    for m in blind.modules():
        if isinstance(m, CrossAttention):
            m.v.weight.data.zero_()
    save_checkpoint(model_to_checkpoint(blind, sched), tmp_path / "blind.ckpt")
    cfg = dict(base, diffusion=str(tmp_path / "blind.ckpt"))
    none = evaluate_defense(ExperimentConfig(**cfg, defense="none"))
    got = evaluate_defense(ExperimentConfig(**cfg, defense="diffender"))
    assert (got.clean_acc, got.robust_acc, got.asr) == (none.clean_acc, none.robust_acc, none.asr)
    assert not any(row["gated_adv"] or row["gated_clean"] for row in got.rows)


def test_rerun_is_bit_identical(artifacts):
    _, base = artifacts
    cfg = ExperimentConfig(**base, defense="diffender", name="d")
    a, b = evaluate_defense(cfg), evaluate_defense(cfg)
    assert metrics_equal(a, b)
    assert 0 <= a.mean_iou <= 1


def test_suite_grid_and_regressions(artifacts, tmp_path):
    _, base = artifacts
    base = {k: v for k, v in base.items() if k != "attack"}
    suite = {
        "name": "grid", "out_dir": str(tmp_path / "out"),
        "defenses": ["none", "jpeg", "smoothing"], "attacks": [{"kind": "advp", "iterations": 30}],
        "base": base, "expect": [{"defense": "none", "attack": "advp", "metric": "clean_acc", "min": 1.01}],
    }  # fmt: skip
    p = tmp_path / "s.json"
    p.write_text(json.dumps(suite))
    res = run_experiment_suite(p)
    assert len(res.reports) == 3
    assert len(res.combined_csv.read_text().splitlines()) == 4
    assert len(res.regressions) == 1
    assert sorted(f.name for f in (tmp_path / "out").glob("*.json")) == [
        "jpeg__advp.json", "none__advp.json", "smoothing__advp.json"]  # fmt: skip


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 3, 5]), st.integers(3, 9), st.integers(3, 9))
def test_torch_median_matches_scipy(seed, w, h, wd):
    x = torch.rand(2, 3, h, wd, generator=torch.Generator().manual_seed(seed))
    assert torch.equal(median_smoothing_torch(x, w), baseline_smoothing(x, w))


def test_torch_median_gradient_selects_pixels():
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    median_smoothing_torch(x, 3).sum().backward()
    # each output picks one input pixel
    assert x.grad.sum().item() == 64 and bool((x.grad >= 0).all())
