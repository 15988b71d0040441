import hashlib

import numpy as np
import pytest
import torch

from diffender.data_io import load_checkpoint, save_checkpoint
from diffender.diffusion import caption_tokens
from diffender.localizer import LocalizerConfig
from diffender.tuner import (
    IDC_TEMPLATES,
    SLOT,
    LearnablePrompts,
    TuneConfig,
    calibrate_floor,
    idc_from_checkpoint,
    idc_to_checkpoint,
    init_prompts,
    learn_idc_token,
    prompts_from_checkpoint,
    prompts_to_checkpoint,
    stack_fewshot,
    template_tokens,
    tune_prompts,
    write_history,
)
from diffender.victims import Classifier


def checksum(module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().numpy().tobytes())
    return h.hexdigest()


def fewshot(n=2, seed=0, channels=3):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, channels, 32, 32, generator=g) * 0.3 + 0.35
    gt = torch.zeros(n, 32, 32)
    gt[:, 5:12, 9:16] = 1
    x_adv = torch.where(gt[:, None] > 0, torch.rand(n, channels, 32, 32, generator=g), x)
    return x, x_adv, gt


@pytest.fixture(scope="module")
def clf():
    torch.manual_seed(0)
    c = Classifier(width=4).eval()
    for p in c.parameters():
        p.requires_grad_(False)
    return c


def small_cfg(**kw):
    base = dict(steps=3, shots=2, unroll=2, learn_rate=0.05)
    base.update(kw)
    return TuneConfig(**base)


def test_config_defaults_and_contract():
    c = TuneConfig()
    assert (c.alpha, c.beta, c.gamma, c.delta) == (0.4, 0.6, 0.7, 0.3)
    assert c.shots == 8 and c.steps == 200 and c.learn_rate == 1e-2 and c.unroll == 5 and c.k == 3
    assert not c.tnc and TuneConfig(infrared=True).tnc and TuneConfig(infrared=True).ie
    assert not TuneConfig(infrared=True, use_tnc=False).tnc
    for kw in (dict(steps=-1), dict(unroll=0), dict(shots=0)):
        with pytest.raises(ValueError):
            TuneConfig(**kw)


def test_init_prompts_shapes():
    p = init_prompts()
    assert p.V_L.shape == (16, 128) and p.V_R.shape == (16, 128) and p.idc is None
    idc = torch.ones(1, 128)
    q = init_prompts(idc=idc)
    assert q.left().shape == (17, 128) and torch.equal(q.left()[-1], idc[0])


def test_stack_fewshot_forms():
    x, xa, gt = fewshot(3)
    a = stack_fewshot((x, xa, gt))
    b = stack_fewshot([(x[i], xa[i], gt[i]) for i in range(3)])
    assert all(torch.equal(u, v) for u, v in zip(a, b))
    with pytest.raises(ValueError):
        stack_fewshot([])


def test_zero_steps_returns_unchanged(tiny_model, clf):
    model, sched = tiny_model
    p = init_prompts(d=32)
    out = tune_prompts(fewshot(), p, small_cfg(steps=0), model, sched, clf)
    assert torch.equal(out.V_L, p.V_L) and torch.equal(out.V_R, p.V_R)
    assert out.history == []


def test_tuning_touches_only_prompts(tiny_model, clf):
    model, sched = tiny_model
    idc = torch.randn(1, 32)
    p = init_prompts(d=32, idc=idc.clone())
    before = (checksum(model), checksum(clf))
    out = tune_prompts(fewshot(), p, small_cfg(infrared=False), model, sched, clf, LocalizerConfig(m=1, t_star=0.1))
    assert (checksum(model), checksum(clf)) == before
    assert torch.equal(out.idc, idc)
    assert not torch.equal(out.V_L, p.V_L) and not torch.equal(out.V_R, p.V_R)
    assert len(out.history) == 3 and {"total", "ce", "l1", "perceptual"} <= set(out.history[0])
    assert np.isfinite(out.initial_loss) and np.isfinite(out.final_loss)
    assert out.localizer == {"t_star": 0.1}


def test_infrared_tuning_terms(tiny_model, clf):
    model, sched = tiny_model
    gray_clf = Classifier(channels=1, width=4).eval()
    out = tune_prompts(fewshot(channels=1), init_prompts(d=32), small_cfg(steps=1, infrared=True), model, sched, gray_clf)
    assert {"tnc", "ie"} <= set(out.history[0])


def test_calibrate_floor(tiny_model):
    model, sched = tiny_model
    p = init_prompts(d=32)
    p.localizer = {"t_star": 0.2}
    out = calibrate_floor(p, torch.rand(4, 3, 32, 32), model, sched, factor=2.0)
    assert out.localizer["t_star"] == 0.2 and out.localizer["norm_floor"] > 0
    cfg = out.localizer_config()
    assert cfg.t_star == 0.2 and cfg.norm_floor == out.localizer["norm_floor"] and cfg.m == 3
    assert p.localizer == {"t_star": 0.2}


def test_prompt_checkpoint_round_trip(tmp_path):
    p = init_prompts(idc=torch.ones(1, 128))
    p.initial_loss, p.final_loss, p.localizer = 2.0, 1.0, {"t_star": 0.1, "norm_floor": 0.25}
    save_checkpoint(prompts_to_checkpoint(p), tmp_path / "p")
    q = prompts_from_checkpoint(load_checkpoint(tmp_path / "p"))
    assert torch.equal(q.V_L, p.V_L) and torch.equal(q.idc, p.idc)
    assert q.V_L.shape == (16, 128)
    assert (q.initial_loss, q.final_loss, q.localizer) == (2.0, 1.0, p.localizer)


def test_template_tokens_place_slot(tiny_model):
    model, _ = tiny_model
    v = torch.full((1, 32), 3.0)
    tok = template_tokens(model, IDC_TEMPLATES[0], v)
    assert tok.shape == (7, 32)
    assert torch.equal(tok[-1], v[0])
    torch.testing.assert_close(tok[:-1], caption_tokens(model, list(IDC_TEMPLATES[0][:-1]), 6))
    assert all(SLOT in t for t in IDC_TEMPLATES)


def test_idc_zero_steps_is_init_and_shape(tiny_model):
    model, sched = tiny_model
    imgs = torch.rand(3, 1, 32, 32)
    a = learn_idc_token(imgs, model, sched, steps=0, seed=1)
    b = learn_idc_token(imgs, model, sched, steps=0, seed=1)
    assert a.shape == (1, 32) and torch.equal(a, b)
    std = float(model.word_embedding.weight.std())
    assert 0.5 * std < float(a.std()) < 2 * std


def test_idc_training_freezes_model_and_lowers_loss(tiny_model):
    model, sched = tiny_model
    before = checksum(model)
    hist = []
    imgs = torch.full((4, 1, 32, 32), 0.5) + 0.05 * torch.rand(4, 1, 32, 32)
    tok = learn_idc_token(imgs, model, sched, steps=60, seed=0, learn_rate=0.1, history=hist)
    assert checksum(model) == before
    assert tok.shape == (1, 32) and len(hist) == 60
    assert np.mean([h["total"] for h in hist[-10:]]) < np.mean([h["total"] for h in hist[:10]])


def test_idc_errors(tiny_model):
    model, sched = tiny_model
    with pytest.raises(ValueError):
        learn_idc_token(torch.zeros(0, 1, 32, 32), model, sched, 1)
    with pytest.raises(ValueError):
        learn_idc_token(torch.zeros(1, 1, 32, 32), model, sched, 1, templates=[("a", "photo")])


def test_idc_checkpoint_and_history(tmp_path):
    tok = torch.randn(1, 128)
    save_checkpoint(idc_to_checkpoint(tok), tmp_path / "i")
    assert torch.equal(idc_from_checkpoint(load_checkpoint(tmp_path / "i")), tok)
    write_history([{"step": 0, "total": 1.5, "ce": 1.0}, {"step": 1, "total": 1.0, "ce": 0.5}], tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "step,ce,total" and len(lines) == 3 and lines[1] == "0,1.000000,1.500000"
