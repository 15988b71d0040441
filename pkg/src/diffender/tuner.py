"""Few-shot prompt tuning and infrared domain-token learning.

Only the prompt vectors (and, for textual inversion, the single domain
token) are optimized. The diffusion model, the victim classifier and an
attached domain token are left untouched.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data_io import Checkpoint
from .diffusion import NoiseSchedule, NoiseSource, derive_seed, diffusion_loss, lift_channels
from .localizer import LocalizerConfig, aap_difference, localize_soft
from .losses import loss_ce, loss_ie, loss_l1, loss_tnc, perceptual_distance
from .restorer import restore_soft

log = logging.getLogger(__name__)

SLOT = "*"
IDC_TEMPLATES = (
    ("a", "rendering", "in", "the", "style", "of", SLOT),
    ("a", "picture", "in", "the", "style", "of", SLOT),
    ("a", "photo", "in", "the", "style", "of", SLOT),
)


@dataclass
class LearnablePrompts:
    """Localization and restoration prompts, each (n, d).

    With ``idc`` set (shape (1, d)) it is appended to both prompts.
    """

    V_L: torch.Tensor
    V_R: torch.Tensor
    idc: torch.Tensor | None = None
    history: list[dict] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    # localizer settings the prompts were tuned and calibrated for
    localizer: dict = field(default_factory=dict)

    def _with_idc(self, v: torch.Tensor) -> torch.Tensor:
        if self.idc is None:
            return v
        return torch.cat([v, self.idc.detach().to(v.dtype)])

    def left(self) -> torch.Tensor:
        return self._with_idc(self.V_L)

    def right(self) -> torch.Tensor:
        return self._with_idc(self.V_R)

    def pair(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.left(), self.right()

    def detached(self) -> "LearnablePrompts":
        idc = None if self.idc is None else self.idc.detach().clone()
        return replace(
            self, V_L=self.V_L.detach().clone(), V_R=self.V_R.detach().clone(), idc=idc,
            history=list(self.history), localizer=dict(self.localizer),
        )  # fmt: skip

    def localizer_config(self, base: LocalizerConfig | None = None) -> LocalizerConfig:
        """``base`` (default settings when None) with the stored overrides applied."""
        return replace(base or LocalizerConfig(), **self.localizer)


def init_prompts(n: int = 16, d: int = 128, seed: int = 0, std: float = 1.0, idc=None) -> LearnablePrompts:
    g = torch.Generator().manual_seed(derive_seed(seed, 71))
    V_L = torch.randn(n, d, generator=g) * std
    V_R = torch.randn(n, d, generator=g) * std
    return LearnablePrompts(V_L, V_R, idc)


@dataclass(frozen=True)
class TuneConfig:
    steps: int = 200
    learn_rate: float = 1e-2
    shots: int = 8
    unroll: int = 5
    alpha: float = 0.4
    beta: float = 0.6
    gamma: float = 0.7
    delta: float = 0.3
    k: int = 3
    infrared: bool = False
    use_ce: bool = True
    use_l1: bool = True
    use_perceptual: bool = True
    use_tnc: bool | None = None  # None: on for infrared
    use_ie: bool | None = None
    clean_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.unroll < 1:
            raise ValueError("unroll must be >= 1")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")

    @property
    def tnc(self) -> bool:
        return self.infrared if self.use_tnc is None else self.use_tnc

    @property
    def ie(self) -> bool:
        return self.infrared if self.use_ie is None else self.use_ie


def stack_fewshot(fewshot) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Accept a list of (x_clean, x_adv, gt_mask) triples or one batched triple."""
    if isinstance(fewshot, tuple) and len(fewshot) == 3 and torch.is_tensor(fewshot[0]) and fewshot[0].dim() == 4:
        x, x_adv, gt = fewshot
    else:
        items = list(fewshot)
        if not items:
            raise ValueError("few-shot set is empty")
        x = torch.stack([torch.as_tensor(a) for a, _, _ in items])
        x_adv = torch.stack([torch.as_tensor(b) for _, b, _ in items])
        gt = torch.stack([torch.as_tensor(m) for _, _, m in items])
    if gt.dim() == 4:
        gt = gt[:, 0]
    if x.shape != x_adv.shape or gt.shape != (x.shape[0], *x.shape[2:]):
        raise ValueError("few-shot shapes do not agree")
    return x.float(), x_adv.float(), gt.float()


def prompt_loss(
    prompts: LearnablePrompts,
    batch,
    cfg: TuneConfig,
    model,
    sched: NoiseSchedule,
    clf,
    loc_cfg: LocalizerConfig,
    seeds: Sequence[int],
) -> tuple[torch.Tensor, dict[str, float]]:
    """Total tuning objective on one batch and its named terms."""
    x, x_adv, gt = batch
    left, right = prompts.pair()
    loc = localize_soft(x_adv, left, loc_cfg, model, sched, seeds)
    terms: dict[str, torch.Tensor] = {}
    if cfg.use_ce:
        terms["ce"] = loss_ce(gt, loc.raw_soft)
        if cfg.clean_weight:
            clean = localize_soft(x, left, loc_cfg, model, sched, [derive_seed(s, 5) for s in seeds])
            terms["ce_clean"] = cfg.clean_weight * loss_ce(torch.zeros_like(gt), clean.raw_soft)
    need_restore = cfg.use_l1 or cfg.use_perceptual or cfg.tnc or cfg.ie
    if need_restore:
        x_r = restore_soft(x_adv, loc.mask, right, model, sched, cfg.unroll, [derive_seed(s, 31) for s in seeds])
        if cfg.use_l1:
            terms["l1"] = loss_l1(x_r, x)
        if cfg.use_perceptual:
            terms["perceptual"] = perceptual_distance(x_r, x, clf)
        if cfg.tnc:
            terms["tnc"] = loss_tnc(x, x_r, cfg.alpha, cfg.beta, cfg.k)
        if cfg.ie:
            terms["ie"] = loss_ie(x, x_r, cfg.gamma, cfg.delta)
    if not terms:
        raise ValueError("every loss term is disabled")
    total = sum(terms.values())
    return total, {k: float(v.detach()) for k, v in terms.items()}


def tune_prompts(
    fewshot,
    prompts: LearnablePrompts,
    cfg: TuneConfig,
    model,
    sched: NoiseSchedule,
    clf,
    loc_cfg: LocalizerConfig | None = None,
) -> LearnablePrompts:
    """Optimize V_L and V_R with Adam on the few-shot set.

    Each step draws fresh diffusion noise; ``initial_loss`` and
    ``final_loss`` are measured with one fixed noise draw so they are
    comparable. The per-step trajectory lands in ``history``.
    """
    loc_cfg = loc_cfg or LocalizerConfig()
    batch = stack_fewshot(fewshot)
    batch = tuple(b[: cfg.shots] for b in batch)
    n = len(batch[0])
    out = prompts.detached()
    V_L = out.V_L.requires_grad_(True)
    V_R = out.V_R.requires_grad_(True)
    opt = torch.optim.Adam([V_L, V_R], lr=cfg.learn_rate)
    eval_seeds = [derive_seed(cfg.seed, 10_000, i) for i in range(n)]

    def evaluate() -> float:
        with torch.no_grad():
            return float(prompt_loss(out, batch, cfg, model, sched, clf, loc_cfg, eval_seeds)[0])

    out.initial_loss = evaluate()
    start = time.perf_counter()
    for step in range(cfg.steps):
        seeds = [derive_seed(cfg.seed, step, i) for i in range(n)]
        total, terms = prompt_loss(out, batch, cfg, model, sched, clf, loc_cfg, seeds)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        out.history.append({"step": step, "total": float(total.detach()), **terms})
        if step % 25 == 0 or step == cfg.steps - 1:
            log.info("tune step %d loss %.4f (%.0fs)", step, float(total.detach()), time.perf_counter() - start)
    V_L.requires_grad_(False)
    V_R.requires_grad_(False)
    out.final_loss = evaluate()
    out.localizer = {"t_star": loc_cfg.t_star}
    if loc_cfg.close_iters or loc_cfg.fill_holes:
        out.localizer.update(close_iters=loc_cfg.close_iters, fill_holes=loc_cfg.fill_holes)
    return out


def calibrate_floor(
    prompts: LearnablePrompts,
    x_clean: torch.Tensor,
    model,
    sched: NoiseSchedule,
    factor: float = 2.5,
    seed: int = 0,
) -> LearnablePrompts:
    """Set the normalization floor from difference maps of clean images.

    The floor is ``factor`` times the median per-image 99th percentile, so
    a clean image's map rarely reaches the binarization threshold.
    """
    cfg = replace(prompts.localizer_config(), norm_floor=0.0)
    seeds = [derive_seed(seed, 12, i) for i in range(len(x_clean))]
    with torch.no_grad():
        d = aap_difference(x_clean, prompts.left(), cfg, model, sched, seeds)
    q = torch.quantile(d.flatten(1), cfg.percentile / 100.0, dim=1)
    out = prompts.detached()
    out.localizer["norm_floor"] = float(factor * q.median())
    return out


# --------------------------------------------------------------------------
# Infrared domain token


def template_tokens(model, template: Sequence[str], slot: torch.Tensor) -> torch.Tensor:
    """(len(template), d) tokens with ``slot`` at the slot marker."""
    rows = []
    for w in template:
        if w == SLOT:
            rows.append(slot.reshape(1, -1))
        else:
            with torch.no_grad():
                rows.append(model.embed_words([w]))
    return torch.cat(rows)


def learn_idc_token(
    images: torch.Tensor,
    model,
    sched: NoiseSchedule,
    steps: int = 400,
    seed: int = 0,
    learn_rate: float = 1e-2,
    templates: Sequence[Sequence[str]] = IDC_TEMPLATES,
    history: list | None = None,
) -> torch.Tensor:
    """Textual inversion of a (1, d) domain token on (N, 1 or C, H, W) images.

    Minimizes the noise-prediction error with captions built from
    ``templates``; ``history`` (if given) receives per-step losses.
    """
    if len(images) == 0:
        raise ValueError("no images for the domain token")
    if not templates or any(SLOT not in t for t in templates):
        raise ValueError("every template needs a slot marker")
    x0 = lift_channels(images.float(), model)
    n = len(x0)
    g = torch.Generator().manual_seed(derive_seed(seed, 73))
    std = float(model.word_embedding.weight.detach().std())
    v = (torch.randn(1, model.cfg.embed_dim, generator=g) * std).requires_grad_(True)
    opt = torch.optim.Adam([v], lr=learn_rate)
    rng = np.random.default_rng(derive_seed(seed, 74))
    length = max(len(t) for t in templates)

    def tokens_for(choice):
        rows = []
        for j in choice:
            tok = template_tokens(model, templates[j], v)
            pad = tok.new_zeros(length - len(tok), tok.shape[1])
            rows.append(torch.cat([tok, pad]))
        return torch.stack(rows)

    for step in range(steps):
        t = torch.from_numpy(rng.integers(0, sched.T, size=n))
        noise = NoiseSource([derive_seed(seed, step, i) for i in range(n)], stream=3).randn(x0.shape[1:])
        loss = diffusion_loss(model, x0, t, noise, tokens_for(rng.integers(len(templates), size=n)), sched)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if history is not None:
            history.append({"step": step, "total": loss.item()})
    return v.detach()


def idc_fit_loss(images, token, model, sched, seed: int = 0, draws: int = 8, template=IDC_TEMPLATES[0]) -> float:
    """Noise-prediction error of fixed (t, noise) draws under one template; for before/after comparisons."""
    x0 = lift_channels(images.float(), model)
    rng = np.random.default_rng(derive_seed(seed, 75))
    total = 0.0
    with torch.no_grad():
        tok = template_tokens(model, template, token)[None].expand(len(x0), -1, -1)
        for k in range(draws):
            t = torch.from_numpy(rng.integers(0, sched.T, size=len(x0)))
            noise = NoiseSource([derive_seed(seed, 500 + k, i) for i in range(len(x0))], stream=3).randn(x0.shape[1:])
            total += float(diffusion_loss(model, x0, t, noise, tok, sched))
    return total / draws


# --------------------------------------------------------------------------
# Persistence


def prompts_to_checkpoint(prompts: LearnablePrompts, metadata: dict | None = None) -> Checkpoint:
    params = {"V_L": prompts.V_L.detach().numpy().copy(), "V_R": prompts.V_R.detach().numpy().copy()}
    if prompts.idc is not None:
        params["idc"] = prompts.idc.detach().numpy().copy()
    meta = {"initial_loss": repr(prompts.initial_loss), "final_loss": repr(prompts.final_loss)}
    if prompts.localizer:
        meta["localizer"] = json.dumps(prompts.localizer, sort_keys=True)
    meta.update(metadata or {})
    return Checkpoint("prompts", params, meta)


def prompts_from_checkpoint(ckpt: Checkpoint) -> LearnablePrompts:
    if ckpt.kind != "prompts":
        raise ValueError(f"expected a prompts checkpoint, got {ckpt.kind!r}")
    p = {k: torch.from_numpy(v.copy()) for k, v in ckpt.parameters.items()}
    out = LearnablePrompts(p["V_L"], p["V_R"], p.get("idc"))
    out.initial_loss = float(ckpt.metadata.get("initial_loss", "nan"))
    out.final_loss = float(ckpt.metadata.get("final_loss", "nan"))
    out.localizer = json.loads(ckpt.metadata.get("localizer", "{}"))
    return out


def idc_to_checkpoint(token: torch.Tensor, metadata: dict | None = None) -> Checkpoint:
    return Checkpoint("idc_token", {"E_infrared": token.detach().numpy().copy()}, dict(metadata or {}))


def idc_from_checkpoint(ckpt: Checkpoint) -> torch.Tensor:
    if ckpt.kind != "idc_token":
        raise ValueError(f"expected an idc_token checkpoint, got {ckpt.kind!r}")
    return torch.from_numpy(ckpt.parameters["E_infrared"].copy())


def write_history(history: list[dict], path) -> None:
    """Loss trajectory as CSV; one row per step, one column per term."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = ["step"] + sorted({k for row in history for k in row} - {"step"})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
