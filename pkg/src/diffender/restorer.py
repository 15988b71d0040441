"""Patch restoration and the gated end-to-end defense."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from .diffusion import (
    NoiseSchedule,
    NoiseSource,
    derive_seed,
    inpaint,
    lift_channels,
    per_sample_seeds,
    prior_sample,
    reverse_process,
)
from .localizer import LocalizerConfig, SoftLocalization, localize_soft, localize_with_map


@dataclass(frozen=True)
class DefenseConfig:
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    restore_steps: int = 250
    gate_area: float = 0.005

    def __post_init__(self):
        if not 0.0 <= self.gate_area < 1.0:
            raise ValueError("gate_area must lie in [0, 1)")
        if self.restore_steps < 1:
            raise ValueError("restore_steps must be >= 1")


@dataclass
class DefenseOutput:
    restored: torch.Tensor  # (N, C, H, W)
    mask: torch.Tensor  # (N, H, W) refined hard mask
    gated: torch.Tensor  # (N,) bool, True where restoration ran
    area: torch.Tensor  # (N,) mask area fraction
    diff: torch.Tensor | None = None  # (N, H, W) normalized difference map
    timings: dict[str, float] = field(default_factory=dict)


def restore(
    x_adv: torch.Tensor,
    mask: torch.Tensor,
    prompt_R: torch.Tensor,
    model,
    sched: NoiseSchedule,
    steps: int,
    seed,
) -> torch.Tensor:
    """Inpaint the masked region with prompt_R; single-channel inputs are lifted to the model's channels."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if mask.dim() == 4:
        mask = mask[:, 0]
    c = x_adv.shape[1]
    lifted = lift_channels(x_adv, model)
    out = inpaint(lifted, mask[:, None], prompt_R, steps, model, sched, seed)
    if lifted.shape[1] != c:
        out = torch.where(mask[:, None] > 0.5, out.mean(dim=1, keepdim=True), x_adv)
    return out


def restore_soft(
    x_adv: torch.Tensor,
    mask: torch.Tensor,
    prompt_R: torch.Tensor,
    model,
    sched: NoiseSchedule,
    steps: int,
    seed,
) -> torch.Tensor:
    """Differentiable restoration for prompt tuning.

    Runs the same masked sampler as :func:`restore` with gradients enabled
    and blends with a (possibly soft) mask: m * generated + (1 - m) * x_adv.
    """
    if mask.dim() == 3:
        mask = mask[:, None]
    c = x_adv.shape[1]
    lifted = lift_channels(x_adv, model)
    seeds = per_sample_seeds(seed, len(x_adv))
    noise, known_noise = NoiseSource(seeds), NoiseSource(seeds, stream=1)
    x_T = prior_sample(noise, lifted.shape[1:], model, sched, lifted.dtype)
    gen = reverse_process(
        x_T, sched.T - 1, prompt_R, steps, model, sched, noise, known=lifted, mask=mask, known_noise=known_noise
    ).clamp(0.0, 1.0)
    if gen.shape[1] != c:
        gen = gen.mean(dim=1, keepdim=True)
    return mask * gen + (1 - mask) * x_adv


def _restore_seeds(seeds: list[int]) -> list[int]:
    return [derive_seed(s, 31) for s in seeds]


def _finish(x, mask, area, prompt_R, cfg: DefenseConfig, model, sched, seeds) -> tuple[torch.Tensor, torch.Tensor]:
    gated = area >= cfg.gate_area
    out = x.clone()
    idx = gated.nonzero().flatten()
    if len(idx):
        sub_seeds = [_restore_seeds(seeds)[i] for i in idx.tolist()]
        out[idx] = restore(x[idx], mask[idx], prompt_R, model, sched, cfg.restore_steps, sub_seeds)
    return out, gated


def defend(
    x: torch.Tensor,
    prompts: tuple[torch.Tensor, torch.Tensor],
    cfg: DefenseConfig,
    model,
    sched: NoiseSchedule,
    seed,
) -> DefenseOutput:
    """Localize, then restore only the images whose mask area reaches ``gate_area``."""
    prompt_L, prompt_R = prompts
    seeds = per_sample_seeds(seed, len(x))
    t0 = time.perf_counter()
    mask, area, diff = localize_with_map(x, prompt_L, cfg.localizer, model, sched, seeds)
    t1 = time.perf_counter()
    with torch.no_grad():
        out, gated = _finish(x, mask, area, prompt_R, cfg, model, sched, seeds)
    t2 = time.perf_counter()
    return DefenseOutput(out, mask, gated, area, diff, {"localize": t1 - t0, "restore": t2 - t1})


class DiffenderDefense:
    """Callable defense for the attack and evaluation harness.

    ``surrogate`` returns the true defended images in the forward pass.
    Its backward pass treats restored pixels as the input (BPDA) and
    differentiates the mask through the soft localization chain (STE).
    """

    def __init__(self, prompts, cfg: DefenseConfig, model, sched: NoiseSchedule):
        self.prompts, self.cfg, self.model, self.sched = prompts, cfg, model, sched

    def __call__(self, x: torch.Tensor, seed) -> torch.Tensor:
        return self.run(x, seed).restored

    def run(self, x: torch.Tensor, seed) -> DefenseOutput:
        return defend(x, self.prompts, self.cfg, self.model, self.sched, seed)

    def soft(self, x: torch.Tensor, seed) -> SoftLocalization:
        return localize_soft(x, self.prompts[0], self.cfg.localizer, self.model, self.sched, seed)

    def surrogate(self, x: torch.Tensor, seed) -> torch.Tensor:
        seeds = per_sample_seeds(seed, len(x))
        loc = self.soft(x, seeds)
        hard = loc.mask.detach()
        area = hard.flatten(1).mean(1)
        with torch.no_grad():
            true_out, gated = _finish(x.detach(), hard, area, self.prompts[1], self.cfg, self.model, self.sched, seeds)
        m = (loc.mask * gated[:, None, None].to(x.dtype))[:, None]
        restored = x + (true_out - x).detach()
        expr = (1 - m) * x + m * restored
        return true_out + (expr - expr.detach())
