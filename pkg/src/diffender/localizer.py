"""Patch localization from prompt-vs-empty one-step denoising differences.

For each of ``m`` noise draws the noisy image x_t is denoised twice in one
step, once with prompt_L and once with the empty prompt, from the same
x_t. The channel-summed absolute difference, averaged over draws, is
normalized by its 99th percentile, thresholded, smoothed and dilated.

Difference maps and masks are (N, H, W) tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .data_io import save_png
from .diffusion import NoiseSchedule, NoiseSource, lift_channels, per_sample_seeds, predict_x0_one_step


_CHUNK = 64


@dataclass(frozen=True)
class LocalizerConfig:
    m: int = 3
    t_star: float = 0.5
    theta: float = 0.5
    gauss_size: int = 5
    gauss_sigma: float = 1.5
    dilate_radius: int = 2
    dilate_iters: int = 1
    soft_tau: float = 0.1
    percentile: float = 99.0
    # lower bound on the normalizer; 0 gives pure percentile scaling
    norm_floor: float = 0.0
    # optional morphological closing and hole filling before smoothing
    close_iters: int = 0
    fill_holes: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if self.gauss_size % 2 == 0 or self.gauss_size < 1:
            raise ValueError("gaussian kernel size must be odd")
        if not 0.0 <= self.t_star <= 1.0:
            raise ValueError("t_star must lie in [0, 1]")
        if self.norm_floor < 0:
            raise ValueError("norm_floor must be >= 0")
        if self.close_iters < 0:
            raise ValueError("close_iters must be >= 0")


def aap_difference(
    x_adv: torch.Tensor,
    prompt_L: torch.Tensor,
    cfg: LocalizerConfig,
    model,
    sched: NoiseSchedule,
    seed,
) -> torch.Tensor:
    """Raw (un-normalized) difference map, shape (N, H, W).

    Differentiable w.r.t. ``x_adv`` and ``prompt_L`` when they require grad.
    """
    if cfg.m < 1:
        raise ValueError("m must be >= 1")
    x_adv = lift_channels(x_adv, model)
    n = x_adv.shape[0]
    t = sched.step_at(cfg.t_star)
    noise = NoiseSource(per_sample_seeds(seed, n), stream=7)
    draws = [noise.randn(x_adv.shape[1:], x_adv.dtype) for _ in range(cfg.m)]
    ab = float(sched.alpha_bar[t])
    # (m * N, C, H, W), repeat-major
    x_t = torch.cat([math.sqrt(ab) * x_adv + math.sqrt(1 - ab) * eps for eps in draws])
    prompt = prompt_L if prompt_L.dim() == 3 else prompt_L.unsqueeze(0)
    if prompt.shape[0] == 1:
        prompt = prompt.expand(n, -1, -1)
    prompt = prompt.repeat(cfg.m, 1, 1)
    prompts = torch.cat([prompt, torch.zeros_like(prompt)])
    x_in = torch.cat([x_t, x_t])
    # large CPU batches run well below peak throughput, so evaluate in chunks
    x0 = torch.cat([
        predict_x0_one_step(x_in[i : i + _CHUNK], t, prompts[i : i + _CHUNK], model, sched)
        for i in range(0, len(x_in), _CHUNK)
    ])  # fmt: skip
    x_a, x_b = x0.chunk(2)
    diff = (x_a - x_b).abs().sum(dim=1)
    return diff.view(cfg.m, n, *diff.shape[1:]).mean(dim=0)


def normalize_diff(d: torch.Tensor, percentile: float = 99.0, floor: float = 0.0) -> torch.Tensor:
    """Divide each map by its percentile value (when > 0) and clip to [0, 1].

    With ``floor`` > 0 the divisor is max(percentile value, floor), so maps
    whose strongest response is weak stay below the threshold.
    """
    flat = d.flatten(1)
    q = torch.quantile(flat, percentile / 100.0, dim=1, keepdim=True).clamp_min(floor)
    safe = torch.where(q > 0, q, torch.ones_like(q))
    out = torch.where(q > 0, flat / safe, torch.zeros_like(flat))
    return out.clamp(0.0, 1.0).view_as(d)


def binarize(d: torch.Tensor, theta: float = 0.5, mode: str = "hard", soft_tau: float = 0.1) -> torch.Tensor:
    """Threshold a normalized map.

    ``hard`` gives {0, 1} values with the soft sigmoid gradient passed
    straight through; ``soft`` gives sigmoid((d - theta) / soft_tau).
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    soft = torch.sigmoid((d - theta) / soft_tau)
    if mode == "soft":
        return soft
    if mode != "hard":
        raise ValueError(f"unknown binarize mode {mode!r}")
    hard = (d > theta).to(d.dtype)
    if d.requires_grad:
        return hard + (soft - soft.detach())
    return hard


def gaussian_kernel(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    k = torch.outer(g, g)
    return (k / k.sum()).to(dtype)


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    return [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= radius * radius
    ]


def smooth(mask: torch.Tensor, size: int, sigma: float) -> torch.Tensor:
    k = gaussian_kernel(size, sigma, mask.dtype)[None, None]
    pad = size // 2
    x = F.pad(mask.unsqueeze(1), (pad, pad, pad, pad), mode="replicate")
    return F.conv2d(x, k).squeeze(1)


def dilate(mask: torch.Tensor, radius: int, iters: int = 1) -> torch.Tensor:
    """Grey dilation by a disk; exact binary dilation on {0, 1} masks."""
    if radius <= 0 or iters <= 0:
        return mask
    offsets = disk_offsets(radius)
    h, w = mask.shape[-2:]
    for _ in range(iters):
        padded = F.pad(mask, (radius, radius, radius, radius))
        shifted = [padded[..., radius + dy : radius + dy + h, radius + dx : radius + dx + w] for dy, dx in offsets]
        mask = torch.stack(shifted).amax(dim=0)
    return mask


_SQUARE = np.ones((3, 3), bool)


def close_and_fill(mask: torch.Tensor, iters: int = 0, fill: bool = True) -> torch.Tensor:
    """Binary closing (3x3 square, ``iters`` times) then hole filling; a superset of ``mask``."""
    out = []
    for a in mask.detach().cpu().numpy() > 0.5:
        b = a
        if iters:
            p = iters + 1  # zero border so the erosion cannot eat mask pixels at the image edge
            b = ndimage.binary_closing(np.pad(a, p), _SQUARE, iterations=iters)[p:-p, p:-p] | a
        if fill:
            b = ndimage.binary_fill_holes(b)
        out.append(b)
    return torch.from_numpy(np.stack(out)).to(mask.device, mask.dtype)


def refine_mask(raw: torch.Tensor, cfg: LocalizerConfig = LocalizerConfig()) -> torch.Tensor:
    """Gaussian-smooth, re-threshold at 0.5, then dilate. Hard in, hard out."""
    raw = raw if raw.is_floating_point() else raw.float()
    if cfg.close_iters or cfg.fill_holes:
        raw = close_and_fill(raw, cfg.close_iters, cfg.fill_holes)
    sm = smooth(raw, cfg.gauss_size, cfg.gauss_sigma)
    kept = (sm >= 0.5).to(sm.dtype)
    return dilate(kept, cfg.dilate_radius, cfg.dilate_iters)


def refine_mask_soft(soft: torch.Tensor, cfg: LocalizerConfig = LocalizerConfig()) -> torch.Tensor:
    """Differentiable counterpart of :func:`refine_mask` for soft masks."""
    sm = smooth(soft, cfg.gauss_size, cfg.gauss_sigma)
    kept = torch.sigmoid((sm - 0.5) / cfg.soft_tau)
    return dilate(kept, cfg.dilate_radius, cfg.dilate_iters)


def localize(
    x_adv: torch.Tensor,
    prompt_L: torch.Tensor,
    cfg: LocalizerConfig,
    model,
    sched: NoiseSchedule,
    seed,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard refined mask (N, H, W) and its area fraction (N,)."""
    mask, area, _ = localize_with_map(x_adv, prompt_L, cfg, model, sched, seed)
    return mask, area


def localize_with_map(x_adv, prompt_L, cfg: LocalizerConfig, model, sched: NoiseSchedule, seed):
    """Like :func:`localize`, also returning the normalized difference map."""
    with torch.no_grad():
        d = normalize_diff(aap_difference(x_adv, prompt_L, cfg, model, sched, seed), cfg.percentile, cfg.norm_floor)
        mask = refine_mask(binarize(d, cfg.theta, "hard"), cfg)
    return mask, mask.flatten(1).mean(dim=1), d


@dataclass
class SoftLocalization:
    diff: torch.Tensor  # normalized difference map
    raw_soft: torch.Tensor  # sigmoid-thresholded map, before refinement
    refined_soft: torch.Tensor  # differentiable refinement of raw_soft
    mask: torch.Tensor  # hard refined mask, gradient of refined_soft (STE)


def localize_soft(
    x_adv: torch.Tensor,
    prompt_L: torch.Tensor,
    cfg: LocalizerConfig,
    model,
    sched: NoiseSchedule,
    seed,
) -> SoftLocalization:
    """Differentiable localization used by prompt tuning and adaptive attacks.

    The hard mask in the result equals :func:`localize`'s output in value.
    """
    d = normalize_diff(aap_difference(x_adv, prompt_L, cfg, model, sched, seed), cfg.percentile, cfg.norm_floor)
    raw_soft = binarize(d, cfg.theta, "soft", cfg.soft_tau)
    refined_soft = refine_mask_soft(raw_soft, cfg)
    hard = refine_mask((d.detach() > cfg.theta).to(d.dtype), cfg)
    return SoftLocalization(d, raw_soft, refined_soft, hard + (refined_soft - refined_soft.detach()))


def iou(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-image intersection over union of hard masks; 1 when both are empty."""
    p, t = pred.flatten(1) > 0.5, target.flatten(1) > 0.5
    inter = (p & t).sum(1).double()
    union = (p | t).sum(1).double()
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


def save_mask_png(mask, path) -> None:
    save_png(np.asarray(mask, dtype=np.float64), path)


def heatmap(d) -> np.ndarray:
    """Black-red-yellow-white colormap of a map in [0, 1], shape (H, W, 3)."""
    v = np.clip(np.asarray(d, dtype=np.float64), 0, 1)
    return np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)


def save_heatmap_png(d, path) -> None:
    save_png(heatmap(d), path)
