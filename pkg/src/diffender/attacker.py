"""Patch attacks: AdvP, LaVAN, infrared cold patches, and BPDA+STE adaptive attacks.

All attacks are batched over an (N, C, H, W) tensor. Each image gets its
own RNG derived from the AttackSpec seed (or from an explicit per-image seed
list), so results do not depend on how images are grouped into batches.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import derive_seed, per_sample_seeds

ATTACK_KINDS = ("advp", "lavan", "ir_cold", "bpda_advp", "bpda_lavan")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "advp"
    patch_fraction: float = 0.05
    iterations: int = 100
    step_size: float = 0.02
    location_policy: str = "random_fixed"
    restarts: int = 1
    seed: int = 0
    cold_max: float = 0.2

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 < self.patch_fraction <= 0.25:
            raise ValueError("patch_fraction must lie in (0, 0.25]")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.location_policy not in ("random_fixed", "random_per_restart"):
            raise ValueError(f"unknown location policy {self.location_policy!r}")

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AttackResult:
    x_adv: torch.Tensor  # (N, C, H, W)
    gt_mask: torch.Tensor  # (N, H, W) in {0, 1}
    success: torch.Tensor  # (N,) bool
    queries: torch.Tensor  # (N,) int64

    def __len__(self) -> int:
        return len(self.x_adv)


def patch_side(h: int, w: int, fraction: float) -> int:
    return max(1, int(round(math.sqrt(fraction * h * w))))


def square_masks(shape, fraction: float, rngs: Sequence[np.random.Generator]) -> torch.Tensor:
    n, _, h, w = shape
    s = patch_side(h, w, fraction)
    masks = torch.zeros(n, h, w)
    for i, rng in enumerate(rngs):
        r, c = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
        masks[i, r : r + s, c : c + s] = 1.0
    return masks


def _rngs(seeds: Sequence[int], stream: int) -> list[np.random.Generator]:
    return [np.random.default_rng(derive_seed(s, stream)) for s in seeds]


def margin(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """max over other classes minus the true-class logit; > 0 means misclassified."""
    true = logits.gather(1, labels[:, None]).squeeze(1)
    other = logits.clone()
    other.scatter_(1, labels[:, None], float("-inf"))
    return other.amax(dim=1) - true


def _loss(logits, labels, kind: str) -> torch.Tensor:
    if kind == "ce":
        return F.cross_entropy(logits, labels, reduction="sum")
    return margin(logits, labels).sum()


def _optimize_patch(
    x: torch.Tensor,
    labels: torch.Tensor,
    masks: torch.Tensor,
    spec: AttackSpec,
    forward: Callable[[torch.Tensor, int], torch.Tensor],
    loss_kind: str,
) -> torch.Tensor:
    """Signed-gradient ascent on the patch pixels; the patch starts as the image content."""
    m = masks[:, None].to(x.dtype)
    patch = x.clone()
    for it in range(spec.iterations):
        patch.requires_grad_(True)
        x_adv = x * (1 - m) + patch * m
        loss = _loss(forward(x_adv, it), labels, loss_kind)
        (grad,) = torch.autograd.grad(loss, patch)
        with torch.no_grad():
            patch = (patch + spec.step_size * grad.sign() * m).clamp(0.0, 1.0)
    with torch.no_grad():
        return x * (1 - m) + patch * m


def _batch_seeds(spec: AttackSpec, n: int, seeds) -> list[int]:
    return per_sample_seeds(spec.seed if seeds is None else seeds, n)


def _misclassified(clf, x_adv, labels) -> torch.Tensor:
    with torch.no_grad():
        return clf(x_adv).argmax(1) != labels


def advp_attack(x, labels, clf, spec: AttackSpec, seeds=None) -> AttackResult:
    """Square patch at a random location, cross-entropy ascent (untargeted)."""
    labels = torch.as_tensor(labels).long()
    seeds = _batch_seeds(spec, len(x), seeds)
    masks = square_masks(x.shape, spec.patch_fraction, _rngs(seeds, 0))
    x_adv = _optimize_patch(x, labels, masks, spec, lambda z, it: clf(z), "ce")
    return AttackResult(x_adv, masks, _misclassified(clf, x_adv, labels), torch.full((len(x),), spec.iterations))


def lavan_attack(x, labels, clf, spec: AttackSpec, seeds=None) -> AttackResult:
    """Logit-margin ascent; each restart relocates the patch, stopping at the first success."""
    labels = torch.as_tensor(labels).long()
    seeds = _batch_seeds(spec, len(x), seeds)
    rngs = _rngs(seeds, 1)
    n = len(x)
    out = x.clone()
    gt = torch.zeros(n, *x.shape[2:])
    success = torch.zeros(n, dtype=torch.bool)
    queries = torch.zeros(n, dtype=torch.long)
    masks = square_masks(x.shape, spec.patch_fraction, rngs)
    for r in range(spec.restarts):
        todo = (~success).nonzero().flatten()
        if len(todo) == 0:
            break
        if r > 0 and spec.location_policy == "random_per_restart":
            masks = square_masks(x.shape, spec.patch_fraction, rngs)
        sub = masks[todo]
        x_adv = _optimize_patch(x[todo], labels[todo], sub, spec, lambda z, it: clf(z), "margin")
        won = _misclassified(clf, x_adv, labels[todo])
        out[todo], gt[todo], success[todo] = x_adv, sub, won
        queries[todo] += spec.iterations
    return AttackResult(out, gt, success, queries)


ASPECTS = (0.5, 2 / 3, 1.0, 1.5, 2.0)


def cold_rectangle(h: int, w: int, fraction: float, aspect: float) -> tuple[int, int]:
    area = fraction * h * w
    rh = max(1, min(h, int(round(math.sqrt(area * aspect)))))
    rw = max(1, min(w, int(round(area / rh))))
    return rh, rw


def ir_cold_patch_attack(x_ir, labels, clf_ir, spec: AttackSpec, seeds=None, grid: int = 2) -> AttackResult:
    """Random search over (grid location, aspect, intensity <= cold_max) of a uniform patch."""
    if x_ir.shape[1] != 1:
        raise ValueError("infrared attack expects single-channel images")
    labels = torch.as_tensor(labels).long()
    seeds = _batch_seeds(spec, len(x_ir), seeds)
    n, _, h, w = x_ir.shape
    out = x_ir.clone()
    gt = torch.zeros(n, h, w)
    success = torch.zeros(n, dtype=torch.bool)
    for i, rng in enumerate(_rngs(seeds, 2)):
        cands, masks = [], []
        for _ in range(spec.iterations):
            rh, rw = cold_rectangle(h, w, spec.patch_fraction, ASPECTS[rng.integers(len(ASPECTS))])
            r = int(rng.integers(0, (h - rh) // grid + 1)) * grid
            c = int(rng.integers(0, (w - rw) // grid + 1)) * grid
            v = float(rng.uniform(0.0, spec.cold_max))
            mk = torch.zeros(h, w)
            mk[r : r + rh, c : c + rw] = 1.0
            cands.append(x_ir[i, 0] * (1 - mk) + v * mk)
            masks.append(mk)
        batch = torch.stack(cands)[:, None]
        with torch.no_grad():
            marg = margin(clf_ir(batch), labels[i].repeat(len(batch)))
        best = int(marg.argmax())
        out[i], gt[i], success[i] = batch[best], masks[best], bool(marg[best] > 0)
    return AttackResult(out, gt, success, torch.full((n,), spec.iterations))


class Defense(Protocol):
    """A defense maps (images, seed) to defended images.

    ``surrogate`` (optional) must return the same values with a gradient
    usable by attacks; without it the defense is treated as identity in
    the backward pass.
    """

    def __call__(self, x: torch.Tensor, seed) -> torch.Tensor: ...


def bpda_surrogate(defense, x: torch.Tensor, seed) -> torch.Tensor:
    if hasattr(defense, "surrogate"):
        return defense.surrogate(x, seed)
    with torch.no_grad():
        out = defense(x.detach(), seed)
    return x + (out - x).detach()


def bpda_adaptive_attack(
    x, labels, clf, defense, spec: AttackSpec, seeds=None, eval_seed: int | None = None
) -> AttackResult:
    """Patch attack through a defense with BPDA (and STE, when the defense supplies it).

    Every iteration runs the true defense forward with a fresh seed; the
    gradient comes from the defense's surrogate backward. Success is
    judged on the true defended output.
    """
    labels = torch.as_tensor(labels).long()
    seeds = _batch_seeds(spec, len(x), seeds)
    loss_kind = "margin" if spec.kind == "bpda_lavan" else "ce"
    masks = square_masks(x.shape, spec.patch_fraction, _rngs(seeds, 0 if loss_kind == "ce" else 1))
    iter_seeds = lambda it: [derive_seed(s, 1000 + it) for s in seeds]  # noqa: E731
    x_adv = _optimize_patch(
        x, labels, masks, spec, lambda z, it: clf(bpda_surrogate(defense, z, iter_seeds(it))), loss_kind
    )
    final_seed = [derive_seed(s, 999_999) for s in seeds] if eval_seed is None else eval_seed
    with torch.no_grad():
        defended = defense(x_adv, final_seed)
    return AttackResult(
        x_adv, masks, _misclassified(clf, defended, labels), torch.full((len(x),), spec.iterations)
    )


def run_attack(x, labels, clf, spec: AttackSpec, defense=None, seeds=None) -> AttackResult:
    if spec.kind == "advp":
        return advp_attack(x, labels, clf, spec, seeds)
    if spec.kind == "lavan":
        return lavan_attack(x, labels, clf, spec, seeds)
    if spec.kind == "ir_cold":
        return ir_cold_patch_attack(x, labels, clf, spec, seeds)
    if defense is None:
        raise ValueError(f"{spec.kind} needs a defense to attack through")
    return bpda_adaptive_attack(x, labels, clf, defense, spec, seeds)
