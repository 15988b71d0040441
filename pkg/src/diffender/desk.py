"""Build (and cache on disk) every artifact of the desk-scale setup.

The pipeline writes datasets as PNG directories and models as
checkpoints under ``root/<profile hash>/``. Each step is skipped when its
output already exists, so tests, demos and the CLI share one build.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .attacker import AttackSpec, run_attack
from .data_io import Dataset, infrared_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .diffusion import TrainConfig, derive_seed, model_from_checkpoint, model_to_checkpoint, train_diffusion
from .shapes import make_shapes
from .localizer import LocalizerConfig
from .tuner import (
    TuneConfig,
    calibrate_floor,
    idc_from_checkpoint,
    idc_to_checkpoint,
    init_prompts,
    learn_idc_token,
    prompts_to_checkpoint,
    tune_prompts,
    write_history,
)
from .victims import classifier_from_checkpoint, classifier_to_checkpoint, predict, to_tensor, train_classifier

log = logging.getLogger(__name__)

DEFAULT_ROOT = Path(os.environ.get("DIFFENDER_DESK", Path.home() / ".cache" / "diffender"))


@dataclass(frozen=True)
class DeskProfile:
    n_train: int = 5000
    n_eval: int = 128
    n_fewshot: int = 64
    diffusion_epochs: int = 12
    infrared_mix: float = 0.1
    classifier_epochs: int = 8
    shots: int = 8
    tune_steps: int = 200
    idc_images: int = 10
    idc_steps: int = 400
    t_star: float = 0.1  # localizer noise ratio the prompts are tuned for
    floor_factor: float = 2.5
    calib_images: int = 32
    seed: int = 0

    def key(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class DeskArtifacts:
    root: Path
    profile: DeskProfile

    def path(self, name: str) -> Path:
        return self.root / name

    # datasets
    @property
    def train(self) -> Path:
        return self.path("data/train")

    @property
    def eval(self) -> Path:
        return self.path("data/eval")

    @property
    def fewshot(self) -> Path:
        return self.path("data/fewshot")

    @property
    def ir_train(self) -> Path:
        return self.path("data/ir_train")

    @property
    def ir_eval(self) -> Path:
        return self.path("data/ir_eval")

    @property
    def ir_fewshot(self) -> Path:
        return self.path("data/ir_fewshot")

    # checkpoints
    @property
    def diffusion(self) -> Path:
        return self.path("diffusion.ckpt")

    @property
    def classifier(self) -> Path:
        return self.path("classifier_a.ckpt")

    @property
    def classifier_b(self) -> Path:
        return self.path("classifier_b.ckpt")

    @property
    def classifier_ir(self) -> Path:
        return self.path("classifier_ir.ckpt")

    @property
    def idc(self) -> Path:
        return self.path("idc_token.ckpt")

    @property
    def prompts(self) -> Path:
        return self.path("prompts.ckpt")

    def ir_prompts(self, variant: str = "full") -> Path:
        """Infrared prompt variants: full, no_idc, no_losses."""
        return self.path(f"prompts_ir_{variant}.ckpt")


IR_VARIANTS = {
    "full": dict(idc=True, use_tnc=True, use_ie=True),
    "no_idc": dict(idc=False, use_tnc=True, use_ie=True),
    "no_losses": dict(idc=True, use_tnc=False, use_ie=False),
}
# thermal patches light up at their outline, so infrared masks are closed and filled
IR_REFINE = dict(close_iters=2, fill_holes=True)


def _tensors(path: Path):
    ds = load_dataset(path)
    return to_tensor(ds.images), torch.from_numpy(np.array(ds.labels))


def fewshot_batch(x, y, clf, spec: AttackSpec, shots: int, seed: int):
    """First ``shots`` correctly classified images, attacked: (x_clean, x_adv, gt_mask)."""
    keep = (torch.from_numpy(predict(clf, x)) == y).nonzero().flatten()[:shots]
    seeds = [derive_seed(seed, 900, int(i)) for i in keep]
    r = run_attack(x[keep], y[keep], clf, spec, seeds=seeds)
    return x[keep], r.x_adv, r.gt_mask


def _mixed_training_set(train: Dataset, ir_train: Dataset, frac: float, seed: int) -> Dataset:
    """Visible images plus a fraction of gray-lifted infrared proxies (uncaptioned)."""
    k = int(round(frac * len(train)))
    if k == 0:
        return train
    idx = np.random.default_rng(derive_seed(seed, 61)).choice(len(ir_train), size=k, replace=False)
    gray = np.repeat(ir_train.images[idx], 3, axis=-1)
    images = np.concatenate([train.images, gray])
    labels = np.concatenate([train.labels, np.full(k, -1, dtype=np.int64)])
    return Dataset(images, labels, "train")


def build_desk(root=None, profile: DeskProfile | None = None, steps: tuple[str, ...] | None = None) -> DeskArtifacts:
    """Create whatever is missing under ``root`` and return the artifact paths.

    ``steps`` limits the build to a prefix of the pipeline (by name).
    """
    profile = profile or DeskProfile()
    art = DeskArtifacts(Path(root or DEFAULT_ROOT) / profile.key(), profile)
    art.root.mkdir(parents=True, exist_ok=True)
    (art.root / "profile.json").write_text(json.dumps(asdict(profile), indent=2, sort_keys=True))
    s = profile.seed
    todo = steps or ("data", "diffusion", "classifiers", "idc", "prompts", "ir_prompts")

    if "data" in todo and not (art.ir_fewshot / "labels.csv").exists():
        for name, n, k in (("train", profile.n_train, 0), ("eval", profile.n_eval, 1), ("fewshot", profile.n_fewshot, 2)):
            ds = make_shapes(n, derive_seed(s, k), split="train" if name == "train" else "test")
            save_dataset(ds, art.path(f"data/{name}"))
            save_dataset(infrared_dataset(load_dataset(art.path(f"data/{name}"))), art.path(f"data/ir_{name}"))

    if "diffusion" in todo and not art.diffusion.exists():
        train = load_dataset(art.train)
        mixed = _mixed_training_set(train, load_dataset(art.ir_train), profile.infrared_mix, s)
        colors = _colors(profile) + [None] * (len(mixed) - len(train))
        res = train_diffusion(mixed, profile.diffusion_epochs, TrainConfig(), seed=s, colors=colors)
        meta = {"epochs": profile.diffusion_epochs, "final_loss": f"{res.losses[-1]:.6f}", "seconds": f"{res.seconds:.1f}"}
        save_checkpoint(model_to_checkpoint(res.model, res.sched, meta), art.diffusion)

    if "classifiers" in todo:
        for path, data, seed in ((art.classifier, art.train, s), (art.classifier_b, art.train, s + 1), (art.classifier_ir, art.ir_train, s)):
            if not path.exists():
                clf = train_classifier(load_dataset(data), profile.classifier_epochs, seed=seed)
                save_checkpoint(classifier_to_checkpoint(clf), path)

    if "idc" in todo and not art.idc.exists():
        model, sched = model_from_checkpoint(load_checkpoint(art.diffusion))
        x_ir, _ = _tensors(art.ir_fewshot)
        hist: list = []
        tok = learn_idc_token(x_ir[-profile.idc_images :], model, sched, profile.idc_steps, seed=s, history=hist)
        write_history(hist, art.path("idc_history.csv"))
        save_checkpoint(idc_to_checkpoint(tok, {"steps": profile.idc_steps}), art.idc)

    if "prompts" in todo and not art.prompts.exists():
        model, sched = model_from_checkpoint(load_checkpoint(art.diffusion))
        clf = classifier_from_checkpoint(load_checkpoint(art.classifier))
        x, y = _tensors(art.fewshot)
        batch = fewshot_batch(x, y, clf, AttackSpec("advp"), profile.shots, s)
        cfg = TuneConfig(steps=profile.tune_steps, shots=profile.shots, seed=s)
        out = tune_prompts(batch, init_prompts(seed=s), cfg, model, sched, clf, _loc(profile))
        out = calibrate_floor(out, x[: profile.calib_images], model, sched, profile.floor_factor, s)
        write_history(out.history, art.path("prompts_history.csv"))
        save_checkpoint(prompts_to_checkpoint(out), art.prompts)

    if "ir_prompts" in todo:
        model = sched = None
        for variant, opts in IR_VARIANTS.items():
            path = art.ir_prompts(variant)
            if path.exists():
                continue
            if model is None:
                model, sched = model_from_checkpoint(load_checkpoint(art.diffusion))
                clf_ir = classifier_from_checkpoint(load_checkpoint(art.classifier_ir))
                idc = idc_from_checkpoint(load_checkpoint(art.idc))
                x, y = _tensors(art.ir_fewshot)
                x, y = x[: -profile.idc_images], y[: -profile.idc_images]
                batch = fewshot_batch(x, y, clf_ir, AttackSpec("ir_cold"), profile.shots, s)
            cfg = TuneConfig(
                steps=profile.tune_steps, shots=profile.shots, infrared=True,
                use_tnc=opts["use_tnc"], use_ie=opts["use_ie"], seed=s,
            )  # fmt: skip
            init = init_prompts(seed=s, idc=idc if opts["idc"] else None)
            out = tune_prompts(batch, init, cfg, model, sched, clf_ir, replace(_loc(profile), **IR_REFINE))
            out = calibrate_floor(out, x[: profile.calib_images], model, sched, profile.floor_factor, s)
            write_history(out.history, art.path(f"prompts_ir_{variant}_history.csv"))
            save_checkpoint(prompts_to_checkpoint(out, {"variant": variant}), path)
    return art


def _loc(profile: DeskProfile) -> LocalizerConfig:
    return LocalizerConfig(t_star=profile.t_star)


def _colors(profile: DeskProfile) -> list:
    # make_shapes is deterministic, so regenerating recovers the caption colors
    _, colors = make_shapes(profile.n_train, derive_seed(profile.seed, 0), split="train", with_captions=True)
    return list(colors)
