"""Baseline defenses, paired defense evaluation and experiment suites.

Attacked images are cached per image under a key built from the attack
spec, the victim checkpoint, the evaluation data and (for adaptive
attacks) the defense, so every defense in a suite sees the same
adversarial inputs.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .attacker import AttackResult, AttackSpec, run_attack
from .data_io import REPORT_COLUMNS, DefenseReport, load_checkpoint, load_dataset, save_png, write_report
from .diffusion import (
    NoiseSource,
    derive_seed,
    empty_prompt,
    forward_diffuse,
    lift_channels,
    model_from_checkpoint,
    per_sample_seeds,
    reverse_process,
)
from .localizer import LocalizerConfig, heatmap, iou
from .restorer import DefenseConfig, DiffenderDefense
from .tuner import LearnablePrompts, init_prompts, prompts_from_checkpoint
from .victims import classifier_from_checkpoint, to_tensor

log = logging.getLogger(__name__)

DEFENSES = ("none", "diffender", "jpeg", "smoothing", "purify")
PROMPT_MODES = ("tuned", "empty", "fixed_random")
CHUNK = 32
# how adaptive attacks differentiate through each defense
BPDA_BACKWARD = {"none": "exact", "diffender": "ste", "jpeg": "identity", "smoothing": "exact", "purify": "identity"}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class MissingArtifactError(ConfigError):
    """A referenced checkpoint or dataset does not exist."""


# --------------------------------------------------------------------------
# Baselines


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.dim() == 3 else (x, False)


def baseline_jpeg(x: torch.Tensor, quality: int) -> torch.Tensor:
    """JPEG encode/decode round trip of (N, C, H, W) or (C, H, W) images in [0, 1]."""
    if not 1 <= int(quality) <= 100:
        raise ValueError("JPEG quality must lie in [1, 100]")
    xb, single = _as_batch(x)
    out = []
    for img in xb:
        arr = np.round(img.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255).astype(np.uint8)
        pil = Image.fromarray(arr[..., 0] if arr.shape[2] == 1 else arr)
        buf = io.BytesIO()
        pil.save(buf, format="JPEG", quality=int(quality))
        dec = np.asarray(Image.open(io.BytesIO(buf.getvalue())), dtype=np.float32) / 255.0
        out.append(torch.from_numpy(dec.reshape(arr.shape).transpose(2, 0, 1).copy()))
    res = torch.stack(out).to(x.dtype)
    return res[0] if single else res


def baseline_smoothing(x: torch.Tensor, window: int = 3) -> torch.Tensor:
    """Per-channel median filter with an odd square window."""
    if window < 1 or window % 2 == 0:
        raise ValueError("median window must be an odd positive integer")
    xb, single = _as_batch(x)
    arr = xb.detach().numpy()
    res = torch.from_numpy(ndimage.median_filter(arr, size=(1, 1, window, window), mode="reflect")).to(x.dtype)
    return res[0] if single else res


def _symmetric_pad(x: torch.Tensor, p: int) -> torch.Tensor:
    # edge-inclusive mirror, scipy's "reflect"
    for dim in (-2, -1):
        n = x.shape[dim]
        idx = list(range(p - 1, -1, -1)) + list(range(n)) + list(range(n - 1, n - 1 - p, -1))
        x = x.index_select(dim, torch.tensor([min(max(i, 0), n - 1) for i in idx]))
    return x


def median_smoothing_torch(x: torch.Tensor, window: int = 3) -> torch.Tensor:
    """Differentiable median filter with the same values as :func:`baseline_smoothing`."""
    if window < 1 or window % 2 == 0:
        raise ValueError("median window must be an odd positive integer")
    xb, single = _as_batch(x)
    n, c, h, w = xb.shape
    padded = _symmetric_pad(xb.reshape(n * c, 1, h, w), window // 2)
    cols = torch.nn.functional.unfold(padded, window)  # (N*C, window^2, H*W)
    res = cols.median(dim=1).values.view(n, c, h, w)
    return res[0] if single else res


def baseline_purify(x: torch.Tensor, t_star: float, model, sched, steps: int, seed) -> torch.Tensor:
    """Noise the whole image to ratio ``t_star``, then denoise it with the empty prompt."""
    xb, single = _as_batch(x)
    c = xb.shape[1]
    lifted = lift_channels(xb, model)
    t = sched.step_at(t_star)
    seeds = per_sample_seeds(seed, len(xb))
    noise = NoiseSource(seeds, stream=11)
    x_t = forward_diffuse(lifted, t, noise.randn(lifted.shape[1:], lifted.dtype), sched)
    with torch.no_grad():
        out = reverse_process(x_t, t, empty_prompt(model), steps, model, sched, noise).clamp(0.0, 1.0)
    if out.shape[1] != c:
        out = out.mean(dim=1, keepdim=True)
    return out[0] if single else out


class FunctionDefense:
    """Wraps ``fn(x, seed)``. Attacks differentiate through ``grad_fn`` when
    given (it must return the same values), otherwise as identity (BPDA).
    """

    def __init__(self, fn: Callable, grad_fn: Callable | None = None):
        self.fn = fn
        if grad_fn is not None:
            self.surrogate = grad_fn

    def __call__(self, x, seed):
        with torch.no_grad():
            return self.fn(x, seed)


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    defense: str = "diffender"
    attack: AttackSpec = field(default_factory=AttackSpec)
    eval_data: str = ""
    classifier: str = ""
    diffusion: str = ""
    prompts: str = ""
    prompt_mode: str = "tuned"
    cache_dir: str = ""
    num_eval_images: int = 128
    seed: int = 0
    localizer: LocalizerConfig | None = None  # None: settings stored with the prompts
    restore_steps: int = 50
    gate_area: float = 0.005
    attack_restore_steps: int = 10
    jpeg_quality: int = 75
    smoothing_window: int = 3
    purify_t_star: float = 0.5
    purify_steps: int = 20

    def __post_init__(self):
        if self.defense not in DEFENSES:
            raise ConfigError(f"unknown defense {self.defense!r}; choose from {DEFENSES}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"unknown prompt_mode {self.prompt_mode!r}; choose from {PROMPT_MODES}")
        if self.num_eval_images < 1:
            raise ConfigError("num_eval_images must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = asdict(self.attack)
        d["localizer"] = None if self.localizer is None else asdict(self.localizer)
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("cache_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown experiment keys: {unknown}")
        try:
            if isinstance(d.get("attack"), dict):
                d["attack"] = AttackSpec(**d["attack"])
            if isinstance(d.get("localizer"), dict):
                d["localizer"] = LocalizerConfig(**d["localizer"])
        except TypeError as e:
            raise ConfigError(str(e)) from None
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return cls(**d)


# --------------------------------------------------------------------------
# Artifacts


_ARTIFACTS: dict = {}


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _require(path: str, what: str) -> Path:
    if not path:
        raise MissingArtifactError(f"no {what} configured")
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"{what} not found: {p}")
    return p


def _memo(kind: str, path: Path, loader):
    st = path.stat()
    key = (kind, str(path.resolve()), st.st_mtime_ns, st.st_size)
    if key not in _ARTIFACTS:
        _ARTIFACTS[key] = loader(path)
    return _ARTIFACTS[key]


def _load_eval(path: Path):
    ds = load_dataset(path, split="test")
    h = hashlib.sha256(np.ascontiguousarray(ds.images).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return ds, to_tensor(ds.images), torch.from_numpy(np.array(ds.labels)), h.hexdigest()[:16]


def _load_prompts(cfg: ExperimentConfig, model) -> LearnablePrompts:
    n, d = 16, model.cfg.embed_dim
    if cfg.prompt_mode == "empty":
        return LearnablePrompts(torch.zeros(n, d), torch.zeros(n, d))
    if cfg.prompt_mode == "fixed_random":
        return init_prompts(n, d, seed=cfg.seed)
    p = _require(cfg.prompts, "prompts checkpoint")
    return _memo("prompts", p, lambda q: prompts_from_checkpoint(load_checkpoint(q)))


def build_defense(cfg: ExperimentConfig, restore_steps: int | None = None):
    """The defense object for ``cfg`` (None for the undefended setting).

    ``restore_steps`` overrides the reverse-step count of the diffusion
    defenses (capped at ``purify_steps`` for purification); attacks use it.
    """
    if cfg.defense == "none":
        return None
    if cfg.defense == "jpeg":
        return FunctionDefense(lambda x, seed: baseline_jpeg(x, cfg.jpeg_quality))
    if cfg.defense == "smoothing":
        w = cfg.smoothing_window
        return FunctionDefense(lambda x, seed: baseline_smoothing(x, w), lambda x, seed: median_smoothing_torch(x, w))
    model, sched = _memo("diffusion", _require(cfg.diffusion, "diffusion checkpoint"), lambda q: model_from_checkpoint(load_checkpoint(q)))
    if cfg.defense == "purify":
        steps = cfg.purify_steps if restore_steps is None else min(restore_steps, cfg.purify_steps)
        return FunctionDefense(lambda x, seed: baseline_purify(x, cfg.purify_t_star, model, sched, steps, seed))
    prompts = _load_prompts(cfg, model)
    dcfg = DefenseConfig(cfg.localizer or prompts.localizer_config(), restore_steps or cfg.restore_steps, cfg.gate_area)
    return DiffenderDefense(prompts.pair(), dcfg, model, sched)


def _identity(x, seed):
    return x


@dataclass
class _Applied:
    out: torch.Tensor
    mask: torch.Tensor | None = None
    gated: torch.Tensor | None = None
    diff: torch.Tensor | None = None


def _apply(defense, x: torch.Tensor, seeds: list[int]) -> _Applied:
    """Defended images and, for the diffusion defense, its masks, gate flags and maps."""
    if defense is None:
        return _Applied(x)
    outs, masks, gated, diffs = [], [], [], []
    for i in range(0, len(x), CHUNK):
        xs, ss = x[i : i + CHUNK], seeds[i : i + CHUNK]
        if isinstance(defense, DiffenderDefense):
            r = defense.run(xs, ss)
            outs.append(r.restored), masks.append(r.mask), gated.append(r.gated), diffs.append(r.diff)
        else:
            outs.append(defense(xs, ss))
    if masks:
        return _Applied(torch.cat(outs), torch.cat(masks), torch.cat(gated), torch.cat(diffs))
    return _Applied(torch.cat(outs))


# --------------------------------------------------------------------------
# Attack cache


def _attack_key(cfg: ExperimentConfig, clf_digest: str, data_digest: str) -> str:
    parts = {"spec": cfg.attack.spec_hash(), "victim": clf_digest, "data": data_digest}
    if cfg.attack.kind.startswith("bpda"):
        d = cfg.to_dict()
        for k in ("name", "attack", "cache_dir", "num_eval_images", "restore_steps"):
            d.pop(k)
        for k in ("diffusion", "prompts"):
            d[k] = file_digest(d[k]) if d[k] and Path(d[k]).exists() else ""
        parts["defense"] = d
        parts["backward"] = BPDA_BACKWARD[cfg.defense]
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:20]


def _atomic_save_npz(path: Path, **arrays) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cached_attack(cfg: ExperimentConfig, x, labels, indices, clf, clf_digest, data_digest, defense=None):
    """Attack results for the given dataset indices, reading and filling the per-image cache.

    Returns the batched result and a bool tensor marking cache hits.
    """
    seeds = [derive_seed(cfg.attack.seed, int(i)) for i in indices]
    root = Path(cfg.cache_dir) / "attacks" / _attack_key(cfg, clf_digest, data_digest) if cfg.cache_dir else None
    n = len(indices)
    x_adv, gt = x.clone(), torch.zeros(n, *x.shape[2:])
    success, queries = torch.zeros(n, dtype=torch.bool), torch.zeros(n, dtype=torch.long)
    hit = torch.zeros(n, dtype=torch.bool)
    if root is not None:
        for j, idx in enumerate(indices):
            p = root / f"{int(idx):06d}.npz"
            if p.exists():
                with np.load(p) as z:
                    x_adv[j] = torch.from_numpy(z["x_adv"])
                    gt[j] = torch.from_numpy(z["gt_mask"])
                    success[j], queries[j] = bool(z["success"]), int(z["queries"])
                hit[j] = True
    todo = (~hit).nonzero().flatten().tolist()
    for s in range(0, len(todo), CHUNK):
        sub = todo[s : s + CHUNK]
        r = run_attack(x[sub], labels[sub], clf, cfg.attack, defense=defense, seeds=[seeds[j] for j in sub])
        x_adv[sub], gt[sub], success[sub], queries[sub] = r.x_adv, r.gt_mask, r.success, r.queries
        if root is not None:
            for k, j in enumerate(sub):
                _atomic_save_npz(
                    root / f"{int(indices[j]):06d}.npz",
                    x_adv=r.x_adv[k].numpy(), gt_mask=r.gt_mask[k].numpy(),
                    success=np.bool_(r.success[k]), queries=np.int64(r.queries[k]),
                )  # fmt: skip
    return AttackResult(x_adv, gt, success, queries), hit


# --------------------------------------------------------------------------
# Evaluation


def _accuracy(clf, x, labels) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([clf(x[i : i + 256]).argmax(1) for i in range(0, len(x), 256)])


def evaluate_defense(cfg: ExperimentConfig, figures_dir=None, figures: int = 0) -> DefenseReport:
    """Clean accuracy, robust accuracy, ASR and mask IoU of one defense against one attack.

    Only correctly classified evaluation images are used (the first
    ``num_eval_images`` of them). Deterministic given the config.
    """
    stages: dict[str, float] = {}
    t0 = time.perf_counter()
    data_path = _require(cfg.eval_data, "evaluation data")
    _, x_all, y_all, data_digest = _memo("eval", data_path, _load_eval)
    clf_path = _require(cfg.classifier, "classifier checkpoint")
    clf = _memo("classifier", clf_path, lambda q: classifier_from_checkpoint(load_checkpoint(q)))
    clf_digest = file_digest(clf_path)
    defense = build_defense(cfg)
    pred = _accuracy(clf, x_all, y_all)
    keep = (pred == y_all).nonzero().flatten()[: cfg.num_eval_images]
    x, y = x_all[keep], y_all[keep]
    indices = keep.tolist()
    stages["load"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    attack_defense = None
    if cfg.attack.kind.startswith("bpda"):
        attack_defense = build_defense(cfg, restore_steps=cfg.attack_restore_steps) or FunctionDefense(_identity)
    adv, hit = cached_attack(cfg, x, y, indices, clf, clf_digest, data_digest, attack_defense)
    stages["attack"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    clean_seeds = [derive_seed(cfg.seed, 78, i) for i in indices]
    adv_seeds = [derive_seed(cfg.seed, 77, i) for i in indices]
    dc = _apply(defense, x, clean_seeds)
    da = _apply(defense, adv.x_adv, adv_seeds)
    x_def_clean, gated_clean = dc.out, dc.gated
    x_def_adv, masks, gated_adv = da.out, da.mask, da.gated
    stages["defense"] = time.perf_counter() - t2

    p_clean = _accuracy(clf, x_def_clean, y)
    p_adv = _accuracy(clf, x_def_adv, y)
    p_adv_raw = _accuracy(clf, adv.x_adv, y)
    ious = iou(masks, adv.gt_mask) if masks is not None else None
    n = len(indices)
    rows = []
    for j, idx in enumerate(indices):
        rows.append({
            "index": idx,
            "label": int(y[j]),
            "attack_success": bool(p_adv_raw[j] != y[j]),
            "defended_clean_pred": int(p_clean[j]),
            "defended_adv_pred": int(p_adv[j]),
            "gated_clean": None if gated_clean is None else bool(gated_clean[j]),
            "gated_adv": None if gated_adv is None else bool(gated_adv[j]),
            "iou": None if ious is None else round(float(ious[j]), 6),
            "cached": bool(hit[j]),
        })  # fmt: skip
    robust = float((p_adv == y).double().mean()) if n else math.nan
    report = DefenseReport(
        experiment=cfg.name,
        defense=cfg.defense,
        attack=cfg.attack.kind,
        clean_acc=float((p_clean == y).double().mean()) if n else math.nan,
        robust_acc=robust,
        asr=1.0 - robust if n else math.nan,
        mean_iou=float(ious.mean()) if ious is not None and n else math.nan,
        runtime_s=time.perf_counter() - t0,
        stage_runtime_s=stages,
        rows=rows,
        config_hash=cfg.config_hash(),
    )
    if figures_dir is not None and figures > 0:
        save_quadriptychs(adv, da, Path(figures_dir), cfg.name, figures)
    return report


def _rgb(img: torch.Tensor) -> np.ndarray:
    a = img.detach().numpy()
    if a.ndim == 2:
        a = a[None]
    if a.shape[0] == 1:
        a = np.repeat(a, 3, axis=0)
    return a.transpose(1, 2, 0)


def quadriptych(x, diff, mask, restored, gap: int = 2) -> np.ndarray:
    """Input | difference heatmap | mask | defended, side by side with white gaps."""
    heat = heatmap(np.zeros(x.shape[-2:]) if diff is None else diff.detach().numpy())
    panels = [_rgb(x), heat.astype(np.float32), _rgb(mask.float()), _rgb(restored)]
    h = panels[0].shape[0]
    sep = np.ones((h, gap, 3), dtype=np.float32)
    out = [panels[0]]
    for p in panels[1:]:
        out += [sep, p]
    return np.concatenate(out, axis=1)


def save_quadriptychs(adv: AttackResult, applied: _Applied, out_dir: Path, name: str, count: int) -> list[Path]:
    """One PNG per sample; without a localizer the mask panel shows the attack's patch region."""
    paths = []
    for j in range(min(count, len(adv))):
        m = applied.mask[j] if applied.mask is not None else adv.gt_mask[j]
        d = applied.diff[j] if applied.diff is not None else None
        p = out_dir / f"{name}_{j:03d}.png"
        save_png(quadriptych(adv.x_adv[j], d, m, applied.out[j]), p)
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# Suites

SUITE_KEYS = {"name", "out_dir", "defenses", "attacks", "base", "expect", "figures"}
EXPECT_KEYS = {"defense", "attack", "metric", "min", "max"}


@dataclass
class SuiteResult:
    reports: list[DefenseReport]
    combined_csv: Path
    figures: list[Path]
    regressions: list[str]


def load_suite_config(path) -> dict:
    """Read and validate a JSON suite file.

    Keys: ``name``, ``out_dir``, ``defenses`` (list of names),
    ``attacks`` (list of attack-spec dicts), ``base`` (experiment fields
    shared by every cell), ``figures`` (quadriptychs per cell) and
    ``expect`` (threshold checks: defense, attack, metric, min and/or max).
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise MissingArtifactError(f"suite config not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"suite config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("suite config must be a JSON object")
    unknown = sorted(set(raw) - SUITE_KEYS)
    if unknown:
        raise ConfigError(f"unknown suite keys: {unknown}")
    bad = [d for d in raw.get("defenses", []) if d not in DEFENSES]
    if bad:
        raise ConfigError(f"unknown defense names: {bad}")
    for e in raw.get("expect", []):
        extra = sorted(set(e) - EXPECT_KEYS)
        if extra:
            raise ConfigError(f"unknown expect keys: {extra}")
        if e.get("metric") not in ("clean_acc", "robust_acc", "asr", "mean_iou"):
            raise ConfigError(f"unknown expect metric: {e.get('metric')!r}")
    base = raw.get("base", {})
    for k in ("defense", "attack", "name"):
        if k in base:
            raise ConfigError(f"base may not set {k!r}; it comes from the grid")
    ExperimentConfig.from_dict(base)  # key validation
    return raw


def suite_cells(raw: dict) -> list[ExperimentConfig]:
    base = dict(raw.get("base", {}))
    cells = []
    for a in raw.get("attacks", []):
        try:
            spec = AttackSpec(**a)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad attack spec {a}: {e}") from None
        for d in raw.get("defenses", []):
            cells.append(ExperimentConfig.from_dict({**base, "name": f"{d}__{spec.kind}", "defense": d, "attack": spec}))
    return cells


def check_expectations(reports: list[DefenseReport], expect: list[dict]) -> list[str]:
    failures = []
    for e in expect:
        for r in reports:
            if r.defense != e["defense"] or r.attack != e["attack"]:
                continue
            v = getattr(r, e["metric"])
            if "min" in e and not v >= e["min"]:
                failures.append(f"{r.experiment}: {e['metric']}={v:.4f} < {e['min']}")
            if "max" in e and not v <= e["max"]:
                failures.append(f"{r.experiment}: {e['metric']}={v:.4f} > {e['max']}")
    return failures


def run_experiment_suite(config_path) -> SuiteResult:
    """Run every defense x attack cell, write per-cell JSON reports, a combined CSV and figures."""
    raw = load_suite_config(config_path)
    out = Path(raw.get("out_dir") or Path(config_path).with_suffix(""))
    out.mkdir(parents=True, exist_ok=True)
    reports, figs = [], []
    nfig = int(raw.get("figures", 0))
    for cfg in suite_cells(raw):
        log.info("suite cell %s", cfg.name)
        r = evaluate_defense(cfg, figures_dir=out / "figures", figures=nfig)
        write_report(r, out / f"{cfg.name}.json", "json")
        reports.append(r)
        figs += sorted((out / "figures").glob(f"{cfg.name}_*.png")) if nfig else []
    combined = out / f"{raw.get('name', 'suite')}.csv"
    write_report(reports, combined, "csv")
    return SuiteResult(reports, combined, figs, check_expectations(reports, raw.get("expect", [])))


def summary_table(reports: list[DefenseReport]) -> str:
    """Fixed-width text table of the report columns."""
    cols = list(REPORT_COLUMNS)
    rows = [[str(getattr(r, c)) if isinstance(getattr(r, c), str) else f"{getattr(r, c):.4f}" for c in cols] for r in reports]
    widths = [max(len(c), *(len(row[i]) for row in rows)) if rows else len(c) for i, c in enumerate(cols)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, widths))  # noqa: E731
    return "\n".join([line(cols)] + [line(r) for r in rows])


def metrics_equal(a: DefenseReport, b: DefenseReport) -> bool:
    """Bit-exact comparison of everything except wall-clock timings."""
    keys = ("experiment", "defense", "attack", "clean_acc", "robust_acc", "asr", "mean_iou", "rows", "config_hash")
    same = lambda u, v: (u == v) or (isinstance(u, float) and isinstance(v, float) and math.isnan(u) and math.isnan(v))  # noqa: E731
    return all(same(getattr(a, k), getattr(b, k)) for k in keys)


__all__ = [
    "ConfigError", "MissingArtifactError", "ExperimentConfig", "SuiteResult",
    "baseline_jpeg", "baseline_smoothing", "median_smoothing_torch", "baseline_purify", "build_defense", "cached_attack",
    "evaluate_defense", "run_experiment_suite", "load_suite_config", "summary_table", "metrics_equal",
]  # fmt: skip
