"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 threshold regression in suite mode.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import bench
from .attacker import AttackSpec, run_attack
from .data_io import (
    Dataset,
    FormatError,
    InputError,
    load_checkpoint,
    load_dataset,
    read_report,
    save_checkpoint,
    save_dataset,
    save_png,
    write_report,
)
from .diffusion import TrainConfig, derive_seed, model_from_checkpoint, model_to_checkpoint, train_diffusion
from .restorer import DefenseConfig, defend
from .tuner import (
    IDC_TEMPLATES,
    TuneConfig,
    idc_from_checkpoint,
    idc_to_checkpoint,
    init_prompts,
    learn_idc_token,
    prompts_to_checkpoint,
    tune_prompts,
    write_history,
)
from .victims import ClassifierTrainConfig, classifier_from_checkpoint, classifier_to_checkpoint, to_tensor, train_classifier

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_REGRESSION = 0, 2, 3, 4
log = logging.getLogger("diffender")


class Missing(Exception):
    pass


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise Missing(f"not found: {p}")
    return p


def _dataset(path) -> Dataset:
    return load_dataset(_need(path))


def _model(path):
    return model_from_checkpoint(load_checkpoint(_need(path)))


def _classifier(path):
    return classifier_from_checkpoint(load_checkpoint(_need(path)))


def _images(ds: Dataset) -> torch.Tensor:
    return to_tensor(ds.images)


def _save_images(x: torch.Tensor, labels, path, filenames=()) -> None:
    imgs = x.detach().permute(0, 2, 3, 1).numpy().astype(np.float32)
    save_dataset(Dataset(imgs, np.asarray(labels, dtype=np.int64), "test", tuple(filenames)), path)


# --------------------------------------------------------------------------
# Verbs


def cmd_train_diffusion(a) -> int:
    ds = _dataset(a.data)
    cfg = TrainConfig(batch_size=a.batch_size, learn_rate=a.learn_rate, T=a.T)
    res = train_diffusion(ds, a.epochs, cfg, seed=a.seed)
    save_checkpoint(model_to_checkpoint(res.model, res.sched, {"epochs": a.epochs, "seed": a.seed}), a.out)
    print(f"saved {a.out} (final loss {res.losses[-1]:.4f}, {res.seconds:.0f}s)")
    return EXIT_OK


def cmd_train_classifier(a) -> int:
    ds = _dataset(a.data)
    test = _dataset(a.test) if a.test else None
    clf = train_classifier(ds, a.epochs, a.seed, test=test, config=ClassifierTrainConfig(width=a.width))
    save_checkpoint(classifier_to_checkpoint(clf), a.out)
    print(f"saved {a.out} (train acc {clf.train_acc:.4f}, test acc {clf.test_acc:.4f})")
    return EXIT_OK


def _attack_spec(a) -> AttackSpec:
    return AttackSpec(
        kind=a.kind, patch_fraction=a.patch_fraction, iterations=a.iterations, step_size=a.step_size,
        restarts=a.restarts, seed=a.seed, cold_max=a.cold_max,
    )  # fmt: skip


def cmd_attack(a) -> int:
    ds = _dataset(a.data)
    clf = _classifier(a.classifier)
    spec = _attack_spec(a)
    defense = None
    if spec.kind.startswith("bpda"):
        if not (a.diffusion and a.prompts):
            raise bench.ConfigError("adaptive attacks need --diffusion and --prompts")
        defense = bench.build_defense(
            bench.ExperimentConfig(defense="diffender", diffusion=a.diffusion, prompts=a.prompts),
            restore_steps=a.restore_steps,
        )
    x, y = _images(ds), torch.from_numpy(np.array(ds.labels))
    seeds = [derive_seed(spec.seed, i) for i in range(len(x))]
    r = run_attack(x, y, clf, spec, defense=defense, seeds=seeds)
    out = Path(a.out)
    _save_images(r.x_adv, ds.labels, out / "images", ds.filenames)
    _save_images(r.gt_mask[:, None], ds.labels, out / "masks", ds.filenames)
    meta = {"spec": spec.__dict__, "spec_hash": spec.spec_hash(), "success": r.success.tolist()}
    (out / "attack.json").write_text(json.dumps(meta, indent=2))
    print(f"attack success rate {r.success.float().mean():.4f} on {len(x)} images -> {out}")
    return EXIT_OK


def _fewshot(clean_dir, attacked_dir, shots: int):
    clean = _dataset(clean_dir)
    adv = _dataset(Path(attacked_dir) / "images")
    masks = _dataset(Path(attacked_dir) / "masks")
    if len(clean) != len(adv) or len(adv) != len(masks):
        raise bench.ConfigError("clean, attacked and mask sets differ in length")
    n = min(shots, len(clean))
    return _images(clean)[:n], _images(adv)[:n], (_images(masks)[:n, 0] > 0.5).float()


def cmd_tune_prompts(a) -> int:
    model, sched = _model(a.diffusion)
    clf = _classifier(a.classifier)
    batch = _fewshot(a.clean, a.attacked, a.shots)
    idc = idc_from_checkpoint(load_checkpoint(_need(a.idc))) if a.idc else None
    cfg = TuneConfig(
        steps=a.steps, learn_rate=a.learn_rate, shots=a.shots, alpha=a.alpha, beta=a.beta,
        gamma=a.gamma, delta=a.delta, infrared=a.infrared, seed=a.seed,
    )  # fmt: skip
    init = init_prompts(a.n_tokens, model.cfg.embed_dim, seed=a.seed, idc=idc)
    out = tune_prompts(batch, init, cfg, model, sched, clf)
    save_checkpoint(prompts_to_checkpoint(out, {"steps": a.steps, "infrared": a.infrared}), a.out)
    if a.history:
        write_history(out.history, a.history)
    print(f"saved {a.out} (loss {out.initial_loss:.4f} -> {out.final_loss:.4f})")
    return EXIT_OK


def cmd_learn_idc(a) -> int:
    model, sched = _model(a.diffusion)
    ds = _dataset(a.data)
    x = _images(ds)[: a.count]
    hist: list = []
    tok = learn_idc_token(x, model, sched, steps=a.steps, seed=a.seed, templates=IDC_TEMPLATES, history=hist)
    save_checkpoint(idc_to_checkpoint(tok, {"steps": a.steps, "images": len(x)}), a.out)
    if a.history:
        write_history(hist, a.history)
    print(f"saved {a.out}")
    return EXIT_OK


def cmd_defend(a) -> int:
    model, sched = _model(a.diffusion)
    from .tuner import prompts_from_checkpoint

    prompts = prompts_from_checkpoint(load_checkpoint(_need(a.prompts)))
    ds = _dataset(a.data)
    x = _images(ds)
    cfg = DefenseConfig(prompts.localizer_config(), a.restore_steps, a.gate_area)
    seeds = [derive_seed(a.seed, i) for i in range(len(x))]
    out = defend(x, prompts.pair(), cfg, model, sched, seeds)
    dest = Path(a.out)
    _save_images(out.restored, ds.labels, dest / "restored", ds.filenames)
    for i in range(len(x)):
        save_png(bench.quadriptych(x[i], out.diff[i], out.mask[i], out.restored[i]), dest / "figures" / f"{i:05d}.png")
    print(f"restored {int(out.gated.sum())}/{len(x)} images -> {dest}")
    return EXIT_OK


def cmd_evaluate(a) -> int:
    raw = json.loads(_need(a.config).read_text())
    cfg = bench.ExperimentConfig.from_dict(raw)
    r = bench.evaluate_defense(cfg, figures_dir=Path(a.out).parent / "figures" if a.figures else None, figures=a.figures)
    write_report(r, a.out, "json" if a.out.endswith(".json") else "csv")
    print(bench.summary_table([r]))
    return EXIT_OK


def cmd_suite(a) -> int:
    res = bench.run_experiment_suite(_need(a.config))
    print(bench.summary_table(res.reports))
    print(f"combined report: {res.combined_csv}")
    if res.regressions:
        for line in res.regressions:
            print(f"REGRESSION {line}", file=sys.stderr)
        return EXIT_REGRESSION
    return EXIT_OK


def cmd_report(a) -> int:
    reports = []
    for p in a.inputs:
        reports += read_report(_need(p))
    print(bench.summary_table(reports))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def _attack_args(p):
    p.add_argument("--kind", default="advp", choices=["advp", "lavan", "ir_cold", "bpda_advp", "bpda_lavan"])
    p.add_argument("--patch-fraction", type=float, default=0.05)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--step-size", type=float, default=AttackSpec.step_size)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--cold-max", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffender", description="Diffusion-based adversarial patch defense toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train-diffusion", help="train the pixel diffusion model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learn-rate", type=float, default=2e-3)
    p.add_argument("--T", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_diffusion)

    p = sub.add_parser("train-classifier", help="train a victim classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--test")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_classifier)

    p = sub.add_parser("attack", help="generate patch attacks; writes images/, masks/ and attack.json")
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diffusion")
    p.add_argument("--prompts")
    p.add_argument("--restore-steps", type=int, default=10)
    _attack_args(p)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("tune-prompts", help="few-shot tuning of the localization and restoration prompts")
    p.add_argument("--clean", required=True, help="dataset of clean images")
    p.add_argument("--attacked", required=True, help="output directory of the attack verb")
    p.add_argument("--diffusion", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--idc", help="domain token checkpoint (infrared)")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="CSV path for the loss trajectory")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--shots", type=int, default=8)
    p.add_argument("--n-tokens", type=int, default=16)
    p.add_argument("--learn-rate", type=float, default=1e-2)
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--beta", type=float, default=0.6)
    p.add_argument("--gamma", type=float, default=0.7)
    p.add_argument("--delta", type=float, default=0.3)
    p.add_argument("--infrared", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_tune_prompts)

    p = sub.add_parser("learn-idc", help="textual inversion of the infrared domain token")
    p.add_argument("--data", required=True)
    p.add_argument("--diffusion", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_learn_idc)

    p = sub.add_parser("defend", help="localize and restore patches in a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--diffusion", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--restore-steps", type=int, default=250)
    p.add_argument("--gate-area", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("evaluate", help="evaluate one experiment config (JSON)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="report path (.json or .csv)")
    p.add_argument("--figures", type=int, default=0)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("suite", help="run a defense x attack grid from a JSON suite file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_suite)

    p = sub.add_parser("report", help="print report files as a table")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (Missing, bench.MissingArtifactError, FileNotFoundError) as e:
        print(f"error: missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (bench.ConfigError, InputError, FormatError, ValueError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
