"""Desk-scale diffusion-based defense against adversarial patches.

A small pixel-space diffusion model localizes patches from the gap
between prompt-conditioned and unconditional one-step denoising, then
inpaints the localized region. Prompts are tuned few-shot; an infrared
extension adds a learned domain token and edge/uniformity losses.
"""

from .attacker import AttackResult, AttackSpec, run_attack
from .data_io import Checkpoint, Dataset, DefenseReport, load_checkpoint, load_dataset, save_checkpoint
from .diffusion import DenoiserModel, NoiseSchedule, inpaint, make_schedule, sample
from .localizer import LocalizerConfig, localize
from .restorer import DefenseConfig, DefenseOutput, DiffenderDefense, defend, restore
from .tuner import LearnablePrompts, TuneConfig, learn_idc_token, tune_prompts
from .victims import Classifier, train_classifier

__version__ = "0.1.0"

__all__ = [
    "AttackResult", "AttackSpec", "run_attack",
    "Checkpoint", "Dataset", "DefenseReport", "load_checkpoint", "load_dataset", "save_checkpoint",
    "DenoiserModel", "NoiseSchedule", "inpaint", "make_schedule", "sample",
    "LocalizerConfig", "localize",
    "DefenseConfig", "DefenseOutput", "DiffenderDefense", "defend", "restore",
    "LearnablePrompts", "TuneConfig", "learn_idc_token", "tune_prompts",
    "Classifier", "train_classifier",
]  # fmt: skip
