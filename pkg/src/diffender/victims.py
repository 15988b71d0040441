"""Victim classifier; its intermediate activations also feed the perceptual loss."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_io import Checkpoint, Dataset

log = logging.getLogger(__name__)

TAPS = ("block1", "block2", "block3", "block4")


class Classifier(nn.Module):
    """Four conv-BN-ReLU blocks (the last three max-pooled), global average pooling, linear head.

    Feature taps sit after each block: for a 32x32 input their (H, W, C)
    shapes are (32, 32, w), (16, 16, 2w), (8, 8, 4w), (4, 4, 4w).
    """

    taps = TAPS

    def __init__(self, channels: int = 3, num_classes: int = 8, width: int = 16, size: int = 32):
        super().__init__()
        self.channels, self.num_classes, self.width, self.size = channels, num_classes, width, size
        w = width
        self.conv1 = nn.Conv2d(channels, w, 3, padding=1)
        self.conv2 = nn.Conv2d(w, 2 * w, 3, padding=1)
        self.conv3 = nn.Conv2d(2 * w, 4 * w, 3, padding=1)
        self.conv4 = nn.Conv2d(4 * w, 4 * w, 3, padding=1)
        self.bn1, self.bn2 = nn.BatchNorm2d(w), nn.BatchNorm2d(2 * w)
        self.bn3, self.bn4 = nn.BatchNorm2d(4 * w), nn.BatchNorm2d(4 * w)
        self.head = nn.Linear(4 * w, num_classes)
        self.train_acc = float("nan")
        self.test_acc = float("nan")

    @property
    def tap_shapes(self) -> dict[str, tuple[int, int, int]]:
        s, w = self.size, self.width
        return {
            "block1": (s, s, w),
            "block2": (s // 2, s // 2, 2 * w),
            "block3": (s // 4, s // 4, 4 * w),
            "block4": (s // 8, s // 8, 4 * w),
        }

    def _blocks(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        yield "block1", h
        h = F.max_pool2d(F.relu(self.bn2(self.conv2(h))), 2)
        yield "block2", h
        h = F.max_pool2d(F.relu(self.bn3(self.conv3(h))), 2)
        yield "block3", h
        h = F.max_pool2d(F.relu(self.bn4(self.conv4(h))), 2)
        yield "block4", h

    def _check(self, x: torch.Tensor):
        if x.dim() != 4 or tuple(x.shape[1:]) != (self.channels, self.size, self.size):
            raise ValueError(f"expected (N, {self.channels}, {self.size}, {self.size}) input, got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        for _, h in self._blocks(x):
            pass
        return self.head(h.mean(dim=(2, 3)))

    def features(self, x: torch.Tensor, layers) -> list[torch.Tensor]:
        unknown = [l for l in layers if l not in TAPS]
        if unknown:
            raise ValueError(f"unknown feature taps {unknown}; available {TAPS}")
        if not layers:
            return []
        self._check(x)
        acts = {}
        last = max(TAPS.index(l) for l in layers)
        for i, (name, h) in enumerate(self._blocks(x)):
            acts[name] = h
            if i == last:
                break
        return [acts[l] for l in layers]


def classify(clf: Classifier, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Labels (N,) and logits (N, K); a single CHW image is accepted too."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    with torch.no_grad():
        logits = clf(x.to(next(clf.parameters()).dtype))
    labels = logits.argmax(dim=1)
    return (labels[0], logits[0]) if single else (labels, logits)


def features(clf: Classifier, x: torch.Tensor, layers) -> list[torch.Tensor]:
    return clf.features(x, list(layers))


def predict(clf: Classifier, images: torch.Tensor, batch: int = 256) -> np.ndarray:
    out = [classify(clf, images[i : i + batch])[0] for i in range(0, len(images), batch)]
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) numpy images to an (N, C, H, W) float32 tensor."""
    return torch.from_numpy(np.array(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2), order="C"))


@dataclass
class ClassifierTrainConfig:
    batch_size: int = 128
    learn_rate: float = 3e-3
    width: int = 16


def train_classifier(
    dataset: Dataset,
    epochs: int,
    seed: int = 0,
    test: Dataset | None = None,
    num_classes: int | None = None,
    config: ClassifierTrainConfig | None = None,
) -> Classifier:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg = config or ClassifierTrainConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    k = num_classes or int(dataset.labels.max()) + 1
    h, w, c = dataset.shape
    clf = Classifier(c, k, cfg.width, h)
    x = to_tensor(dataset.images)
    y = torch.from_numpy(np.array(dataset.labels, dtype=np.int64))
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.learn_rate)
    per_epoch = -(-len(x) // cfg.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, cfg.learn_rate, total_steps=max(1, epochs * per_epoch))
    start = time.perf_counter()
    for epoch in range(epochs):
        clf.train()
        perm = torch.from_numpy(rng.permutation(len(x)))
        for i in range(0, len(x), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            loss = F.cross_entropy(clf(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
        log.info("classifier epoch %d loss %.4f (%.0fs)", epoch, loss.item(), time.perf_counter() - start)
    clf.eval()
    for p in clf.parameters():
        p.requires_grad_(False)
    clf.train_acc = float((predict(clf, x) == dataset.labels).mean())
    if test is not None and len(test):
        clf.test_acc = float((predict(clf, to_tensor(test.images)) == test.labels).mean())
    return clf


def classifier_to_checkpoint(clf: Classifier) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in clf.state_dict().items()}
    meta = {
        "channels": clf.channels,
        "num_classes": clf.num_classes,
        "width": clf.width,
        "size": clf.size,
        "train_acc": repr(clf.train_acc),
        "test_acc": repr(clf.test_acc),
    }
    return Checkpoint("classifier", params, meta)


def classifier_from_checkpoint(ckpt: Checkpoint) -> Classifier:
    if ckpt.kind != "classifier":
        raise ValueError(f"expected a classifier checkpoint, got {ckpt.kind!r}")
    m = ckpt.metadata
    clf = Classifier(int(m["channels"]), int(m["num_classes"]), int(m["width"]), int(m["size"]))
    clf.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.parameters.items()})
    clf.train_acc, clf.test_acc = float(m["train_acc"]), float(m["test_acc"])
    clf.eval()
    for p in clf.parameters():
        p.requires_grad_(False)
    return clf
