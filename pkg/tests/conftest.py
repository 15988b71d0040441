import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from diffender.diffusion import DenoiserModel, ModelConfig, freeze, make_schedule


def fd_check(fn, x: torch.Tensor, probes: int = 20, h: float = 1e-6, seed: int = 0, rtol: float = 1e-3):
    """Compare autograd with central finite differences at ``probes`` random coordinates.

    Returns the largest relative error seen.
    """
    x = x.detach().double().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    rng = np.random.default_rng(seed)
    flat = x.detach().flatten()
    worst = 0.0
    for idx in rng.choice(flat.numel(), size=min(probes, flat.numel()), replace=False):
        xp, xm = flat.clone(), flat.clone()
        xp[idx] += h
        xm[idx] -= h
        with torch.no_grad():
            fd = (fn(xp.view_as(x)) - fn(xm.view_as(x))).item() / (2 * h)
        ad = g.flatten()[idx].item()
        err = abs(fd - ad) / max(abs(fd), abs(ad), 1e-7)
        worst = max(worst, err if max(abs(fd), abs(ad)) > 1e-7 else 0.0)
    return worst


class ToyNet(nn.Module):
    """Two-layer conv net with named taps, for loop oracles."""

    taps = ("l1", "l2")

    def __init__(self, cin=2, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.c1 = nn.Conv2d(cin, 3, 3, padding=1)
        self.c2 = nn.Conv2d(3, 2, 3, padding=1)

    def features(self, x, layers):
        a = F.relu(self.c1(x))
        b = torch.tanh(self.c2(a))
        acts = {"l1": a, "l2": b}
        return [acts[l] for l in layers]


class PromptBlindModel(nn.Module):
    """Noise predictor that ignores the prompt entirely."""

    def __init__(self, channels=3):
        super().__init__()
        self.cfg = ModelConfig(channels=channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, t, tokens):
        return 0.1 * self.conv(x)


@pytest.fixture(scope="session")
def tiny_model():
    torch.manual_seed(0)
    return freeze(DenoiserModel(ModelConfig(base=16, embed_dim=32, heads=2))), make_schedule(50)


@pytest.fixture(scope="session")
def blind_model():
    torch.manual_seed(0)
    return freeze(PromptBlindModel()), make_schedule(50)


@pytest.fixture(scope="session")
def shapes_clf():
    """Small classifier trained briefly on the shapes set, with held-out data."""
    from diffender.shapes import make_shapes
    from diffender.victims import ClassifierTrainConfig, predict, to_tensor, train_classifier

    train, test = make_shapes(1500, 0), make_shapes(128, 1, split="test")
    clf = train_classifier(train, 4, seed=0, test=test, config=ClassifierTrainConfig(batch_size=32))
    x = to_tensor(test.images)
    y = torch.from_numpy(np.array(test.labels))
    keep = torch.from_numpy(predict(clf, x)) == y
    return clf, x[keep], y[keep]


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory, shapes_clf, tiny_model):
    """Evaluation set, classifier, diffusion model and prompts on disk, plus base experiment fields."""
    from diffender.attacker import AttackSpec
    from diffender.data_io import Dataset, save_checkpoint, save_dataset
    from diffender.diffusion import model_to_checkpoint
    from diffender.tuner import init_prompts, prompts_to_checkpoint
    from diffender.victims import classifier_to_checkpoint

    clf, x, y = shapes_clf
    root = tmp_path_factory.mktemp("artifacts")
    imgs = x[:6].permute(0, 2, 3, 1).numpy().copy()
    save_dataset(Dataset(imgs, y[:6].numpy().copy(), "test"), root / "eval")
    save_checkpoint(classifier_to_checkpoint(clf), root / "clf.ckpt")
    model, sched = tiny_model
    save_checkpoint(model_to_checkpoint(model, sched), root / "diff.ckpt")
    save_checkpoint(prompts_to_checkpoint(init_prompts(d=32)), root / "prompts.ckpt")
    base = dict(
        eval_data=str(root / "eval"), classifier=str(root / "clf.ckpt"), diffusion=str(root / "diff.ckpt"),
        prompts=str(root / "prompts.ckpt"), cache_dir=str(root / "cache"), num_eval_images=4,
        restore_steps=2, attack=AttackSpec(iterations=30),
    )  # fmt: skip
    return root, base


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
