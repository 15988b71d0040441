"""Small pixel-space, text-conditioned denoising diffusion model.

Images are NCHW tensors in [0, 1]. A prompt is an (L, d) or (B, L, d)
matrix of word embeddings; the all-zeros matrix is the empty prompt and
yields exactly the unconditional prediction (the text encoder and the
key/value projections carry no bias).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_io import Checkpoint, Dataset

log = logging.getLogger(__name__)

X0_CLIP = (-0.5, 1.5)

# Shapes, colors and the template words used for captions and textual inversion.
VOCAB = (
    "a", "photo", "picture", "rendering", "of", "in", "the", "style",
    "circle", "square", "triangle", "plus", "ring", "diamond", "hbar", "vbar",
    "red", "green", "blue", "yellow", "white", "black",
)  # fmt: skip

EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


# --------------------------------------------------------------------------
# Schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray
    t_star: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.t_star < 1.0:
            raise ValueError("t_star must lie in (0, 1)")

    @property
    def T(self) -> int:
        return len(self.betas)

    def step_at(self, ratio: float) -> int:
        """Step index for a noise ratio in [0, 1]."""
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"noise ratio {ratio} outside [0, 1]")
        return int(round(ratio * (self.T - 1)))

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ValueError(f"step {t} outside [0, {self.T})")
        return t


def make_schedule(T: int = 250, schedule: str = "linear", t_star: float = 0.5) -> NoiseSchedule:
    if T < 2:
        raise ValueError("a schedule needs at least 2 steps")
    if schedule != "linear":
        raise ValueError(f"unsupported schedule {schedule!r}")
    betas = np.linspace(1e-4, 0.02, T, dtype=np.float64)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas), t_star)


def forward_diffuse(x0: torch.Tensor, t: int, noise: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    t = sched.check_step(t)
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def model_channels(model) -> int | None:
    cfg = getattr(model, "cfg", None)
    return getattr(cfg, "channels", None)


def lift_channels(x: torch.Tensor, model) -> torch.Tensor:
    """Repeat a single-channel batch to the model's channel count (gray as RGB)."""
    c = model_channels(model)
    if c is not None and x.shape[1] == 1 and c != 1:
        return x.repeat(1, c, 1, 1)
    return x


def _as_batch_prompt(prompt: torch.Tensor, batch: int) -> torch.Tensor:
    if prompt.dim() == 2:
        prompt = prompt.unsqueeze(0)
    if prompt.shape[0] == 1 and batch != 1:
        prompt = prompt.expand(batch, -1, -1)
    return prompt


def predict_eps(model: EpsModel, x_t: torch.Tensor, t: int, prompt: torch.Tensor) -> torch.Tensor:
    tt = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
    return model(x_t, tt, _as_batch_prompt(prompt, x_t.shape[0]).to(x_t.dtype))


def predict_x0_one_step(
    x_t: torch.Tensor, t: int, prompt: torch.Tensor, model: EpsModel, sched: NoiseSchedule
) -> torch.Tensor:
    """Algebraic x0 estimate from a single noise prediction, clipped to [-0.5, 1.5]."""
    t = sched.check_step(t)
    ab = float(sched.alpha_bar[t])
    eps = predict_eps(model, x_t, t, prompt)
    x0 = (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    return x0.clamp(*X0_CLIP)


# --------------------------------------------------------------------------
# Seeded noise


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


class NoiseSource:
    """Per-sample Gaussian streams so a batched call equals per-image calls."""

    def __init__(self, seeds: Sequence[int], stream: int = 0):
        self.gens = [torch.Generator().manual_seed(derive_seed(s, stream)) for s in seeds]

    @classmethod
    def for_batch(cls, seed, batch: int, stream: int = 0) -> "NoiseSource":
        return cls(per_sample_seeds(seed, batch), stream)

    def randn(self, shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
        return torch.stack([torch.randn(tuple(shape), generator=g, dtype=dtype) for g in self.gens])


def per_sample_seeds(seed, batch: int) -> list[int]:
    """An int seed expands to ``batch`` derived seeds; a sequence is used as is."""
    if isinstance(seed, (int, np.integer)):
        return [derive_seed(seed, i) for i in range(batch)] if batch > 1 else [int(seed)]
    seeds = [int(s) for s in seed]
    if len(seeds) != batch:
        raise ValueError(f"got {len(seeds)} seeds for a batch of {batch}")
    return seeds


# --------------------------------------------------------------------------
# Sampling


def respaced_steps(t_start: int, steps: int) -> list[int]:
    """Descending, de-duplicated step indices from ``t_start`` down to 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps == 1:
        return [t_start]
    ts = np.round(np.linspace(t_start, 0, steps)).astype(int)
    return list(dict.fromkeys(int(t) for t in ts))


def _posterior(
    x_t: torch.Tensor, x0: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule, noise: torch.Tensor
) -> torch.Tensor:
    ab_t, ab_p = float(sched.alpha_bar[t]), float(sched.alpha_bar[t_prev])
    beta = 1.0 - ab_t / ab_p
    c0 = math.sqrt(ab_p) * beta / (1.0 - ab_t)
    ct = math.sqrt(1.0 - beta) * (1.0 - ab_p) / (1.0 - ab_t)
    var = (1.0 - ab_p) / (1.0 - ab_t) * beta
    return c0 * x0 + ct * x_t + math.sqrt(var) * noise


def reverse_process(
    x_t: torch.Tensor,
    t_start: int,
    prompt: torch.Tensor,
    steps: int,
    model: EpsModel,
    sched: NoiseSchedule,
    noise: NoiseSource,
    known: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
    known_noise: NoiseSource | None = None,
) -> torch.Tensor:
    """Ancestral sampling over ``steps`` respaced steps starting at ``t_start``.

    With ``known``/``mask`` given, the region where mask == 0 is replaced
    after every step by ``known`` noised to the next step's level.
    Returns the final x0 prediction (not clipped to [0, 1]).
    """
    ts = respaced_steps(t_start, steps)
    shape = x_t.shape[1:]
    x = x_t
    for k, t in enumerate(ts):
        x0 = predict_x0_one_step(x, t, prompt, model, sched)
        if k == len(ts) - 1:
            x = x0
            break
        t_prev = ts[k + 1]
        x = _posterior(x, x0, t, t_prev, sched, noise.randn(shape, x.dtype))
        if known is not None:
            assert known_noise is not None and mask is not None
            known_t = forward_diffuse(known, t_prev, known_noise.randn(shape, x.dtype), sched)
            x = mask * x + (1 - mask) * known_t
    return x


def prior_sample(noise: NoiseSource, shape, model: EpsModel, sched: NoiseSchedule, dtype=torch.float32) -> torch.Tensor:
    """Draw x_T. alpha_bar[T-1] is far from zero, so the prior is shifted by
    sqrt(alpha_bar) times the model's data mean (zero for models without one)."""
    x = noise.randn(shape, dtype)
    mean = getattr(model, "data_mean", None)
    if mean is not None:
        x = x + math.sqrt(float(sched.alpha_bar[-1])) * mean.to(dtype).view(1, -1, 1, 1)
    return x


def sample(
    prompt: torch.Tensor,
    steps: int,
    model: EpsModel,
    sched: NoiseSchedule,
    seed,
    shape: Sequence[int] = (3, 32, 32),
    batch: int = 1,
) -> torch.Tensor:
    """Generate ``batch`` images from pure noise; deterministic in ``seed``."""
    noise = NoiseSource.for_batch(seed, batch)
    x_T = prior_sample(noise, shape, model, sched)
    with torch.no_grad():
        x = reverse_process(x_T, sched.T - 1, prompt, steps, model, sched, noise)
    return x.clamp(0.0, 1.0)


def inpaint(
    x: torch.Tensor,
    mask: torch.Tensor,
    prompt: torch.Tensor,
    steps: int,
    model: EpsModel,
    sched: NoiseSchedule,
    seed,
) -> torch.Tensor:
    """Regenerate the region where ``mask`` == 1, keep the rest bit-exact.

    ``mask`` is (N, 1, H, W) with hard {0, 1} values. Sampling noise uses
    the same streams as :func:`sample`, so an all-ones mask reproduces it.
    """
    if mask.dim() == 3:
        mask = mask.unsqueeze(1)
    mask = mask.to(x.dtype)
    if not bool((mask > 0).any()):
        return x.clone()
    batch = x.shape[0]
    seeds = per_sample_seeds(seed, batch)
    noise = NoiseSource(seeds)
    known_noise = NoiseSource(seeds, stream=1)
    x_T = prior_sample(noise, x.shape[1:], model, sched, x.dtype)
    with torch.no_grad():
        gen = reverse_process(
            x_T, sched.T - 1, prompt, steps, model, sched, noise,
            known=x, mask=mask, known_noise=known_noise,
        )  # fmt: skip
    gen = gen.clamp(0.0, 1.0)
    return torch.where(mask > 0.5, gen, x)


# --------------------------------------------------------------------------
# Network


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TextEncoder(nn.Module):
    """Bias-free residual MLP over word embeddings: zeros map to zeros."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, 2 * dim, bias=False)
        self.fc2 = nn.Linear(2 * dim, dim, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens + self.fc2(F.gelu(self.fc1(tokens)))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, ctx_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(ctx_dim, channels, bias=False)
        self.v = nn.Linear(ctx_dim, channels, bias=False)
        self.out = nn.Linear(channels, channels, bias=False)

    def forward(self, x, ctx):
        b, c, h, w = x.shape
        hd = c // self.heads
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))
        q = q.view(b, h * w, self.heads, hd).transpose(1, 2)
        k = self.k(ctx).view(b, -1, self.heads, hd).transpose(1, 2)
        v = self.v(ctx).view(b, -1, self.heads, hd).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, h * w, c)
        return x + self.out(y).transpose(1, 2).view(b, c, h, w)


@dataclass
class ModelConfig:
    channels: int = 3
    base: int = 32
    embed_dim: int = 128
    heads: int = 4
    max_tokens: int = 32

    def to_metadata(self) -> dict[str, str]:
        return {f"model.{k}": str(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "ModelConfig":
        kw = {k[6:]: int(v) for k, v in meta.items() if k.startswith("model.")}
        return cls(**kw)


class DenoiserModel(nn.Module):
    """U-shaped noise predictor with cross-attention to prompt tokens.

    32x32 -> 16x16 -> 8x8 and back; cross-attention at 16x16 and 8x8.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        c, b, d = cfg.channels, cfg.base, cfg.embed_dim
        tdim = 4 * b
        self.word_embedding = nn.Embedding(len(VOCAB), d)
        nn.init.normal_(self.word_embedding.weight, std=1.0)
        # per-channel training-data mean, used to center the sampling prior
        self.register_buffer("data_mean", torch.zeros(c))
        self.text_encoder = TextEncoder(d)
        self.time_mlp = nn.Sequential(nn.Linear(b, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(c, b, 3, padding=1)
        self.down1 = ResBlock(b, b, tdim)
        self.pool1 = nn.Conv2d(b, 2 * b, 3, stride=2, padding=1)
        self.down2 = ResBlock(2 * b, 2 * b, tdim)
        self.attn2 = CrossAttention(2 * b, d, cfg.heads)
        self.pool2 = nn.Conv2d(2 * b, 2 * b, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * b, 2 * b, tdim)
        self.attn_mid = CrossAttention(2 * b, d, cfg.heads)
        self.up2 = ResBlock(4 * b, 2 * b, tdim)
        self.attn_up2 = CrossAttention(2 * b, d, cfg.heads)
        self.up1 = ResBlock(3 * b, b, tdim)
        self.norm_out = nn.GroupNorm(8, b)
        self.conv_out = nn.Conv2d(b, c, 3, padding=1)

    def embed_words(self, words: Sequence[str]) -> torch.Tensor:
        idx = torch.tensor([VOCAB.index(w) for w in words], dtype=torch.long)
        return self.word_embedding(idx)

    def forward(self, x: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-2] > self.cfg.max_tokens:
            raise ValueError(f"prompt has {tokens.shape[-2]} tokens, capacity is {self.cfg.max_tokens}")
        ctx = self.text_encoder(tokens)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base))
        h0 = self.down1(self.conv_in(x), temb)
        h1 = self.pool1(h0)
        h1 = self.attn2(self.down2(h1, temb), ctx)
        h = self.pool2(h1)
        h = self.attn_mid(self.mid(h, temb), ctx)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.attn_up2(self.up2(torch.cat([h, h1], 1), temb), ctx)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1(torch.cat([h, h0], 1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def empty_prompt(model: DenoiserModel, n: int = 16) -> torch.Tensor:
    return torch.zeros(n, model.cfg.embed_dim)


def caption_tokens(model: DenoiserModel, words: Sequence[str], length: int | None = None) -> torch.Tensor:
    """Word embeddings for ``words``, zero-padded to ``length`` tokens."""
    with torch.no_grad():
        emb = model.embed_words(words)
    if length is not None and length > len(words):
        emb = torch.cat([emb, emb.new_zeros(length - len(words), emb.shape[1])])
    return emb


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def model_to_checkpoint(model: DenoiserModel, sched: NoiseSchedule, extra: dict | None = None) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    meta = model.cfg.to_metadata()
    meta.update({"schedule.T": str(sched.T), "schedule.kind": "linear", "schedule.t_star": repr(sched.t_star)})
    meta.update({k: str(v) for k, v in (extra or {}).items()})
    return Checkpoint("diffusion", params, meta)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[DenoiserModel, NoiseSchedule]:
    if ckpt.kind != "diffusion":
        raise ValueError(f"expected a diffusion checkpoint, got {ckpt.kind!r}")
    model = DenoiserModel(ModelConfig.from_metadata(ckpt.metadata))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.parameters.items()})
    sched = make_schedule(int(ckpt.metadata["schedule.T"]), t_star=float(ckpt.metadata["schedule.t_star"]))
    return freeze(model), sched


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    batch_size: int = 64
    learn_rate: float = 2e-3
    weight_decay: float = 0.0
    ema_decay: float = 0.995
    uncond_prob: float = 0.2
    # chance that an uncaptioned training image gets a random anomaly patch
    anomaly_prob: float = 0.5
    max_steps: int | None = None
    T: int = 250
    model: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class TrainedDiffusion:
    model: DenoiserModel
    sched: NoiseSchedule
    losses: list[float]  # entry 0 is the loss before any update
    seconds: float = 0.0


def training_captions(labels: np.ndarray, colors: Sequence[str] | None, rng: np.random.Generator):
    from .shapes import CLASSES

    nouns = ("photo", "picture", "rendering")
    out = []
    for i, lab in enumerate(labels):
        if lab < 0:  # uncaptioned image
            out.append([])
            continue
        words = ["a", nouns[rng.integers(3)], "of", "a"]
        if colors is not None and colors[i] is not None and rng.random() < 0.5:
            words.append(colors[i])
        words.append(CLASSES[int(lab)])
        out.append(words)
    return out


def paste_anomalies(images: torch.Tensor, rng: np.random.Generator, area=(0.02, 0.08)) -> torch.Tensor:
    """Paste one random rectangle of uniform noise or a solid color into each image."""
    out = images.clone()
    n, c, h, w = images.shape
    for i in range(n):
        frac, aspect = rng.uniform(*area), np.exp(rng.uniform(-0.7, 0.7))
        ph = int(np.clip(round(np.sqrt(frac * h * w * aspect)), 2, h))
        pw = int(np.clip(round(frac * h * w / ph), 2, w))
        y, x = rng.integers(0, h - ph + 1), rng.integers(0, w - pw + 1)
        if rng.random() < 0.6:
            patch = rng.random((c, ph, pw))
        else:
            patch = np.broadcast_to(rng.random((c, 1, 1)), (c, ph, pw))
        out[i, :, y : y + ph, x : x + pw] = torch.from_numpy(np.ascontiguousarray(patch)).to(images.dtype)
    return out


def _caption_batch(model: DenoiserModel, captions, length: int) -> torch.Tensor:
    idx = torch.zeros(len(captions), length, dtype=torch.long)
    valid = torch.zeros(len(captions), length, 1)
    for i, words in enumerate(captions):
        idx[i, : len(words)] = torch.tensor([VOCAB.index(w) for w in words])
        valid[i, : len(words)] = 1.0
    return model.word_embedding(idx) * valid


def diffusion_loss(model, x0, t, noise, tokens, sched) -> torch.Tensor:
    ab = torch.as_tensor(sched.alpha_bar, dtype=x0.dtype)[t][:, None, None, None]
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
    return F.mse_loss(model(x_t, t, tokens), noise)


def train_diffusion(
    dataset: Dataset,
    epochs: int,
    config: TrainConfig | None = None,
    seed: int = 0,
    colors: Sequence[str] | None = None,
    init: DenoiserModel | None = None,
) -> TrainedDiffusion:
    """Fit the noise predictor with the standard epsilon-MSE objective.

    Captions are built from labels (and ``colors`` when given); with
    probability ``uncond_prob`` the prompt is dropped to the empty prompt.
    Uncaptioned samples get a random anomaly patch with probability
    ``anomaly_prob``. ``init`` resumes from existing weights.
    The returned model holds EMA weights. ``losses[0]`` is the loss of the
    untrained model on one batch; later entries are per-epoch means (or
    per-chunk means when ``max_steps`` cuts training short).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg = config or TrainConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = DenoiserModel(cfg.model)
    if init is not None:
        model.load_state_dict(init.state_dict())
    ema = DenoiserModel(cfg.model)
    ema.load_state_dict(model.state_dict())
    freeze(ema)
    sched = make_schedule(cfg.T)
    images = torch.from_numpy(np.ascontiguousarray(dataset.images.transpose(0, 3, 1, 2))).float()
    n = len(images)
    length = 17
    for m in (model, ema):
        m.data_mean.copy_(images.mean((0, 2, 3)))

    def batch_loss(idx):
        caps = training_captions(dataset.labels[idx], None if colors is None else [colors[i] for i in idx], rng)
        tokens = _caption_batch(model, caps, length)
        drop = torch.from_numpy(rng.random(len(idx)) < cfg.uncond_prob)
        tokens = torch.where(drop[:, None, None], torch.zeros_like(tokens), tokens)
        x0 = images[idx]
        # only the unconditional branch ever sees anomalies, so captions act as a clean-image prior
        uncond = drop.numpy() | (dataset.labels[idx] < 0)
        hit = np.flatnonzero(uncond & (rng.random(len(idx)) < cfg.anomaly_prob))
        if len(hit):
            x0 = x0.clone()
            x0[hit] = paste_anomalies(x0[hit], rng)
        t = torch.from_numpy(rng.integers(0, sched.T, size=len(idx)))
        noise = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32))
        return diffusion_loss(model, x0, t, noise, tokens, sched)

    start = time.perf_counter()
    with torch.no_grad():
        losses = [float(batch_loss(rng.permutation(n)[: cfg.batch_size]))]
    if epochs <= 0:
        return TrainedDiffusion(freeze(model), sched, losses, time.perf_counter() - start)

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learn_rate, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.max_steps or epochs * steps_per_epoch
    sched_lr = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.learn_rate, total_steps=total, pct_start=0.05)
    step = 0
    model.train()
    while step < total:
        perm = rng.permutation(n)
        running = []
        for i in range(0, n if n >= cfg.batch_size else 1, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size] if n >= cfg.batch_size else rng.integers(0, n, cfg.batch_size)
            loss = batch_loss(idx)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched_lr.step()
            with torch.no_grad():
                decay = min(cfg.ema_decay, (1 + step) / (10 + step))
                for pe, pm in zip(ema.parameters(), model.parameters()):
                    pe.mul_(decay).add_(pm.detach(), alpha=1 - decay)
            running.append(loss.item())
            step += 1
            if step >= total:
                break
        losses.append(float(np.mean(running)))
        log.info("diffusion epoch %d loss %.4f (%.0fs)", len(losses) - 1, losses[-1], time.perf_counter() - start)
    return TrainedDiffusion(ema, sched, losses, time.perf_counter() - start)
