"""Prompt-tuning losses for localization, restoration and infrared restoration.

Inputs are torch tensors; images are (N, C, H, W) (a bare (H, W) map is
accepted where noted). Every loss reduces to a scalar by averaging over
the batch.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

EPS_CLAMP = 1e-6
DICE_EPS = 1e-6


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_nchw(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        return img[None, None]
    if img.dim() == 3:
        return img[:, None]
    return img


def loss_ce(M: torch.Tensor, M_soft: torch.Tensor) -> torch.Tensor:
    """Per-pixel binary cross-entropy, mean-reduced."""
    _same_shape(M, M_soft, "loss_ce")
    p = M_soft.clamp(EPS_CLAMP, 1 - EPS_CLAMP)
    M = M.to(p.dtype)
    return -(M * torch.log(p) + (1 - M) * torch.log1p(-p)).mean()


def loss_l1(x_r: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    _same_shape(x_r, x, "loss_l1")
    return (x_r - x).abs().mean()


def unit_normalize(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def perceptual_distance(x_r: torch.Tensor, x: torch.Tensor, clf, layers=None, weights=None) -> torch.Tensor:
    """Sum over feature taps of the spatially averaged squared distance
    between channel-unit-normalized activations, optionally channel-weighted.
    """
    _same_shape(x_r, x, "perceptual_distance")
    layers = list(clf.taps if layers is None else layers)
    feats = clf.features(torch.cat([x_r, x]), layers)
    total = x_r.new_zeros(())
    for i, f in enumerate(feats):
        fr, fc = unit_normalize(f).chunk(2)
        diff = fr - fc
        if weights is not None:
            diff = diff * weights[i].to(diff.dtype)[None, :, None, None]
        h, w = diff.shape[-2:]
        total = total + diff.pow(2).sum(dim=(1, 2, 3)).mean() / (h * w)
    return total


def _safe_sqrt(v: torch.Tensor) -> torch.Tensor:
    # exact zero (and zero gradient) on constant windows
    pos = v > 0
    return torch.where(pos, v.clamp_min(1e-30).sqrt(), torch.zeros_like(v))


def local_std(img: torch.Tensor, k: int = 3) -> torch.Tensor:
    """Population standard deviation of every k x k window (reflect-padded)."""
    if k % 2 == 0 or k < 1:
        raise ValueError("window size k must be odd")
    x = _as_nchw(img)
    n, c, h, w = x.shape
    p = k // 2
    padded = F.pad(x, (p, p, p, p), mode="reflect") if p else x
    win = F.unfold(padded, k).view(n, c, k * k, h * w)
    # shift by the centre pixel first: exact zeros on constant windows
    win = win - win[:, :, (k * k) // 2 : (k * k) // 2 + 1].detach()
    mu = win.mean(dim=2, keepdim=True)
    var = (win - mu).pow(2).mean(dim=2)
    return _safe_sqrt(var).view(n, c, h, w)


def local_uniformity(I_r: torch.Tensor, k: int = 3) -> torch.Tensor:
    """Mean over pixels of the local k x k standard deviation."""
    return local_std(I_r, k).mean()


def _gauss_window(size: int, sigma: float, dtype) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim(I: torch.Tensor, I_r: torch.Tensor, win: int = 7, sigma: float = 1.5, data_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM over valid 7x7 Gaussian windows (C1 = 0.01^2, C2 = 0.03^2 for unit range)."""
    _same_shape(I, I_r, "ssim")
    a, b = _as_nchw(I), _as_nchw(I_r)
    c = a.shape[1]
    k = _gauss_window(win, sigma, a.dtype)[None, None].repeat(c, 1, 1, 1)
    filt = lambda z: F.conv2d(z, k, groups=c)  # noqa: E731
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return (num / den).mean()


def loss_tnc(I: torch.Tensor, I_r: torch.Tensor, alpha: float = 0.4, beta: float = 0.6, k: int = 3) -> torch.Tensor:
    """Non-uniformity of the restored image plus lost structural similarity."""
    total = I_r.new_zeros(())
    if alpha:
        total = total + alpha * local_uniformity(I_r, k)
    if beta:
        total = total + beta * (1 - ssim(I, I_r))
    return total


SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=torch.float64)


def sobel_magnitude(I: torch.Tensor) -> torch.Tensor:
    x = _as_nchw(I)
    if x.shape[1] != 1:
        x = x.mean(dim=1, keepdim=True)
    kx = SOBEL_X.to(x.dtype)[None, None]
    ky = SOBEL_X.t().contiguous().to(x.dtype)[None, None]
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx, gy = F.conv2d(padded, kx), F.conv2d(padded, ky)
    return _safe_sqrt(gx * gx + gy * gy)


EDGE_FLOOR = 1e-6  # below this peak magnitude an image counts as flat


def sobel_edges(I: torch.Tensor, rel_threshold: float = 0.2, soft_tau: float = 0.05) -> torch.Tensor:
    """Binary edge map (N, 1, H, W): Sobel magnitude above ``rel_threshold`` of its maximum.

    When ``I`` requires grad the hard map carries the gradient of a sigmoid
    surrogate of the threshold (straight-through).
    """
    mag = sobel_magnitude(I)
    peak = mag.flatten(1).amax(dim=1)[:, None, None, None]
    hard = ((mag > rel_threshold * peak) & (peak > EDGE_FLOOR)).to(mag.dtype)
    if not mag.requires_grad:
        return hard
    rel = mag / (peak.detach() + 1e-12)
    soft = torch.sigmoid((rel - rel_threshold) / soft_tau)
    return hard + (soft - soft.detach())


def dice_loss(A: torch.Tensor, B: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    _same_shape(A, B, "dice_loss")
    a, b = _as_nchw(A).flatten(1), _as_nchw(B).flatten(1)
    inter = (a * b).sum(dim=1)
    return (1 - (2 * inter + eps) / (a.sum(dim=1) + b.sum(dim=1) + eps)).mean()


def loss_ie(I: torch.Tensor, I_r: torch.Tensor, gamma: float = 0.7, delta: float = 0.3) -> torch.Tensor:
    """Dice disagreement of Sobel edge maps (weight gamma) and of their complements (weight delta).

    The clean image's edges are constants; the restored image's edges pass a
    surrogate gradient.
    """
    _same_shape(I, I_r, "loss_ie")
    e = sobel_edges(I.detach())
    e_r = sobel_edges(I_r)
    total = I_r.new_zeros(())
    if gamma:
        total = total + gamma * dice_loss(e, e_r)
    if delta:
        total = total + delta * dice_loss(1 - e, 1 - e_r)
    return total
