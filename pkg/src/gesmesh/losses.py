"""Photometric and opacity losses with gradients."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
RGB_LAMBDA = 0.2


def _reflect(i: int, n: int) -> int:
    # symmetric (half-sample) reflection: d c b a | a b c d | d c b a
    period = 2 * n
    i = i % period
    return i if i < n else period - 1 - i


@lru_cache(maxsize=64)
def gaussian_filter_matrix(n: int, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Dense (n, n) operator applying a normalized 1D Gaussian with symmetric borders."""
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    w /= w.sum()
    A = np.zeros((n, n))
    for i in range(n):
        for k in range(size):
            A[i, _reflect(i + k - r, n)] += w[k]
    A.setflags(write=False)
    return A


def _blur(img, Ah, Aw):
    # img (H, W, C); rows then columns, each as one matrix product
    H, W, C = img.shape
    t = (Ah @ img.reshape(H, W * C)).reshape(H, W, C).transpose(1, 0, 2).reshape(W, H * C)
    return (Aw @ t).reshape(W, H, C).transpose(1, 0, 2)


def _blur_adjoint(img, Ah, Aw):
    H, W, C = img.shape
    t = (Ah.T @ img.reshape(H, W * C)).reshape(H, W, C).transpose(1, 0, 2).reshape(W, H * C)
    return (Aw.T @ t).reshape(W, H, C).transpose(1, 0, 2)


def ssim(x: np.ndarray, y: np.ndarray, return_grad: bool = False):
    """Mean SSIM over pixels and channels of two (H, W, C) images in [0, 1].

    With ``return_grad`` also returns d(mean SSIM)/dx.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    H, W = x.shape[:2]
    Ah, Aw = gaussian_filter_matrix(H), gaussian_filter_matrix(W)
    C = x.shape[2]
    b = _blur(np.concatenate([x, y, x * x, y * y, x * y], axis=2), Ah, Aw)
    mx, my, bxx, byy, bxy = (b[..., i * C:(i + 1) * C] for i in range(5))
    sxx = bxx - mx * mx
    syy = byy - my * my
    sxy = bxy - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    value = float(S.mean())
    if not return_grad:
        return value
    g = 1.0 / S.size
    # paired so the terms cancel exactly when x == y
    d_mx = g * S * ((2 * my / A1 - 2 * mx / B1) + (2 * mx / B2 - 2 * my / A2))
    d_mxx = -g * S / B2
    d_mxy = 2 * g * S / A2
    a = _blur_adjoint(np.concatenate([d_mx, d_mxx, d_mxy], axis=2), Ah, Aw)
    grad = a[..., :C] + 2 * x * a[..., C:2 * C] + y * a[..., 2 * C:]
    return value, grad


@dataclass
class RgbLoss:
    value: float
    l1: float
    ssim: float
    grad: np.ndarray


def loss_rgb(rendered: np.ndarray, target: np.ndarray, lam: float = RGB_LAMBDA) -> RgbLoss:
    """(1 - lam) * L1 + lam * (1 - SSIM) and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"dimension mismatch: rendered {rendered.shape} vs target {target.shape}")
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    s, gs = ssim(rendered, target, return_grad=True)
    grad = (1 - lam) * np.sign(diff) / diff.size - lam * gs.reshape(rendered.shape)
    return RgbLoss((1 - lam) * l1 + lam * (1 - s), l1, s, grad)


ENTROPY_CLAMP = 1e-6


def opacity_entropy_loss(opacity_logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary entropy of opacities and its gradient w.r.t. the logits."""
    z = np.asarray(opacity_logits, dtype=np.float64)
    if z.size == 0:
        return 0.0, np.zeros(0)
    a_raw = 1.0 / (1.0 + np.exp(-z))
    a = np.clip(a_raw, ENTROPY_CLAMP, 1 - ENTROPY_CLAMP)
    h = -(a * np.log(a) + (1 - a) * np.log(1 - a))
    inside = (a_raw > ENTROPY_CLAMP) & (a_raw < 1 - ENTROPY_CLAMP)
    dh_da = np.log(1 - a) - np.log(a)
    grad = np.where(inside, dh_da * a * (1 - a), 0.0) / z.size
    return float(h.mean()), grad


def psnr(x: np.ndarray, y: np.ndarray, cap: float = 100.0) -> float:
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))
