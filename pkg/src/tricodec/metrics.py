"""Image quality metrics: PSNR, SSIM, MS-SSIM.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5, K1=0.01,
K2=0.03) over valid positions, averaged across channels. MS-SSIM uses
the usual five scales with weights (0.0448, 0.2856, 0.3001, 0.2363,
0.1333); on desk-scale images the window shrinks to fit and trailing
scales that would collapse below 2 pixels are dropped with the weights
renormalized.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

PSNR_CAP = 99.0
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def psnr(img_a, img_b):
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size, sigma=1.5):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    return np.outer(k, k)


def _window_conv(img, kernel):
    """'valid' 2-D convolution of (H,W) with a small kernel."""
    kh, kw = kernel.shape
    win = np.lib.stride_tricks.sliding_window_view(img, (kh, kw))
    return np.einsum("ijkl,kl->ij", win, kernel)


def _ssim_components(a, b, window):
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    kernel = _gaussian_kernel(window)
    mu_a = _window_conv(a, kernel)
    mu_b = _window_conv(b, kernel)
    sa = _window_conv(a * a, kernel) - mu_a ** 2
    sb = _window_conv(b * b, kernel) - mu_b ** 2
    sab = _window_conv(a * b, kernel) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * sab + c2) / (sa + sb + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _fit_window(h, w):
    win = min(11, h, w)
    return win if win % 2 else win - 1


def ssim(img_a, img_b):
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = _fit_window(*a.shape[:2])
    vals = [_ssim_components(a[:, :, c], b[:, :, c], win)[0]
            for c in range(a.shape[2])]
    return float(np.mean(vals))


def _downsample2(img):
    h, w = img.shape[:2]
    img = img[:h - h % 2, :w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2]
                   + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(img_a, img_b):
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"ms_ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    n_scales = len(MS_WEIGHTS)
    size = min(a.shape[0], a.shape[1])
    while n_scales > 1 and size // (2 ** (n_scales - 1)) < 2:
        n_scales -= 1
    weights = np.asarray(MS_WEIGHTS[:n_scales])
    weights = weights / weights.sum()
    mcs = []
    value = None
    for scale in range(n_scales):
        win = _fit_window(*a.shape[:2])
        lum_cs = [_ssim_components(a[:, :, c], b[:, :, c], win)
                  for c in range(a.shape[2])]
        ss = np.mean([x[0] for x in lum_cs])
        cs = np.mean([x[1] for x in lum_cs])
        if scale == n_scales - 1:
            value = ss
        else:
            mcs.append(cs)
            a = np.stack([_downsample2(a[:, :, c]) for c in range(a.shape[2])],
                         axis=2)
            b = np.stack([_downsample2(b[:, :, c]) for c in range(b.shape[2])],
                         axis=2)
    # negative similarity values are clamped before the weighted powers
    out = max(value, 0.0) ** weights[-1]
    for w, c in zip(weights[:-1], mcs):
        out *= max(c, 0.0) ** w
    return float(out)
