"""Image quality metrics for the evaluation protocol: PSNR and SSIM."""

import numpy as np

PSNR_CAP_DB = 99.0
_SSIM_WINDOW = 8
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def mse_to_db(mse):
    """PSNR in dB for a given mean squared error (peak value 1)."""
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * np.log10(mse))


def psnr(a, b):
    """Peak signal-to-noise ratio between float images in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(mse_to_db(np.mean((a - b) ** 2)))


def _luminance(img):
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def ssim(a, b):
    """Structural similarity over non-overlapping 8x8 luminance windows."""
    la, lb = _luminance(a), _luminance(b)
    if la.shape != lb.shape:
        raise ValueError(f"image shapes differ: {la.shape} vs {lb.shape}")
    h, w = la.shape
    win = _SSIM_WINDOW
    if h < win or w < win:
        raise ValueError(f"image {la.shape} smaller than the {win}x{win} SSIM window")
    hh, ww = h - h % win, w - w % win
    blocks_a = la[:hh, :ww].reshape(hh // win, win, ww // win, win).transpose(0, 2, 1, 3)
    blocks_b = lb[:hh, :ww].reshape(hh // win, win, ww // win, win).transpose(0, 2, 1, 3)
    blocks_a = blocks_a.reshape(-1, win * win)
    blocks_b = blocks_b.reshape(-1, win * win)
    mu_a = blocks_a.mean(axis=1)
    mu_b = blocks_b.mean(axis=1)
    da = blocks_a - mu_a[:, None]
    db = blocks_b - mu_b[:, None]
    var_a = (da * da).mean(axis=1)
    var_b = (db * db).mean(axis=1)
    cov = (da * db).mean(axis=1)
    score = ((2 * mu_a * mu_b + _SSIM_C1) * (2 * cov + _SSIM_C2)) / \
        ((mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2))
    return float(score.mean())
