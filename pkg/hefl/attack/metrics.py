"""
Full-reference image similarity: universal quality index (UQI),
multi-scale structural similarity (MS-SSIM) and pixel-domain visual
information fidelity (VIF).

Images are ``(C, H, W)`` or ``(H, W)`` arrays with values in ``[0, 1]``.
Multi-channel scores are the mean of the per-channel scores.
"""

from typing import Callable, List

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from hefl.errors import ShapeError

UQI_WINDOW = 8
UQI_DEGENERATE = 1e-18

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_SIGMA = 1.5
MSSSIM_RADIUS = 5
MSSSIM_MIN_SIDE = 8
K1, K2 = 0.01, 0.03

VIF_SCALES = 4
VIF_SIGMA_NSQ = 2.0
VIF_EPS = 1e-10


class ImageTooSmallError(ShapeError):
    pass


class ZeroReferenceVarianceError(ShapeError):
    """The reference image carries no signal, so VIF is undefined."""


def _channels(x: np.ndarray, y: np.ndarray) -> List[np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"images differ in shape: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        return [(x, y)]
    if x.ndim == 3:
        return list(zip(x, y))
    raise ShapeError(f"expected (H, W) or (C, H, W) images, got {x.shape}")


def _per_channel(fn: Callable[[np.ndarray, np.ndarray], float], x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean([fn(a, b) for a, b in _channels(x, y)]))


# --- UQI.


def _uqi_channel(a: np.ndarray, b: np.ndarray) -> float:
    if min(a.shape) < UQI_WINDOW:
        raise ImageTooSmallError(f"UQI needs at least {UQI_WINDOW}×{UQI_WINDOW} pixels, got {a.shape}")
    wa = sliding_window_view(a, (UQI_WINDOW, UQI_WINDOW))
    wb = sliding_window_view(b, (UQI_WINDOW, UQI_WINDOW))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    num = 4.0 * cov * mu_a * mu_b
    den = (var_a + var_b) * (mu_a**2 + mu_b**2)

    regular = den > UQI_DEGENERATE
    identical = np.all(wa == wb, axis=(-2, -1))
    scores = list(num[regular] / den[regular])
    scores += [1.0] * int(np.sum(~regular & identical))
    return float(np.mean(scores)) if scores else 0.0


def uqi(x: np.ndarray, y: np.ndarray) -> float:
    """
    Mean over 8×8 windows (stride 1) of
    ``4·cov·μx·μy / ((σx² + σy²)(μx² + μy²))``. A window whose denominator
    vanishes counts as 1 when both windows are identical and is skipped
    otherwise; with no contributing window the score is 0.
    """
    return _per_channel(_uqi_channel, x, y)


# --- MS-SSIM.


def msssim_scales(height: int, width: int) -> int:
    """Largest scale count s <= 5 with min(H, W) >= 8 * 2**(s-1)."""
    side = min(height, width)
    scales = 0
    while scales < len(MSSSIM_WEIGHTS) and side >= MSSSIM_MIN_SIDE * 2**scales:
        scales += 1
    return scales


def _blur(x: np.ndarray) -> np.ndarray:
    return gaussian_filter(x, MSSSIM_SIGMA, mode="reflect", truncate=MSSSIM_RADIUS / MSSSIM_SIGMA)


def _ssim_terms(a: np.ndarray, b: np.ndarray):
    c1, c2 = K1**2, K2**2
    mu_a, mu_b = _blur(a), _blur(b)
    var_a = _blur(a * a) - mu_a**2
    var_b = _blur(b * b) - mu_b**2
    cov = _blur(a * b) - mu_a * mu_b
    luminance = (2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    contrast_structure = (2.0 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(luminance * contrast_structure)), float(np.mean(contrast_structure))


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    return x[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _msssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    scales = msssim_scales(*a.shape)
    if scales < 2:
        raise ImageTooSmallError(f"MS-SSIM needs at least {2 * MSSSIM_MIN_SIDE} pixels per side, got {a.shape}")
    weights = np.asarray(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    score = 1.0
    for j in range(scales):
        ssim, cs = _ssim_terms(a, b)
        if j < scales - 1:
            score *= max(cs, 0.0) ** weights[j]
            a, b = _downsample(a), _downsample(b)
        else:
            score *= max(ssim, 0.0) ** weights[j]
    return float(score)


def msssim(x: np.ndarray, y: np.ndarray) -> float:
    """
    Multi-scale SSIM with a Gaussian window (σ = 1.5, 11 taps, reflected
    borders), as many scales as the image allows (3 for 32×32 images) and the
    standard scale weights renormalised to the scales used. Per-scale terms
    are clamped at zero, so the score lies in ``[0, 1]``.
    """
    return _per_channel(_msssim_channel, x, y)


# --- VIF.


def _vif_channel(reference: np.ndarray, distorted: np.ndarray) -> float:
    ref = reference * 255.0
    dist = distorted * 255.0
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        sd = (2 ** (VIF_SCALES - scale + 1) + 1) / 5.0
        if scale > 1:
            ref = gaussian_filter(ref, sd, mode="reflect")[::2, ::2]
            dist = gaussian_filter(dist, sd, mode="reflect")[::2, ::2]
        mu1 = gaussian_filter(ref, sd, mode="reflect")
        mu2 = gaussian_filter(dist, sd, mode="reflect")
        sigma1_sq = np.maximum(gaussian_filter(ref * ref, sd, mode="reflect") - mu1 * mu1, 0.0)
        sigma2_sq = np.maximum(gaussian_filter(dist * dist, sd, mode="reflect") - mu2 * mu2, 0.0)
        sigma12 = gaussian_filter(ref * dist, sd, mode="reflect") - mu1 * mu2

        g = sigma12 / (sigma1_sq + VIF_EPS)
        sv_sq = sigma2_sq - g * sigma12

        flat_ref = sigma1_sq < VIF_EPS
        g[flat_ref] = 0.0
        sv_sq[flat_ref] = sigma2_sq[flat_ref]
        sigma1_sq[flat_ref] = 0.0

        flat_dist = sigma2_sq < VIF_EPS
        g[flat_dist] = 0.0
        sv_sq[flat_dist] = 0.0

        negative = g < 0
        sv_sq[negative] = sigma2_sq[negative]
        g[negative] = 0.0
        sv_sq = np.maximum(sv_sq, VIF_EPS)

        num += np.sum(np.log10(1.0 + g * g * sigma1_sq / (sv_sq + VIF_SIGMA_NSQ)))
        den += np.sum(np.log10(1.0 + sigma1_sq / VIF_SIGMA_NSQ))
    if den <= 0.0:
        raise ZeroReferenceVarianceError("reference image has zero variance at every scale")
    return max(float(num / den), 0.0)


def vif(reference: np.ndarray, distorted: np.ndarray) -> float:
    """
    Pixel-domain VIF over four scales with noise variance 2 on the 0..255
    scale; not symmetric in its arguments.

    Raises:
        ZeroReferenceVarianceError: When the reference carries no signal.
    """
    return _per_channel(_vif_channel, reference, distorted)


def score_all(reference: np.ndarray, recovered: np.ndarray) -> dict:
    return {"uqi": uqi(reference, recovered), "msssim": msssim(reference, recovered), "vif": vif(reference, recovered)}
