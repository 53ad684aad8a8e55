import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from hefl.attack.metrics import (
    MSSSIM_WEIGHTS,
    ImageTooSmallError,
    ZeroReferenceVarianceError,
    msssim,
    msssim_scales,
    score_all,
    uqi,
    vif,
)
from hefl.errors import ShapeError


def _image(seed: int, size: int = 32) -> np.ndarray:
    rng = np.random.default_rng(seed)
    smooth = gaussian_filter(rng.uniform(0, 1, size=(size, size)), 2.0)
    return np.clip((smooth - smooth.min()) / (np.ptp(smooth) + 1e-12) * 0.8 + 0.1, 0, 1)


def _uqi_loop(a, b, window=8):
    scores = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            x, y = a[i : i + window, j : j + window], b[i : i + window, j : j + window]
            mx, my = x.mean(), y.mean()
            vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
            cov = ((x - mx) * (y - my)).mean()
            den = (vx + vy) * (mx**2 + my**2)
            if den > 1e-18:
                scores.append(4 * cov * mx * my / den)
            elif np.array_equal(x, y):
                scores.append(1.0)
    return float(np.mean(scores)) if scores else 0.0


def _gauss_loop(x, sigma, radius):
    taps = np.arange(-radius, radius + 1)
    kernel = np.exp(-(taps**2) / (2 * sigma**2))
    kernel /= kernel.sum()
    # scipy's "reflect" repeats the edge pixel, i.e. numpy's "symmetric"
    padded = np.pad(x, radius, mode="symmetric")
    rows = np.array([[np.dot(padded[i, j : j + 2 * radius + 1], kernel) for j in range(x.shape[1])] for i in range(padded.shape[0])])
    return np.array([[np.dot(rows[i : i + 2 * radius + 1, j], kernel) for j in range(x.shape[1])] for i in range(x.shape[0])])


def _blur_loop(x):
    return _gauss_loop(x, 1.5, 5)


def _vif_loop(reference, distorted, sigma_nsq=2.0, eps=1e-10):
    ref, dist = reference * 255.0, distorted * 255.0
    num = den = 0.0
    for scale in range(1, 5):
        sd = (2 ** (5 - scale) + 1) / 5.0
        radius = int(4.0 * sd + 0.5)
        if scale > 1:
            ref = _gauss_loop(ref, sd, radius)[::2, ::2]
            dist = _gauss_loop(dist, sd, radius)[::2, ::2]
        mu1, mu2 = _gauss_loop(ref, sd, radius), _gauss_loop(dist, sd, radius)
        var1 = _gauss_loop(ref * ref, sd, radius) - mu1 * mu1
        var2 = _gauss_loop(dist * dist, sd, radius) - mu2 * mu2
        cov = _gauss_loop(ref * dist, sd, radius) - mu1 * mu2
        for i in range(ref.shape[0]):
            for j in range(ref.shape[1]):
                s1, s2, s12 = max(var1[i, j], 0.0), max(var2[i, j], 0.0), cov[i, j]
                g = s12 / (s1 + eps)
                sv = s2 - g * s12
                if s1 < eps:
                    g, sv, s1 = 0.0, s2, 0.0
                if s2 < eps:
                    g, sv = 0.0, 0.0
                if g < 0:
                    g, sv = 0.0, s2
                sv = max(sv, eps)
                num += np.log10(1.0 + g * g * s1 / (sv + sigma_nsq))
                den += np.log10(1.0 + s1 / sigma_nsq)
    return max(num / den, 0.0)


def _msssim_loop(a, b):
    scales = msssim_scales(*a.shape)
    weights = np.asarray(MSSSIM_WEIGHTS[:scales]) / np.sum(MSSSIM_WEIGHTS[:scales])
    c1, c2 = 0.01**2, 0.03**2
    score = 1.0
    for j in range(scales):
        ma, mb = _blur_loop(a), _blur_loop(b)
        va, vb = _blur_loop(a * a) - ma**2, _blur_loop(b * b) - mb**2
        cov = _blur_loop(a * b) - ma * mb
        cs = (2 * cov + c2) / (va + vb + c2)
        if j < scales - 1:
            score *= max(cs.mean(), 0.0) ** weights[j]
            h, w = a.shape[0] // 2, a.shape[1] // 2
            a = a[: 2 * h, : 2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))
            b = b[: 2 * h, : 2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))
        else:
            lum = (2 * ma * mb + c1) / (ma**2 + mb**2 + c1)
            score *= max((lum * cs).mean(), 0.0) ** weights[j]
    return score


def test_identical_images_score_one():
    x = _image(0)
    assert uqi(x, x) == pytest.approx(1.0, abs=1e-12)
    assert msssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert vif(x, x) == pytest.approx(1.0, abs=1e-6)


def test_uqi_matches_window_loop():
    a, b = _image(1, 20), _image(2, 20)
    assert uqi(a, b) == pytest.approx(_uqi_loop(a, b), abs=1e-10)


def test_uqi_constant_windows():
    flat = np.full((8, 8), 0.5)
    assert uqi(flat, flat) == 1.0
    # one degenerate window, not identical: skipped, nothing else contributes
    assert uqi(flat, np.full((8, 8), 0.25)) == 0.0


def test_msssim_scale_count():
    assert msssim_scales(32, 32) == 3
    assert msssim_scales(16, 16) == 2
    assert msssim_scales(8, 8) == 1
    assert msssim_scales(256, 256) == 5
    assert msssim_scales(32, 16) == 2


def test_msssim_rejects_single_scale_images():
    x = _image(3, 8)
    with pytest.raises(ImageTooSmallError):
        msssim(x, x)


def test_msssim_matches_direct_convolution():
    a, b = _image(4, 32), _image(5, 32)
    assert msssim(a, b) == pytest.approx(_msssim_loop(a, b), abs=1e-8)


def test_scores_fall_as_noise_grows():
    x = _image(6)
    rng = np.random.default_rng(7)
    noise = rng.normal(0, 1, size=x.shape)
    previous = {"uqi": 1.0, "msssim": 1.0, "vif": 1.0 + 1e-6}
    for sigma in (0.02, 0.08, 0.2):
        scores = score_all(x, np.clip(x + sigma * noise, 0, 1))
        for name, value in scores.items():
            assert value < previous[name]
            previous[name] = value


def test_vif_falls_with_blur():
    x = _image(8)
    light, heavy = gaussian_filter(x, 0.7), gaussian_filter(x, 2.0)
    assert vif(x, heavy) < vif(x, light) < vif(x, x) + 1e-6


def test_vif_rejects_flat_reference():
    with pytest.raises(ZeroReferenceVarianceError):
        vif(np.zeros((32, 32)), _image(9))


def test_shape_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        uqi(_image(0, 16), _image(0, 32))
    with pytest.raises(ShapeError):
        msssim(np.zeros((2, 3, 16, 16)), np.zeros((2, 3, 16, 16)))


def test_multichannel_score_is_channel_mean():
    a = np.stack([_image(10), _image(11), _image(12)])
    b = np.stack([_image(13), _image(14), _image(15)])
    expected = np.mean([uqi(a[c], b[c]) for c in range(3)])
    assert uqi(a, b) == pytest.approx(expected)
    assert msssim(a, b) == pytest.approx(np.mean([msssim(a[c], b[c]) for c in range(3)]))


def test_uqi_and_msssim_are_symmetric():
    a, b = _image(16), _image(17)
    assert uqi(a, b) == pytest.approx(uqi(b, a))
    assert msssim(a, b) == pytest.approx(msssim(b, a))


def test_uqi_of_a_negated_image_is_minus_one():
    # Every 8×8 window of a checkerboard has mean 0.5, where x and 1 - x are exact opposites.
    x = np.where(np.add.outer(np.arange(16), np.arange(16)) % 2 == 0, 0.8, 0.2)
    assert uqi(x, 1.0 - x) == pytest.approx(-1.0, abs=1e-12)


def test_vif_matches_direct_convolution():
    reference = _image(18, 64)
    rng = np.random.default_rng(19)
    distorted = np.clip(gaussian_filter(reference, 1.0) + rng.normal(0, 0.05, size=reference.shape), 0, 1)
    assert vif(reference, distorted) == pytest.approx(_vif_loop(reference, distorted), abs=1e-6)
    assert vif(reference, reference) == pytest.approx(_vif_loop(reference, reference), abs=1e-6)
