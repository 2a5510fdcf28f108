"""Per-pixel NPLL, MSE and SSIM."""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .uq import predictive_logpdf, predictive_mean


def _pixels(img):
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def _grid(img, shape=None):
    if hasattr(img, "as_grid"):
        return img.as_grid()
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 1:
        if shape is None:
            side = math.isqrt(arr.size)
            if side * side != arr.size:
                raise ValueError("flat non-square image needs an explicit shape")
            shape = (side, side)
        arr = arr.reshape(shape)
    return arr


def npll_terms(batches, truths):
    """Per-example negative log predictive density (nats, whole image)."""
    if len(batches) != len(truths):
        raise ValueError(f"{len(batches)} batches for {len(truths)} ground truths")
    return np.array([-predictive_logpdf(b, x) for b, x in zip(batches, truths)])


def npll(batches, truths, per_pixel=True):
    terms = npll_terms(batches, truths)
    if terms.size == 0:
        raise ValueError("empty test set")
    value = float(terms.mean())
    return value / batches[0].n_pixels if per_pixel else value


def mse(a, b):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0, shape=None):
    """Mean SSIM over all window positions fully inside the image."""
    a, b = _grid(a, shape), _grid(b, shape)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)

    def local_mean(x):
        return np.tensordot(sliding_window_view(x, (window, window)), w, axes=([2, 3], [0, 1]))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    n_test: int
    npll_per_pixel: float
    mse: float
    ssim: float
    rows: list = field(default_factory=list)  # (example_id, npll, mse, ssim)

    def to_csv(self):
        lines = ["example_id,npll,mse,ssim"]
        lines += [f"{i},{n!r},{m!r},{s!r}" for i, n, m, s in self.rows]
        lines.append(f"AGGREGATE,{self.npll_per_pixel!r},{self.mse!r},{self.ssim!r}")
        return "\n".join(lines) + "\n"


def evaluate(batches, truths, ids=None, height=None, width=None):
    """Per-example rows plus their means; NPLL is per pixel."""
    if len(batches) != len(truths):
        raise ValueError("length mismatch")
    ids = list(range(len(batches))) if ids is None else list(ids)
    rows = []
    for i, b, x in zip(ids, batches, truths):
        rec = predictive_mean(b)
        shape = (height, width) if height else None
        rows.append((i, -predictive_logpdf(b, x) / b.n_pixels, mse(rec, x), ssim(rec, _pixels(x), shape=shape)))
    arr = np.array([r[1:] for r in rows])
    n_mean, m_mean, s_mean = arr.mean(axis=0)
    return MetricsReport(len(rows), float(n_mean), float(m_mean), float(s_mean), rows)
