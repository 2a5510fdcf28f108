"""Split conformal calibration of the predictive mixture.

The score is the negative predictive log-density; the prediction set is the
sub-level set ``{x : score(x) <= q}``; the conformal threshold is the
``ceil((n+1)(1-alpha))``-th smallest calibration score.
"""

import math
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream
from .uq import infer, predictive_logpdf

MODES = ("conformal", "uncalibrated")


def score(b, x):
    return -predictive_logpdf(b, x)


def _ceil(x):
    # guard against 0.7 * 10 = 7.000000000000001 style rounding
    return math.ceil(x - 1e-9 * max(1.0, abs(x)))


def order_statistic_index(n, alpha, mode="conformal"):
    """1-based rank of the threshold among ``n`` sorted scores (may exceed n)."""
    if mode == "conformal":
        return _ceil((n + 1) * (1.0 - alpha))
    if mode == "uncalibrated":
        return max(1, _ceil(n * (1.0 - alpha)))
    raise ValueError(f"unknown calibration mode {mode!r}")


@dataclass(frozen=True)
class CalibrationRecord:
    alpha: float
    scores: tuple
    threshold: float
    mode: str
    n: int


def calibrate(scores, alpha, mode="conformal"):
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    n = s.size
    if n == 0:
        raise ValueError("no calibration scores")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    k = order_statistic_index(n, alpha, mode)
    q = math.inf if k > n else float(s[k - 1])
    return CalibrationRecord(float(alpha), tuple(np.asarray(scores, dtype=float).ravel()), q, mode, n)


def in_set(s, rec):
    return bool(s <= rec.threshold)


def thresholds(sorted_scores, alphas, mode="conformal"):
    """Vectorised thresholds for many alphas from pre-sorted scores."""
    n = len(sorted_scores)
    ks = np.array([order_statistic_index(n, a, mode) for a in alphas])
    padded = np.append(np.asarray(sorted_scores, dtype=np.float64), math.inf)
    return padded[np.minimum(ks, n + 1) - 1]


@dataclass
class CoverageReport:
    alphas: np.ndarray
    mean_coverage: np.ndarray
    stderr: np.ndarray
    split_count: int
    n_cal: int
    n_test: int
    mode: str = "conformal"

    def to_csv(self):
        lines = ["alpha,mean_coverage,stderr,mode"]
        lines += [f"{float(a)!r},{float(c)!r},{float(e)!r},{self.mode}"
                  for a, c, e in zip(self.alphas, self.mean_coverage, self.stderr)]
        return "\n".join(lines) + "\n"

    def band_fraction(self, slack=0.02):
        """Fraction of alphas whose mean coverage lies in the split-conformal band widened by ``slack``."""
        lo = 1.0 - self.alphas - slack
        hi = 1.0 - self.alphas + 1.0 / (self.n_cal + 1) + slack
        inside = (self.mean_coverage >= lo) & (self.mean_coverage <= hi)
        return float(inside.mean())


def alpha_grid(start=0.01, stop=0.99, count=100):
    return np.linspace(start, stop, count)


def coverage_from_scores(pool_scores, alphas, split_count, n_cal, seed, mode="conformal", reference_scores=None):
    """Empirical coverage over random calibration/test splits of a cached score table.

    In ``uncalibrated`` mode the threshold comes from ``reference_scores``
    (training examples) and only the test half of each split is used.
    """
    pool = np.asarray(pool_scores, dtype=np.float64)
    n = pool.size
    if n < n_cal + 1:
        raise ValueError(f"pool of {n} cannot hold {n_cal} calibration examples plus a test set")
    alphas = np.asarray(alphas, dtype=np.float64)
    if mode == "uncalibrated":
        if reference_scores is None:
            raise ValueError("uncalibrated coverage needs reference (training) scores")
        fixed_q = thresholds(np.sort(reference_scores), alphas, "uncalibrated")
    elif mode != "conformal":
        raise ValueError(f"unknown calibration mode {mode!r}")
    cov = np.empty((split_count, alphas.size))
    for s in range(split_count):
        order = RngStream(seed, s).permutation(n)
        cal, test = pool[order[:n_cal]], pool[order[n_cal:]]
        q = thresholds(np.sort(cal), alphas, "conformal") if mode == "conformal" else fixed_q
        cov[s] = (test[None, :] <= q[:, None]).mean(axis=1)
    stderr = cov.std(axis=0, ddof=1) / math.sqrt(split_count) if split_count > 1 else np.zeros(alphas.size)
    return CoverageReport(alphas, cov.mean(axis=0), stderr, split_count, n_cal, n - n_cal, mode)


def score_table(ens, dataset, cfg, stream_base=0):
    """Score every example of ``dataset`` once; example i uses latent stream ``stream_base + i``."""
    out = np.empty(len(dataset))
    for i in range(len(dataset)):
        b = infer(ens, dataset.measurement(i), cfg, stream_id=stream_base + i)
        out[i] = score(b, dataset.pixels[i])
    return out


def coverage_eval(ens, pool, alphas, split_count, n_cal, cfg, seed, mode="conformal", reference=None):
    """Coverage experiment end to end; batches are scored once and reused by every split."""
    if len(pool) < n_cal + 1:
        raise ValueError("insufficient pool")
    pool_scores = score_table(ens, pool, cfg)
    ref = None
    if mode == "uncalibrated":
        if reference is None:
            raise ValueError("uncalibrated mode needs a reference dataset")
        ref = score_table(ens, reference, cfg, stream_base=1 << 32)
    return coverage_from_scores(pool_scores, alphas, split_count, n_cal, seed, mode, ref)
