"""End-to-end acceptance checks, one test per criterion.

Every test records a PASS/FAIL line (shown in the terminal summary) and then
asserts, so a failing criterion also fails the suite.
"""

import configparser
import json
import math
import shutil
import struct
import time

import mpmath
import numpy as np
import pytest
from PIL import Image as PILImage

from gradcheck import PRIMITIVES, check_random_tape
from uqimg import cli
from uqimg.conformal import alpha_grid, calibrate, coverage_eval, in_set, thresholds
from uqimg.data import (
    ForwardModel,
    make_shapes_dataset,
    measure_dataset,
    parse_idx,
    read_idx_array,
    write_idx,
    write_idx_array,
)
from uqimg.ensemble import Ensemble, train_analytic_ensemble
from uqimg.exports import decode_pgm, write_pgm
from uqimg.generators import fit_analytic
from uqimg.metrics import mse, npll, ssim
from uqimg.numerics import RngStream
from uqimg.uq import InferenceConfig, ReconstructionBatch, infer, predictive_logpdf, uncertainty_maps

SIGMA = 0.05


def shapes_measured(count, seed, side=16, fm=None):
    return measure_dataset(fm or ForwardModel(), make_shapes_dataset(count, side, side, seed), RngStream(seed, 1))


def write_config(path, sections):
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict({s: {k: str(v) for k, v in kv.items()} for s, kv in sections.items()})
    with open(path, "w") as fh:
        cp.write(fh)
    return path


def run_cli(cmd, cfg, *extra):
    code, path = cli.run([cmd, "--config", str(cfg), "--deterministic", *extra])
    assert code == 0, f"{cmd} exited with {code}"
    return json.loads(path.read_text())


# 1 ----------------------------------------------------------------------------

def test_criterion_01_decomposition_identity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, epis_zero = 0.0, True
    for t1 in range(1, 9):
        for t2 in range(1, 6):
            for n in (1, 16, 256):
                b = ReconstructionBatch(rng.normal(size=(t1, t2, n)), 1e-5)
                maps = uncertainty_maps(b)
                rel = np.abs(maps.var_epis + maps.var_alea - maps.var_pred) / maps.var_pred
                worst = max(worst, float(rel.max()))
                if t2 == 1:
                    epis_zero &= bool(np.all(maps.var_epis == 0.0))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and epis_zero and dt < 1.0
    criterion(1, ok, f"max rel err {worst:.2e}, epistemic zero at T2=1: {epis_zero}, {dt:.2f}s")
    assert ok


# 2 ----------------------------------------------------------------------------

def test_criterion_02_single_model_bridge(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        t1, n = int(rng.integers(2, 60)), int(rng.integers(1, 40))
        samples = rng.uniform(size=(t1, 1, n)) * rng.uniform(0.01, 2.0)
        b = ReconstructionBatch(samples, 1e-5)
        lhs = uncertainty_maps(b).var_pred - 1e-5
        rhs = (t1 - 1) / t1 * np.var(samples[:, 0, :], axis=0, ddof=1)
        worst = max(worst, float((np.abs(lhs - rhs) / np.abs(rhs)).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 1.0
    criterion(2, ok, f"max rel err {worst:.2e} over 200 batches, {dt:.2f}s")
    assert ok


# 3 ----------------------------------------------------------------------------

def _mixture_logpdf_mp(samples, eps2, x):
    mpmath.mp.dps = 40
    rows = samples.reshape(-1, samples.shape[-1])
    n = rows.shape[1]
    e = mpmath.mpf(eps2)
    acc = mpmath.mpf(0)
    for r in rows:
        sq = mpmath.fsum((mpmath.mpf(float(a)) - mpmath.mpf(float(b))) ** 2 for a, b in zip(r, x))
        acc += mpmath.exp(-sq / (2 * e))
    return float(mpmath.log(acc / len(rows)) - mpmath.mpf(n) / 2 * mpmath.log(2 * mpmath.pi * e))


def test_criterion_03_npll_closed_form(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for case in range(50):
        t1, t2, n = (int(v) for v in rng.integers(1, 5, size=3))
        eps2 = float(10 ** rng.uniform(-5, -1))
        samples = rng.uniform(size=(t1, t2, n))
        x = samples[rng.integers(t1), rng.integers(t2)] + rng.normal(scale=math.sqrt(eps2), size=n)
        got = predictive_logpdf(ReconstructionBatch(samples, eps2), x)
        worst = max(worst, abs(got - _mixture_logpdf_mp(samples, eps2, x)))
    zero = 0.0
    for n in (1, 4, 16, 256):
        x = rng.uniform(size=n)
        got = predictive_logpdf(ReconstructionBatch(x.reshape(1, 1, n), 1e-5), x)
        zero = max(zero, abs(got - (-(n / 2) * math.log(2 * math.pi * 1e-5))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and zero <= 1e-9 and dt < 1.0
    criterion(3, ok, f"oracle max abs err {worst:.2e}, zero-residual err {zero:.2e}, {dt:.2f}s")
    assert ok


# 4 ----------------------------------------------------------------------------

def test_criterion_04_jensen_bound(criterion):
    t0 = time.perf_counter()
    train = shapes_measured(400, 40)
    test = shapes_measured(50, 41)
    ens = train_analytic_ensemble(train, 5, 42, SIGMA ** 2)
    cfg = InferenceConfig(T1=16, seed=4)
    batches = [infer(ens, test.measurement(i), cfg, stream_id=i) for i in range(50)]
    truths = list(test.pixels)
    full = npll(batches, truths)
    member = float(np.mean([npll([b.member(t) for b in batches], truths) for t in range(5)]))
    slack = member - full
    dt = time.perf_counter() - t0
    ok = slack >= -1e-12 and dt < 10.0
    criterion(4, ok, f"ensemble NPLL {full:.4f} <= member mean {member:.4f} (slack {slack:.3e}), {dt:.1f}s")
    assert ok


# 5 ----------------------------------------------------------------------------

def test_criterion_05_analytic_oracle(criterion):
    t0 = time.perf_counter()
    train = shapes_measured(500, 50)
    params = fit_analytic(train.pixels, SIGMA ** 2)
    m = shapes_measured(1, 51).measurement(0)
    ens = Ensemble([params], "deep", [1])
    b = infer(ens, m, InferenceConfig(T1=5000, seed=5))
    post = params.posterior(m)
    maps = uncertainty_maps(b)
    z = np.abs(maps.mean - post.mean) / (post.std / math.sqrt(5000))
    target = post.variance + 1e-5
    rel = np.abs(maps.var_alea / target - 1)
    dt = time.perf_counter() - t0
    ok = z.max() <= 4.0 and rel.max() <= 0.10 and dt < 30.0
    criterion(5, ok, f"max mean deviation {z.max():.2f} standard errors, max aleatoric rel err {rel.max():.3f}, "
                     f"{dt:.1f}s")
    assert ok


# 6 ----------------------------------------------------------------------------

def test_criterion_06_marginal_coverage(criterion):
    t0 = time.perf_counter()
    train = shapes_measured(512, 60)
    pool = shapes_measured(200, 61)
    ens = train_analytic_ensemble(train, 3, 62, SIGMA ** 2)
    cfg = InferenceConfig(T1=32, seed=6)
    alphas = alpha_grid(0.01, 0.99, 100)
    reference = train.subset(range(100))
    cal = coverage_eval(ens, pool, alphas, 100, 100, cfg, seed=63)
    unc = coverage_eval(ens, pool, alphas, 100, 100, cfg, seed=63, mode="uncalibrated", reference=reference)
    inside = cal.band_fraction()
    outside = 1.0 - unc.band_fraction()
    dt = time.perf_counter() - t0
    ok = inside >= 0.95 and outside >= 0.20 and dt < 600
    criterion(6, ok, f"calibrated in band {inside:.0%} of alphas, uncalibrated out of band {outside:.0%}, {dt:.1f}s")
    assert ok


# 7 ----------------------------------------------------------------------------

def test_criterion_07_quantile_edges(criterion):
    t0 = time.perf_counter()
    rec = calibrate([0.3, 0.1, 0.2], 0.1)
    universal = rec.threshold == math.inf and all(in_set(s, rec) for s in (-1e300, 0.0, 1e300, math.inf))
    rng = np.random.default_rng(7)
    monotone = True
    alphas = alpha_grid()
    for n in (1, 3, 10, 100, 257):
        s = np.sort(rng.normal(size=n))
        for mode in ("conformal", "uncalibrated"):
            q = thresholds(s, alphas, mode)
            single = np.array([calibrate(s, a, mode).threshold for a in alphas])
            monotone &= bool(np.all(q[1:] <= q[:-1]) and np.array_equal(q, single))
    dt = time.perf_counter() - t0
    ok = universal and monotone and dt < 1.0
    criterion(7, ok, f"n=3 alpha=0.1 threshold {rec.threshold}, universal {universal}, monotone {monotone}, {dt:.2f}s")
    assert ok


# 8 ----------------------------------------------------------------------------

def test_criterion_08_gradients(criterion):
    t0 = time.perf_counter()
    errors = [check_random_tape(seed) for seed in range(100)]
    dt = time.perf_counter() - t0
    ok = max(errors) < 1e-4 and dt < 30.0
    criterion(8, ok, f"max rel err {max(errors):.2e} over 100 tapes covering {len(PRIMITIVES)} primitives, {dt:.1f}s")
    assert ok


# 9 and 10 share one trained setup -------------------------------------------------

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = write_config(root / "desk.ini", {
        "data": {"count": 2048, "test-count": 64, "pool-count": 0, "height": 16, "width": 16, "seed": 0},
        "train": {"generator": "cvae-mlp", "epochs": 20, "learning-rate": 3e-3, "batch-size": 32,
                  "hidden": 64, "latent-dim": 16, "warmup-epochs": 2},
        "ensemble": {"strategy": "deep", "t2": 3, "master-seed": 11},
        "infer": {"t1": 8, "seed": 3},
    })
    run_cli("make-data", cfg)
    return root, cfg


@pytest.mark.slow
def test_criterion_09_reducibility(desk_run, criterion):
    root, cfg = desk_run
    t0 = time.perf_counter()
    m = run_cli("reducibility", cfg)
    rows = [line.split(",") for line in (root / "out" / "reducibility.csv").read_text().splitlines()[1:]]
    epis = [float(r[2]) for r in rows]
    steps = [b <= a * 1.05 for a, b in zip(epis, epis[1:])]
    dt = time.perf_counter() - t0
    ok = len(rows) == 4 and all(steps) and dt < 900
    trend = " -> ".join(f"{e:.2e}" for e in epis)
    criterion(9, ok, f"mean epistemic by n_train {[int(r[1]) for r in rows]}: {trend}, {dt:.0f}s")
    assert m["results"]["mean_epistemic"] == epis
    assert ok


@pytest.mark.slow
def test_criterion_10_abnormality(desk_run, criterion):
    root, cfg = desk_run
    t0 = time.perf_counter()
    run_cli("train", cfg)
    m = run_cli("infer", cfg, "--inject-spikes", "8,1.0")
    res = m["results"]
    dt = time.perf_counter() - t0
    ok = res["examples"] == 64 and res["spike_higher_fraction"] >= 0.90 and "spike_ratio" in res and dt < 300
    criterion(10, ok, f"spiked > clean on {res['spike_higher_fraction']:.0%} of 64, "
                      f"ratio {res['spike_ratio']:.2f} (manifest), {dt:.0f}s")
    assert ok


# 11 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_11_determinism(tmp_path, criterion):
    t0 = time.perf_counter()
    cfg = write_config(tmp_path / "det.ini", {
        "data": {"count": 256, "test-count": 16, "pool-count": 200, "height": 16, "width": 16, "seed": 9},
        "train": {"generator": "cvae-mlp", "epochs": 4, "hidden": 32, "latent-dim": 8, "warmup-epochs": 1},
        "ensemble": {"strategy": "deep", "t2": 3, "master-seed": 21},
        "infer": {"t1": 16, "seed": 2},
        "conformal": {"split-count": 100, "n-cal": 100, "reference-count": 100},
    })
    order = ("make-data", "train", "infer", "metrics", "coverage")

    def pipeline():
        out = {}
        for cmd in order:
            out[cmd] = run_cli(cmd, cfg)["outputs"]
        return out

    first = pipeline()
    shutil.rmtree(tmp_path / "out")
    second = pipeline()
    n_files = sum(len(v) for v in first.values())
    same = first == second
    dt = time.perf_counter() - t0
    ok = same and n_files > 0 and dt < 1200
    criterion(11, ok, f"{n_files} artifacts across {len(order)} commands byte-identical: {same}, {dt:.0f}s")
    assert ok


# 12 ---------------------------------------------------------------------------

def _netpbm_header(blob):
    """Whitespace/comment-aware P5 header parse, independent of the library reader."""
    fields, i = [], 2
    while len(fields) < 3:
        while blob[i:i + 1].isspace():
            i += 1
        if blob[i:i + 1] == b"#":
            i = blob.index(b"\n", i) + 1
            continue
        j = i
        while blob[j:j + 1].isdigit():
            j += 1
        fields.append(int(blob[i:j]))
        i = j
    return blob[:2], fields, i + 1


def test_criterion_12_formats(tmp_path, criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(12)
    arrays = [rng.integers(0, 256, size=(3, 4, 5)).astype(np.uint8),
              rng.integers(-128, 128, size=(7,)).astype(np.int8),
              rng.integers(-3000, 3000, size=(2, 3)).astype(np.int16),
              rng.integers(-10 ** 6, 10 ** 6, size=(4, 2)).astype(np.int32),
              rng.normal(size=(3, 3)).astype(np.float32),
              rng.normal(size=(2, 2, 2))]
    idx_ok = all(write_idx_array(read_idx_array(write_idx_array(a))) == write_idx_array(a)
                 and np.array_equal(read_idx_array(write_idx_array(a)), a) for a in arrays)
    images = make_shapes_dataset(5, 7, 9, 12)
    blob = write_idx(images)
    idx_ok &= write_idx(parse_idx(blob)) == blob
    bad = struct.pack(">I", 0x00000801) + blob[4:]
    try:
        parse_idx(bad)
        magic_rejected = False
    except ValueError:
        magic_rejected = True
    values = rng.uniform(size=(6, 8))
    p = write_pgm(tmp_path / "map.pgm", values.ravel(), 6, 8)
    data = p.read_bytes()
    magic, (w, h, maxval), off = _netpbm_header(data)
    raster = np.frombuffer(data[off:], dtype=">u2").reshape(h, w)
    with PILImage.open(p) as im:
        pil = np.array(im, dtype=np.int64)
    pgm_ok = (magic == b"P5" and (w, h, maxval) == (8, 6, 65535) and len(data) - off == 2 * w * h
              and np.array_equal(pil, raster) and np.array_equal(decode_pgm(data)[0], raster)
              and raster.min() == 0 and raster.max() == 65535)
    dt = time.perf_counter() - t0
    ok = idx_ok and magic_rejected and pgm_ok and dt < 1.0
    criterion(12, ok, f"IDX round trip {idx_ok}, bad magic rejected {magic_rejected}, PGM header/raster {pgm_ok}, "
                      f"{dt:.2f}s")
    assert ok


# 13 ---------------------------------------------------------------------------

def test_criterion_13_metric_sanity(criterion):
    t0 = time.perf_counter()
    data = make_shapes_dataset(4, 32, 32, 13)
    x = data.pixels[0].reshape(32, 32)
    noise = np.random.default_rng(13).normal(size=x.shape)
    values = [ssim(x, x + s * noise) for s in (0.01, 0.05, 0.1)]
    ident = abs(ssim(x, x) - 1.0)
    decreasing = values[0] > values[1] > values[2]
    dt = time.perf_counter() - t0
    ok = ident <= 1e-9 and mse(x, x) == 0.0 and decreasing and dt < 1.0
    criterion(13, ok, f"|ssim(x,x)-1| {ident:.1e}, mse(x,x) {mse(x, x)}, "
                      f"ssim under noise {[round(v, 4) for v in values]}, {dt:.2f}s")
    assert ok
