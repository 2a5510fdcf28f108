"""``uqimg`` command line: data generation, training, inference, metrics, coverage, reducibility."""

import argparse
import hashlib
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .conformal import alpha_grid, coverage_from_scores, score_table
from .data import (
    ForwardModel,
    ImageDataset,
    inject_spikes,
    make_shapes_dataset,
    measure_dataset,
    parse_idx,
    read_idx_array,
    split_dataset,
    write_idx,
    write_idx_array,
)
from .ensemble import build_ensemble, load_ensemble, save_ensemble, train_analytic_ensemble
from .exports import read_maps_csv, write_maps
from .metrics import evaluate, npll
from .numerics import RngStream
from .numerics.rng import derive_stream_id
from .uq import InvariantViolation, infer, uncertainty_maps

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_INVARIANT = 0, 2, 3, 4
SPLITS = ("train", "test", "pool")
MEASURE_STREAM = 0xF0
SPIKE_STREAM = 0x5B1
REFERENCE_STREAM_BASE = 1 << 32


class MissingInput(RuntimeError):
    pass


# --- helpers -----------------------------------------------------------------

def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parse_select(text):
    """``"0,3,5-7"`` -> [0, 3, 5, 6, 7]."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            a = int(lo)
            b = int(hi) if sep else a
        except ValueError as exc:
            raise ConfigError(f"bad --select item {part!r}") from exc
        if a < 0 or b < a:
            raise ConfigError(f"bad --select range {part!r}")
        out.extend(range(a, b + 1))
    return sorted(set(out))


def parse_spikes(text):
    try:
        k, amp = text.split(",")
        k, amp = int(k), float(amp)
    except ValueError as exc:
        raise ConfigError(f"--inject-spikes expects k,amp (got {text!r})") from exc
    if k < 0:
        raise ConfigError("spike count must be >= 0")
    return k, amp


def _dataset_paths(data_dir, split):
    return {
        "images": data_dir / f"{split}_images.idx",
        "values": data_dir / f"{split}_values.idx",
        "masks": data_dir / f"{split}_masks.idx",
    }


def load_split(cfg, split):
    data_dir = cfg.output_dir / "data"
    paths = _dataset_paths(data_dir, split)
    for p in paths.values():
        if not p.exists():
            raise MissingInput(f"missing dataset file {p}; run make-data first")
    ds = parse_idx(paths["images"].read_bytes(), source_tag=f"{split}")
    values = read_idx_array(paths["values"].read_bytes())
    masks = read_idx_array(paths["masks"].read_bytes()).astype(np.float64)
    ds = ImageDataset(ds.height, ds.width, ds.pixels, values.reshape(len(ds), -1), masks.reshape(len(ds), -1),
                      split)
    return ds, [str(p) for p in paths.values()]


def load_ens(cfg):
    d = cfg.output_dir / "ensemble"
    if not (d / "manifest.json").exists():
        raise MissingInput(f"missing ensemble at {d}; run train first")
    return load_ensemble(d), sorted(str(p) for p in d.iterdir())


def train_ensemble(cfg, data):
    e = cfg["ensemble"]
    if cfg["train"]["generator"] == "analytic":
        return train_analytic_ensemble(data, e["t2"], e["master-seed"], cfg["data"]["noise-sigma"] ** 2)
    return build_ensemble(e["strategy"], cfg.training_config(), data, e["master-seed"], e["t2"],
                          e["swag-snapshot-policy"])


def write_manifest(cfg, command, inputs, outputs, started, deterministic, extra=None):
    root = cfg.output_dir
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "master_seed": cfg["ensemble"]["master-seed"],
        "inputs": {os.path.relpath(p, root): sha256_file(p) for p in inputs},
        "outputs": {os.path.relpath(p, root): sha256_file(p) for p in outputs},
        "duration_s": round(time.perf_counter() - started, 3),
        "deterministic": deterministic,
        "version": __version__,
    }
    if extra:
        manifest["results"] = extra
    mdir = root / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    path = mdir / f"{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# --- commands ----------------------------------------------------------------

def cmd_make_data(cfg, args):
    d = cfg["data"]
    counts = {"train": d["count"], "test": d["test-count"], "pool": d["pool-count"]}
    total = sum(counts.values())
    inputs = []
    if cfg.source_path is None:
        full = make_shapes_dataset(total, d["height"], d["width"], d["seed"])
    else:
        if not cfg.source_path.exists():
            raise MissingInput(f"missing IDX source {cfg.source_path}")
        try:
            full = parse_idx(cfg.source_path.read_bytes(), source_tag=cfg.source_path.name)
        except ValueError as exc:
            raise MissingInput(f"unusable IDX source {cfg.source_path}: {exc}") from exc
        if (full.height, full.width) != (d["height"], d["width"]):
            raise ConfigError(f"IDX images are {full.height}x{full.width}, config says {d['height']}x{d['width']}")
        if len(full) < total:
            raise ConfigError(f"IDX source holds {len(full)} images, {total} requested")
        inputs.append(cfg.source_path)
    model = ForwardModel(d["mask-fraction"], d["noise-sigma"])
    data_dir = cfg.output_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    outputs, start = [], 0
    for k, split in enumerate(SPLITS):
        n = counts[split]
        if n == 0:
            continue
        part = full.subset(range(start, start + n))
        start += n
        blob = write_idx(part)
        # measure the quantized images so the stored files are self-consistent
        part = parse_idx(blob)
        part = measure_dataset(model, part, RngStream(d["seed"], MEASURE_STREAM).child(k))
        paths = _dataset_paths(data_dir, split)
        paths["images"].write_bytes(blob)
        paths["values"].write_bytes(write_idx_array(part.values.reshape(n, part.height, part.width)))
        paths["masks"].write_bytes(write_idx_array(part.masks.astype(np.uint8).reshape(n, part.height, part.width)))
        outputs += list(paths.values())
    sidecar = data_dir / "dataset.json"
    sidecar.write_text(json.dumps({
        "source": d["source"], "counts": counts, "height": d["height"], "width": d["width"],
        "mask_fraction": d["mask-fraction"], "noise_sigma": d["noise-sigma"], "seed": d["seed"],
    }, indent=2, sort_keys=True))
    outputs.append(sidecar)
    return inputs, outputs, {"counts": counts}


def cmd_train(cfg, args):
    data, inputs = load_split(cfg, "train")
    ens = train_ensemble(cfg, data)
    manifest = save_ensemble(ens, cfg.output_dir / "ensemble")
    outputs = sorted((cfg.output_dir / "ensemble").iterdir())
    return inputs, outputs, {"T2": ens.size, "strategy": ens.strategy, "member_sha256": manifest["member_sha256"]}


def _mean_epistemic(ens, m, icfg, stream_id):
    return uncertainty_maps(infer(ens, m, icfg, stream_id=stream_id))


def cmd_infer(cfg, args):
    ens, ens_files = load_ens(cfg)
    test, inputs = load_split(cfg, "test")
    icfg = cfg.inference_config()
    ids = parse_select(args.select) if args.select else list(range(len(test)))
    if any(i >= len(test) for i in ids):
        raise ConfigError(f"--select outside the {len(test)} test examples")
    spikes = parse_spikes(args.inject_spikes) if args.inject_spikes else None
    out_dir = cfg.output_dir / "infer"
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs, rows = [], []
    for i in ids:
        m = test.measurement(i)
        maps = _mean_epistemic(ens, m, icfg, i)
        files = write_maps(out_dir, f"ex{i:04d}", maps, test.height, test.width)
        read_maps_csv(files[-1].read_text())  # decomposition identity re-checked on load
        outputs += files
        row = [i, float(maps.var_epis.mean())]
        if spikes:
            ms = inject_spikes(m, spikes[0], spikes[1], RngStream(icfg.seed, SPIKE_STREAM).child(i))
            smaps = _mean_epistemic(ens, ms, icfg, i)
            files = write_maps(out_dir, f"ex{i:04d}_spiked", smaps, test.height, test.width)
            read_maps_csv(files[-1].read_text())
            outputs += files
            row.append(float(smaps.var_epis.mean()))
        rows.append(row)
    header = "example_id,mean_epis_clean" + (",mean_epis_spiked" if spikes else "")
    summary = out_dir / "summary.csv"
    summary.write_text(header + "\n" + "".join(",".join(repr(v) for v in r) + "\n" for r in rows), encoding="utf-8")
    outputs.append(summary)
    arr = np.array([r[1:] for r in rows])
    results = {"examples": len(ids), "mean_epistemic_clean": float(arr[:, 0].mean())}
    if spikes:
        results.update({
            "spikes": {"count": spikes[0], "amplitude": spikes[1]},
            "mean_epistemic_spiked": float(arr[:, 1].mean()),
            "spike_ratio": float(arr[:, 1].mean() / arr[:, 0].mean()) if arr[:, 0].mean() > 0 else None,
            "spike_higher_fraction": float(np.mean(arr[:, 1] > arr[:, 0])),
        })
    return inputs + ens_files, outputs, results


def cmd_metrics(cfg, args):
    ens, ens_files = load_ens(cfg)
    test, inputs = load_split(cfg, "test")
    icfg = cfg.inference_config()
    batches = [infer(ens, test.measurement(i), icfg, stream_id=i) for i in range(len(test))]
    truths = [test.pixels[i] for i in range(len(test))]
    report = evaluate(batches, truths, range(len(test)), test.height, test.width)
    member_npll = [npll([b.member(t) for b in batches], truths) for t in range(ens.size)]
    path = cfg.output_dir / "metrics.csv"
    path.write_text(report.to_csv(), encoding="utf-8")
    results = {"npll_per_pixel": report.npll_per_pixel, "mse": report.mse, "ssim": report.ssim,
               "member_npll_mean": float(np.mean(member_npll)), "n_test": report.n_test}
    return inputs + ens_files, [path], results


def cmd_coverage(cfg, args):
    ens, ens_files = load_ens(cfg)
    c = cfg["conformal"]
    pool, inputs = load_split(cfg, "pool")
    if len(pool) < c["n-cal"] + 1:
        raise MissingInput(f"pool of {len(pool)} too small for n-cal={c['n-cal']} plus a test set")
    train, train_files = load_split(cfg, "train")
    if len(train) < c["reference-count"]:
        raise MissingInput(f"only {len(train)} training examples for reference-count={c['reference-count']}")
    icfg = cfg.inference_config()
    alphas = alpha_grid(c["alpha-start"], c["alpha-stop"], c["alpha-count"])
    pool_scores = score_table(ens, pool, icfg)
    ref_scores = score_table(ens, train.subset(range(c["reference-count"])), icfg, REFERENCE_STREAM_BASE)
    outputs, results, reports = [], {}, {}
    for mode in ("conformal", "uncalibrated"):
        rep = coverage_from_scores(pool_scores, alphas, c["split-count"], c["n-cal"], c["seed"], mode,
                                   ref_scores if mode == "uncalibrated" else None)
        path = cfg.output_dir / f"coverage_{mode}.csv"
        path.write_text(rep.to_csv(), encoding="utf-8")
        outputs.append(path)
        reports[mode] = rep
        results[f"{mode}_band_fraction"] = rep.band_fraction()
    lines = [f"{'alpha':>6} {'target':>7} {'conformal':>9} {'uncal':>7}"]
    step = max(1, len(alphas) // 10)
    for j in range(0, len(alphas), step):
        a = alphas[j]
        lines.append(f"{a:6.3f} {1 - a:7.3f} {reports['conformal'].mean_coverage[j]:9.3f} "
                     f"{reports['uncalibrated'].mean_coverage[j]:7.3f}")
    summary = cfg.output_dir / "coverage_summary.txt"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs.append(summary)
    return inputs + train_files + ens_files, outputs, results


def cmd_reducibility(cfg, args):
    train, inputs = load_split(cfg, "train")
    test, test_files = load_split(cfg, "test")
    fractions = cfg["data"]["fractions"]
    subsets = split_dataset(train, fractions, derive_stream_id(cfg["data"]["seed"], 0x4ED), mode="nested")
    if min(len(s) for s in subsets) < 2:
        raise MissingInput("training set too small for the smallest fraction")
    icfg = cfg.inference_config()
    rows = []
    for f, sub in zip(fractions, subsets):
        ens = train_ensemble(cfg, sub)
        epis = [_mean_epistemic(ens, test.measurement(i), icfg, i).var_epis.mean() for i in range(len(test))]
        rows.append((f, len(sub), float(np.mean(epis))))
    path = cfg.output_dir / "reducibility.csv"
    path.write_text("fraction,n_train,mean_epistemic\n" + "".join(f"{f!r},{n},{e!r}\n" for f, n, e in rows),
                    encoding="utf-8")
    return inputs + test_files, [path], {"mean_epistemic": [r[2] for r in rows]}


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "metrics": cmd_metrics,
    "coverage": cmd_coverage,
    "reducibility": cmd_reducibility,
}


def build_parser():
    p = argparse.ArgumentParser(prog="uqimg", description="Ensembled generative imaging with calibrated uncertainty.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    p.add_argument("--inject-spikes", metavar="K,AMP", help="infer: also evaluate spike-corrupted measurements")
    p.add_argument("--select", metavar="IDS", help="infer: test example ids, e.g. 0,3,5-7")
    p.add_argument("--version", action="version", version=f"uqimg {__version__}")
    return p


def run(argv=None):
    """Run one command; returns (exit code, manifest path or None)."""
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.deterministic:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=1)
        else:
            limiter = nullcontext()
        with limiter:
            inputs, outputs, results = COMMANDS[args.command](cfg, args)
        path = write_manifest(cfg, args.command, inputs, outputs, started, args.deterministic, results)
    except ConfigError as exc:
        print(f"uqimg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    except MissingInput as exc:
        print(f"uqimg: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING, None
    except (InvariantViolation, ArithmeticError) as exc:
        print(f"uqimg: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT, None
    except OSError as exc:
        print(f"uqimg: i/o error: {exc}", file=sys.stderr)
        return EXIT_MISSING, None
    return EXIT_OK, path


def main(argv=None):
    code, path = run(argv)
    if path is not None:
        print(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
