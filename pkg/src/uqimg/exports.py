"""Artifact writers for uncertainty maps: 16-bit binary PGM plus CSV."""

import json
from pathlib import Path

import numpy as np

MAXVAL = 65535
MAP_FIELDS = ("mean", "var_pred", "var_epis", "var_alea")


def encode_pgm(values, height, width):
    """Min-max scale ``values`` into a P5 image; returns (bytes, scaling dict)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size != height * width:
        raise ValueError(f"{v.size} values for a {height}x{width} image")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot encode non-finite values")
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo
    q = np.zeros(v.size) if span == 0 else np.rint((v - lo) / span * MAXVAL)
    header = f"P5\n{width} {height}\n{MAXVAL}\n".encode("ascii")
    # netpbm stores 16-bit samples most significant byte first
    body = q.astype(">u2").tobytes()
    scaling = {"min": lo, "max": hi, "maxval": MAXVAL, "scale": span / MAXVAL, "offset": lo,
               "height": height, "width": width}
    return header + body, scaling


def decode_pgm(data):
    """Parse a P5 file (comments allowed) into an (h, w) integer array and maxval."""
    fields, pos = [], 2
    if data[:2] != b"P5":
        raise ValueError("not a binary PGM file")
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError("malformed PGM header")
        fields.append(int(data[start:pos]))
    w, h, maxval = fields
    pos += 1  # exactly one whitespace byte before the raster
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise ValueError("truncated PGM raster")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.int64), maxval


def write_pgm(path, values, height, width, extra=None):
    path = Path(path)
    blob, scaling = encode_pgm(values, height, width)
    path.write_bytes(blob)
    sidecar = dict(scaling, **(extra or {}))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_pgm(path):
    """Undo the display scaling recorded in the sidecar; exact to one quantization step."""
    path = Path(path)
    raster, maxval = decode_pgm(path.read_bytes())
    meta = json.loads(path.with_suffix(".json").read_text())
    return raster * (meta["max"] - meta["min"]) / maxval + meta["min"]


def maps_to_csv(maps):
    lines = ["pixel," + ",".join(MAP_FIELDS)]
    cols = [getattr(maps, f) for f in MAP_FIELDS]
    for i in range(maps.mean.size):
        lines.append(f"{i}," + ",".join(repr(float(c[i])) for c in cols))
    return "\n".join(lines) + "\n"


def read_maps_csv(text, rtol=1e-12):
    """Parse a maps CSV and re-check the decomposition identity."""
    rows = text.strip().splitlines()
    if rows[0] != "pixel," + ",".join(MAP_FIELDS):
        raise ValueError("unexpected maps CSV header")
    arr = np.array([[float(v) for v in r.split(",")[1:]] for r in rows[1:]])
    out = dict(zip(MAP_FIELDS, arr.T))
    pred = out["var_pred"]
    if not np.all(np.abs(out["var_epis"] + out["var_alea"] - pred) <= rtol * np.abs(pred)):
        raise ArithmeticError("decomposition identity violated in maps CSV")
    return out


def write_maps(directory, stem, maps, height, width):
    """Write one PGM per map plus the CSV; returns the list of files written."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for f in MAP_FIELDS:
        p = write_pgm(d / f"{stem}_{f}.pgm", getattr(maps, f), height, width, {"field": f})
        written += [p, p.with_suffix(".json")]
    csv = d / f"{stem}_maps.csv"
    csv.write_text(maps_to_csv(maps), encoding="utf-8")
    written.append(csv)
    return written
