"""Image datasets, the inpainting forward model and measurement perturbations.

Images are stored flat (row-major, ``height * width`` pixels) in ``[0, 1]``.
A measurement keeps the full image length: unobserved pixels hold an
explicit zero and a parallel binary mask marks what was observed.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import RngStream, as_tensor

IDX_IMAGE_MAGIC = 0x00000803

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}


@dataclass(frozen=True)
class Image:
    height: int
    width: int
    pixels: np.ndarray

    def __post_init__(self):
        px = as_tensor(self.pixels, shape=[self.height * self.width], name="pixels")
        object.__setattr__(self, "pixels", px)

    @property
    def size(self):
        return self.height * self.width

    def as_grid(self):
        return self.pixels.reshape(self.height, self.width)


@dataclass(frozen=True)
class Measurement:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = as_tensor(self.values, name="values").ravel()
        mask = np.asarray(self.mask, dtype=np.float64).ravel()
        if values.shape != mask.shape:
            raise ValueError("values and mask must have the same length")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def observed(self):
        return np.flatnonzero(self.mask)


@dataclass(frozen=True)
class ForwardModel:
    """Random-pixel masking followed by white Gaussian noise on observed pixels."""

    mask_fraction: float = 0.1
    noise_sigma: float = 0.05
    mask_mode: str = "per-example-random"
    fixed_mask: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.mask_mode not in ("per-example-random", "fixed"):
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")

    def observed_count(self, n_pixels):
        return int(np.floor(self.mask_fraction * n_pixels + 0.5))

    def draw_mask(self, n_pixels, stream):
        mask = np.zeros(n_pixels)
        mask[stream.choice(n_pixels, self.observed_count(n_pixels), replace=False)] = 1.0
        return mask

    def fixed(self, n_pixels, stream):
        """Same model with a single mask frozen for every example."""
        return replace(self, mask_mode="fixed", fixed_mask=self.draw_mask(n_pixels, stream))


@dataclass
class ImageDataset:
    height: int
    width: int
    pixels: np.ndarray  # (count, height*width)
    values: np.ndarray | None = None
    masks: np.ndarray | None = None
    source_tag: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = as_tensor(self.pixels, name="pixels").reshape(-1, self.height * self.width)
        if (self.values is None) != (self.masks is None):
            raise ValueError("values and masks must be given together")
        if self.values is not None:
            self.values = as_tensor(self.values, name="values").reshape(self.pixels.shape)
            self.masks = np.asarray(self.masks, dtype=np.float64).reshape(self.pixels.shape)

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def n_pixels(self):
        return self.height * self.width

    @property
    def has_measurements(self):
        return self.values is not None

    def image(self, i):
        return Image(self.height, self.width, self.pixels[i])

    def measurement(self, i):
        if not self.has_measurements:
            raise ValueError("dataset has no measurements")
        return Measurement(self.values[i], self.masks[i])

    @property
    def images(self):
        return [self.image(i) for i in range(len(self))]

    @property
    def measurements(self):
        return [self.measurement(i) for i in range(len(self))] if self.has_measurements else None

    def subset(self, indices, tag=None):
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(
            self.height,
            self.width,
            self.pixels[idx],
            None if self.values is None else self.values[idx],
            None if self.masks is None else self.masks[idx],
            tag if tag is not None else self.source_tag,
            dict(self.meta, indices=idx.tolist()),
        )

    def with_measurements(self, measurements):
        return ImageDataset(
            self.height,
            self.width,
            self.pixels,
            np.stack([m.values for m in measurements]),
            np.stack([m.mask for m in measurements]),
            self.source_tag,
            dict(self.meta),
        )


# --- IDX ---------------------------------------------------------------------

def read_idx_array(data):
    """Decode any IDX payload into a native-endian numpy array."""
    data = bytes(data)
    if len(data) < 4:
        raise ValueError("unexpected end of data")
    zero, code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or code not in _IDX_DTYPES or ndim == 0:
        raise ValueError("not an IDX file")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise ValueError("unexpected end of data")
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    payload = data[header_end:]
    if len(payload) < need:
        raise ValueError("unexpected end of data")
    if len(payload) > need:
        raise ValueError("trailing bytes after IDX payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx_array(arr):
    arr = np.asarray(arr)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(_IDX_DTYPES[code]).tobytes()


def parse_idx(data, source_tag="idx"):
    """Parse an IDX image file (magic 0x00000803) into a dataset scaled to [0, 1]."""
    data = bytes(data)
    if len(data) < 4:
        raise ValueError("unexpected end of data")
    if struct.unpack(">I", data[:4])[0] != IDX_IMAGE_MAGIC:
        raise ValueError("not an IDX image file")
    raw = read_idx_array(data)
    n, h, w = raw.shape
    return ImageDataset(h, w, raw.reshape(n, h * w).astype(np.float64) / 255.0, source_tag=source_tag)


def write_idx(dataset):
    """Encode dataset pixels as an IDX uint8 image file (round to nearest level)."""
    px = np.clip(np.floor(dataset.pixels * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return write_idx_array(px.reshape(len(dataset), dataset.height, dataset.width))


# --- synthetic data ------------------------------------------------------------

def _draw_shape(grid, stream):
    h, w = grid.shape
    kind, intensity = stream.integers(0, 2), stream.uniform(low=0.2, high=1.0)
    if kind == 0:
        rh, rw = stream.integers(2, max(3, h // 2 + 1), shape=2)
        r0, c0 = stream.integers(0, h - rh + 1), stream.integers(0, w - rw + 1)
        grid[r0:r0 + rh, c0:c0 + rw] = intensity
    else:
        radius = stream.uniform(low=1.5, high=max(1.6, min(h, w) / 4))
        cy, cx = stream.uniform(low=0.0, high=h - 1), stream.uniform(low=0.0, high=w - 1)
        yy, xx = np.mgrid[0:h, 0:w]
        grid[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = intensity


def make_shapes_dataset(count, height, width, seed, max_shapes=3):
    """Rectangles and discs with intensities in [0.2, 1.0] on a zero background."""
    if count < 1:
        raise ValueError("count must be >= 1")
    root = RngStream(seed, 0x5A4E5)
    out = np.zeros((count, height, width))
    for i in range(count):
        s = root.child(i)
        for _ in range(int(s.integers(1, max_shapes + 1))):
            _draw_shape(out[i], s)
    return ImageDataset(height, width, out.reshape(count, -1), source_tag=f"shapes:{seed}")


# --- forward model and perturbations -----------------------------------------

def apply_forward(model, image, stream):
    pixels = image.pixels if isinstance(image, Image) else as_tensor(image).ravel()
    n = pixels.size
    if model.mask_mode == "fixed":
        if model.fixed_mask is None or model.fixed_mask.size != n:
            raise ValueError("fixed mask missing or of the wrong length")
        mask = np.asarray(model.fixed_mask, dtype=np.float64)
    else:
        mask = model.draw_mask(n, stream)
    noise = model.noise_sigma * stream.normal(n) if model.noise_sigma > 0 else np.zeros(n)
    return Measurement(mask * (pixels + noise), mask)


def measure_dataset(model, dataset, stream):
    """Apply the forward model to every image; example i uses ``stream.child(i)``."""
    ms = [apply_forward(model, dataset.pixels[i], stream.child(i)) for i in range(len(dataset))]
    return dataset.with_measurements(ms)


def inject_spikes(m, spike_count, amplitude, stream):
    """Add +/- amplitude at ``spike_count`` distinct observed positions."""
    observed = m.observed
    if spike_count > observed.size:
        raise ValueError(f"spike_count {spike_count} exceeds {observed.size} observed pixels")
    if spike_count == 0:
        return m
    where = observed[stream.choice(observed.size, spike_count, replace=False)]
    signs = np.where(stream.uniform(spike_count) < 0.5, -1.0, 1.0)
    values = m.values.copy()
    values[where] += amplitude * signs
    return Measurement(values, m.mask)


def split_dataset(dataset, fractions, seed, mode="nested"):
    """Seeded shuffle, then either nested prefixes or a partition into consecutive blocks."""
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    n = len(dataset)
    order = RngStream(seed, 0x5E11).permutation(n)
    sizes = [int(np.floor(f * n + 0.5)) for f in fractions]
    if mode == "nested":
        return [dataset.subset(order[:k]) for k in sizes]
    if mode == "partition":
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError("partition fractions must sum to 1")
        bounds = np.cumsum([0] + sizes[:-1] + [n - sum(sizes[:-1])])
        if np.any(np.diff(bounds) < 0):
            raise ValueError("invalid partition sizes")
        return [dataset.subset(order[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    raise ValueError(f"unknown split mode {mode!r}")
