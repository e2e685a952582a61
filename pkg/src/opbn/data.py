"""Dataset generation and loading.

Bundles pair an (N, D) pixel matrix in [0,1] with a metadata table holding
the columns the simulated oracles read: id, label, azimuth, elevation,
trajectory, angle (NaN = absent). On disk a bundle is a directory with
`bundle.bin` (magic "OPBN", version, N, D as little-endian u32, float32
row-major pixels) and `meta.csv`.
"""

import csv
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError

META_COLUMNS = ("id", "label", "azimuth", "elevation", "trajectory", "angle")
BUNDLE_MAGIC = b"OPBN"
BUNDLE_VERSION = 1

SHAPE_NAMES = ("circle", "square", "triangle", "bar")


@dataclass
class DatasetBundle:
    x: np.ndarray                      # (N, D) float32 in [0, 1]
    meta: dict[str, np.ndarray]        # META_COLUMNS; NaN marks absent values
    split: str = "train"
    image_size: int = 0                # side length when rows are square images

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        n = self.x.shape[0]
        for col in META_COLUMNS:
            vals = np.asarray(self.meta.get(col, np.full(n, np.nan)), dtype=np.float64)
            if vals.shape != (n,):
                raise DataError(f"meta column {col!r} has {vals.shape[0] if vals.ndim else 0} rows, x has {n}")
            self.meta[col] = vals
        if self.image_size == 0:
            side = int(round(np.sqrt(self.x.shape[1])))
            self.image_size = side if side * side == self.x.shape[1] else 0

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def has_column(self, name: str) -> bool:
        return name in self.meta and not np.isnan(self.meta[name]).all()


def _shape_mask(kind: int, size: int, cx: float, cy: float) -> np.ndarray:
    """Filled shape on a [-1,1]^2 grid, centered at (cx, cy)."""
    ax = np.linspace(-1.0, 1.0, size)
    xx, yy = np.meshgrid(ax, ax)
    u, v = xx - cx, yy - cy
    r = 0.42
    if kind == 0:    # circle
        return (u**2 + v**2 <= r**2).astype(np.float64)
    if kind == 1:    # square
        return ((np.abs(u) <= r) & (np.abs(v) <= r * 0.82)).astype(np.float64)
    if kind == 2:    # triangle (apex up)
        return ((v >= -r) & (v <= r) & (np.abs(u) <= (r - v) * 0.55)).astype(np.float64)
    if kind == 3:    # bar
        return ((np.abs(u) <= 0.62) & (np.abs(v) <= 0.16)).astype(np.float64)
    raise ValueError(f"shape kind {kind} out of range")


def render_shaded_shape(label: int, azimuth_deg: float, elevation_deg: float,
                        jitter: tuple[float, float], image_size: int) -> np.ndarray:
    """One two-factor image: base level + directional gradient + elevation
    brightness shift + shape layer. Deterministic in its arguments."""
    ax = np.linspace(-1.0, 1.0, image_size)
    xx, yy = np.meshgrid(ax, ax)
    theta = np.deg2rad(azimuth_deg)
    img = 0.40 + 0.20 * (np.cos(theta) * xx + np.sin(theta) * yy) \
        + 0.05 * np.sin(np.deg2rad(elevation_deg)) \
        + 0.25 * _shape_mask(int(label), image_size, jitter[0], jitter[1])
    return np.clip(img, 0.0, 1.0)


def gen_twofactor_synthetic(n: int, image_size: int = 16,
                            rng: np.random.Generator | None = None,
                            split: str = "train") -> DatasetBundle:
    """Grayscale images controlled by two independently planted factors.

    Factor 1 (label): shape in {circle, square, triangle, bar}, drawn at a
    jittered center. Factor 2 (azimuth): direction of a linear shading
    gradient over the whole image, uniform in [-130, 130] degrees; a third
    nuisance factor (elevation, [-40, 90]) shifts overall brightness. The
    two target factors give conflicting similarity semantics: same shape
    under different light vs same light on different shapes. Coefficients
    keep pixels inside [0,1] without clipping so the shading direction stays
    recoverable from pixels by least squares.
    """
    if n < 10:
        raise ValueError("need n >= 10")
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = rng.integers(0, len(SHAPE_NAMES), size=n)
    azimuths = rng.uniform(-130.0, 130.0, size=n)
    elevations = rng.uniform(-40.0, 90.0, size=n)
    jitter = rng.uniform(-0.12, 0.12, size=(n, 2))
    x = np.empty((n, image_size * image_size), dtype=np.float32)
    for k in range(n):
        x[k] = render_shaded_shape(int(labels[k]), azimuths[k], elevations[k],
                                   (jitter[k, 0], jitter[k, 1]), image_size).ravel()
    meta = {
        "id": np.arange(n, dtype=np.float64),
        "label": labels.astype(np.float64),
        "azimuth": azimuths,
        "elevation": elevations,
    }
    return DatasetBundle(x, meta, split=split, image_size=image_size)


def estimate_shading_direction(x: np.ndarray, image_size: int) -> np.ndarray:
    """Pixel-space oracle: least-squares fit img ~ a + b*X + c*Y per row,
    returning atan2(c, b) in degrees. Independent of any learned model."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.linspace(-1.0, 1.0, image_size)
    xx, yy = np.meshgrid(ax, ax)
    design = np.stack([np.ones(image_size**2), xx.ravel(), yy.ravel()], axis=1)
    coef, *_ = np.linalg.lstsq(design, x.T, rcond=None)
    return np.rad2deg(np.arctan2(coef[2], coef[1]))


def angle_difference_deg(a, b) -> np.ndarray:
    """Smallest absolute difference between angles in degrees."""
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 360.0
    return np.minimum(d, 360.0 - d)


# ---------------------------------------------------------------------------
# IDX files (the classic big-endian digit-image format) and rotation sets
# ---------------------------------------------------------------------------

def read_idx_images(path) -> np.ndarray:
    """Read an IDX3 image file -> (N, rows, cols) uint8."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataError(f"{path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != 2051:
        raise DataError(f"{path}: bad IDX image magic {magic}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if body.size != n * rows * cols:
        raise DataError(f"{path}: expected {n * rows * cols} pixels, found {body.size}")
    return body.reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != 2049:
        raise DataError(f"{path}: bad IDX label magic {magic}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if body.size != n:
        raise DataError(f"{path}: expected {n} labels, found {body.size}")
    return body.copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 2051, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 2049, labels.size))
        fh.write(labels.tobytes())


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Clockwise rotation with bilinear interpolation and zero padding."""
    out = ndimage.rotate(img, -angle_deg, reshape=False, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def gen_perturbed_mnist(images_path, labels_path, per_class: int,
                        angles: list[float], rng: np.random.Generator,
                        split: str = "train") -> DatasetBundle:
    """Rotation-trajectory digit set from IDX source files.

    Picks per_class digits of each class, then emits for each one a
    trajectory of the original plus one clockwise-rotated copy per angle
    ("falling over" to the right). Meta carries label, trajectory id, and
    angle (0 for the original row).
    """
    angles = list(angles)
    if any(a <= 0 for a in angles) or any(b <= a for a, b in zip(angles, angles[1:])):
        raise ValueError("angles must be strictly increasing and positive")
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError("image and label counts differ")
    chosen = []
    for cls in range(10):
        pool = np.flatnonzero(labels == cls)
        if pool.size < per_class:
            raise DataError(f"class {cls} has only {pool.size} digits, need {per_class}")
        chosen.extend(np.sort(rng.choice(pool, size=per_class, replace=False)).tolist())
    side = images.shape[1]
    steps = len(angles) + 1
    n = len(chosen) * steps
    x = np.empty((n, side * side), dtype=np.float32)
    label_col = np.empty(n)
    traj_col = np.empty(n)
    angle_col = np.empty(n)
    row = 0
    for traj, src in enumerate(chosen):
        base = images[src].astype(np.float64) / 255.0
        for angle in [0.0] + angles:
            img = base if angle == 0.0 else rotate_image(base, angle)
            x[row] = img.ravel()
            label_col[row] = labels[src]
            traj_col[row] = traj
            angle_col[row] = angle
            row += 1
    meta = {
        "id": np.arange(n, dtype=np.float64),
        "label": label_col,
        "trajectory": traj_col,
        "angle": angle_col,
    }
    return DatasetBundle(x, meta, split=split, image_size=side)


# ---------------------------------------------------------------------------
# Extended-Yale-B-style loader (P5 PGM files with A{azimuth}E{elevation} names)
# ---------------------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    """Binary (P5) PGM reader, maxval <= 255, comments allowed."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM not supported")
    body = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    if body.size < width * height:
        raise DataError(f"{path}: truncated pixel data")
    return body[:width * height].reshape(height, width)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a 2-D array in [0,1] or uint8 as a binary PGM."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def parse_yale_filename(name: str) -> tuple[int, float, float] | None:
    """Extract (subject, azimuth, elevation) from names like
    yaleB01_P00A+010E+00.pgm; None when the tokens are absent."""
    import re
    m = re.search(r"yaleB(\d+).*A([+-]\d{3})E([+-]\d{2,3})", name)
    if not m:
        return None
    return int(m.group(1)), float(m.group(2)), float(m.group(3))


def load_yale(directory, image_size: int = 32, test_count: int = 300,
              seed: int = 0) -> tuple[DatasetBundle, DatasetBundle]:
    """Load a directory of Yale-convention PGM images.

    Images are normalized to [0,1] and downscaled to image_size x image_size;
    azimuth/elevation come from the filename, identity from the subject
    prefix. Returns a deterministic (train, test) split by seeded shuffle
    (test_count rows held out). Unparsable filenames are skipped with a
    warning; an empty result is an error.
    """
    paths = sorted(Path(directory).glob("*.pgm"))
    rows, labels, azimuths, elevations = [], [], [], []
    for p in paths:
        parsed = parse_yale_filename(p.name)
        if parsed is None:
            warnings.warn(f"skipping unparsable filename {p.name}")
            continue
        subject, az, el = parsed
        img = read_pgm(p).astype(np.float64) / 255.0
        if img.shape != (image_size, image_size):
            zoom = (image_size / img.shape[0], image_size / img.shape[1])
            img = np.clip(ndimage.zoom(img, zoom, order=1), 0.0, 1.0)
        rows.append(img.ravel())
        labels.append(subject)
        azimuths.append(az)
        elevations.append(el)
    if not rows:
        raise DataError(f"no loadable Yale images under {directory}")
    x = np.asarray(rows, dtype=np.float32)
    n = x.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(order[:min(test_count, n - 1)])
    train_idx = np.sort(order[min(test_count, n - 1):])

    def make(idx, split):
        meta = {
            "id": np.arange(idx.size, dtype=np.float64),
            "label": np.asarray(labels, dtype=np.float64)[idx],
            "azimuth": np.asarray(azimuths, dtype=np.float64)[idx],
            "elevation": np.asarray(elevations, dtype=np.float64)[idx],
        }
        return DatasetBundle(x[idx], meta, split=split, image_size=image_size)

    return make(train_idx, "train"), make(test_idx, "test")


# ---------------------------------------------------------------------------
# Bundle persistence
# ---------------------------------------------------------------------------

def save_bundle(bundle: DatasetBundle, directory) -> None:
    """Write bundle.bin + meta.csv under the directory. The split tag is
    carried by the directory name convention (train/ or test/)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, d = bundle.x.shape
    with open(directory / "bundle.bin", "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<III", BUNDLE_VERSION, n, d))
        fh.write(bundle.x.astype("<f4").tobytes())
    with open(directory / "meta.csv", "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(META_COLUMNS)
        for k in range(n):
            row = []
            for col in META_COLUMNS:
                v = bundle.meta[col][k]
                if np.isnan(v):
                    row.append("")
                elif col in ("id", "label", "trajectory") and float(v).is_integer():
                    row.append(str(int(v)))
                else:
                    row.append(repr(float(v)))
            writer.writerow(row)


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    bin_path = directory / "bundle.bin"
    if not bin_path.exists():
        raise DataError(f"{bin_path} does not exist")
    raw = bin_path.read_bytes()
    if len(raw) < 16 or raw[:4] != BUNDLE_MAGIC:
        raise DataError(f"{bin_path}: not a bundle file (bad magic)")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != BUNDLE_VERSION:
        raise DataError(f"{bin_path}: unsupported bundle version {version}")
    if len(raw) - 16 != n * d * 4:
        raise DataError(f"{bin_path}: truncated pixel data ({len(raw) - 16} of {n * d * 4} bytes)")
    x = np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, d).copy()
    meta = {col: np.full(n, np.nan) for col in META_COLUMNS}
    with open(directory / "meta.csv", "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != META_COLUMNS:
            raise DataError(f"{directory / 'meta.csv'}: bad header {header}")
        k = -1
        for k, row in enumerate(reader):
            if k >= n:
                raise DataError(f"{directory / 'meta.csv'}: more rows than bundle declares")
            for col, cell in zip(META_COLUMNS, row):
                if cell != "":
                    meta[col][k] = float(cell)
        if k != n - 1:
            raise DataError(f"{directory / 'meta.csv'}: {k + 1} rows, bundle declares {n}")
    split = directory.name if directory.name in ("train", "test") else "train"
    return DatasetBundle(x, meta, split=split)
