"""Synthetic datasets, PGM/PPM I/O, D4 augmentation, batching and folds."""
import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import d4
from .errors import ConfigError, PNMParseError, ShapeError
from .tensor import RngStream

BODY, EDGE = 0, 1


@dataclass
class LabeledImage:
    """``pixels`` is (C, H, W) in [0, 1]; ``label`` is a class index or an
    (H, W) integer label map."""

    pixels: np.ndarray
    label: object
    id: str

    @property
    def is_segmentation(self):
        return isinstance(self.label, np.ndarray) and self.label.ndim == 2


def _stream(seed):
    return seed if isinstance(seed, RngStream) else RngStream(seed)


# --------------------------------------------------------------------------
# Motif classification
# --------------------------------------------------------------------------

# Both stamps cover 20 pixels, so total brightness does not reveal the class.
# The L's arms differ in length: with equal arms it would be symmetric about
# a diagonal and show only 4 distinct orientations.
L_STAMP = np.zeros((7, 5), dtype=bool)
L_STAMP[:, :2] = True
L_STAMP[5:, 2:] = True
BAR_STAMP = np.ones((10, 2), dtype=bool)


def _box_blur(a, passes=2):
    for _ in range(passes):
        p = np.pad(a, 1, mode="wrap")
        a = sum(p[i : i + a.shape[0], j : j + a.shape[1]] for i in range(3) for j in range(3)) / 9.0
    return a


def _stamp(canvas, stamp, stream, intensity):
    h, w = canvas.shape
    sh, sw = stamp.shape
    r = int(stream.integers(0, h - sh + 1))
    c = int(stream.integers(0, w - sw + 1))
    region = canvas[r : r + sh, c : c + sw]
    region[stamp] = intensity


def _oriented(stamp, stream):
    side = max(stamp.shape)
    square = np.zeros((side, side), dtype=bool)
    square[: stamp.shape[0], : stamp.shape[1]] = stamp
    out = d4.apply(square, d4.sample_code(stream))
    rows, cols = np.flatnonzero(out.any(axis=1)), np.flatnonzero(out.any(axis=0))
    return out[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def gen_motif_classification(n, size=32, seed=0, clutter=4, noise=0.1, contrast=0.25):
    """Balanced binary set of textured noise images.

    Positives (label 1) carry one L-shaped stamp, negatives one straight bar;
    both classes get ``clutter`` short bars as distractors. Every stamp has a
    uniform random position and D4 orientation, so the class of an image
    does not change under any D4 transform of the whole image.
    """
    if n % 2:
        raise ConfigError(f"motif n must be even for a balanced set, got {n}")
    if size < 16:
        raise ConfigError(f"motif size must be at least 16, got {size}")
    root = _stream(seed).child("motif")
    samples = []
    for i in range(n):
        s = root.child(i)
        label = i % 2
        canvas = 0.35 + 0.25 * _box_blur(s.uniform((size, size)) - 0.5) * 3.0
        for _ in range(clutter):
            length = int(s.integers(2, 5))
            short = np.ones((length, 2), dtype=bool)
            _stamp(canvas, _oriented(short, s), s, 0.35 + contrast * (0.8 + 0.4 * s.uniform()))
        motif = L_STAMP if label == 1 else BAR_STAMP
        _stamp(canvas, _oriented(motif, s), s, 0.35 + contrast * (0.8 + 0.4 * s.uniform()))
        canvas = canvas + noise * s.normal((size, size))
        pixels = np.clip(canvas, 0.0, 1.0)[None]
        samples.append(LabeledImage(pixels, label, f"motif-{i:05d}"))
    return samples


# --------------------------------------------------------------------------
# Voronoi segmentation
# --------------------------------------------------------------------------


def _voronoi_layout(size, cells, stream):
    for _ in range(100):
        seeds = stream.uniform((cells, 2)) * size
        diff = seeds[:, None, :] - seeds[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1)) + np.eye(cells) * size
        if dist.min() > 1e-6:
            return seeds
    raise RuntimeError("could not draw distinct Voronoi seeds")


def voronoi_maps(seeds, size):
    """Nearest-seed index and exact distance to the cell boundary for each
    pixel centre."""
    coords = np.arange(size) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    points = np.stack([yy.ravel(), xx.ravel()], axis=1)
    sq = ((points[:, None, :] - seeds[None, :, :]) ** 2).sum(-1)
    owner = sq.argmin(axis=1)
    own_sq = sq[np.arange(len(points)), owner]
    gap = np.sqrt(((seeds[owner][:, None, :] - seeds[None, :, :]) ** 2).sum(-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        # distance from the point to the bisector between its seed and seed b
        to_bisector = (sq - own_sq[:, None]) / (2.0 * gap)
    to_bisector[np.arange(len(points)), owner] = np.inf
    boundary = to_bisector.min(axis=1)
    return owner.reshape(size, size), boundary.reshape(size, size)


def gen_voronoi_segmentation(n, size=64, cells=12, edge_width=1, seed=0, noise=0.05):
    """Cell-mosaic images with an edge/body label map.

    Pixels within ``edge_width / 2`` of a Voronoi boundary are labelled
    ``EDGE`` (1), everything else ``BODY`` (0). Cell interiors get a random
    brightness that fades towards the boundary; edges are dark.
    """
    problems = []
    if cells < 4:
        problems.append(f"voronoi cells must be at least 4, got {cells}")
    if size < 8 or size % 8:
        problems.append(f"voronoi size must be a positive multiple of 8, got {size}")
    if edge_width <= 0:
        problems.append(f"voronoi edge_width must be positive, got {edge_width}")
    if problems:
        raise ConfigError(problems)
    root = _stream(seed).child("voronoi")
    samples = []
    for i in range(n):
        s = root.child(i)
        seeds = _voronoi_layout(size, cells, s)
        owner, boundary = voronoi_maps(seeds, size)
        label = np.where(boundary <= edge_width / 2.0, EDGE, BODY).astype(np.int64)
        brightness = 0.55 + 0.3 * s.uniform(cells)
        shade = np.clip(boundary / 4.0, 0.0, 1.0)
        img = brightness[owner] * (0.6 + 0.4 * shade)
        img = np.where(label == EDGE, 0.2, img) + noise * s.normal((size, size))
        samples.append(LabeledImage(np.clip(img, 0.0, 1.0)[None], label, f"voronoi-{i:05d}"))
    return samples


# --------------------------------------------------------------------------
# PGM / PPM
# --------------------------------------------------------------------------


def _header_tokens(raw):
    """Magic, width, height, maxval and the offset of the pixel data."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and (raw[pos : pos + 1].isspace() or raw[pos : pos + 1] == b"#"):
            if raw[pos : pos + 1] == b"#":
                end = raw.find(b"\n", pos)
                pos = len(raw) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PNMParseError("unexpected end of header", pos)
        tokens.append((raw[start:pos], start))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise PNMParseError("missing whitespace after maxval", pos)
    return tokens, pos + 1


def decode_pnm(raw, scale=True):
    """Decode binary PGM (P5) or PPM (P6) bytes to (C, H, W)."""
    if raw[:2] not in (b"P5", b"P6"):
        raise PNMParseError(f"unsupported magic {raw[:2]!r}", 0)
    tokens, data_start = _header_tokens(raw)
    magic = tokens[0][0]
    values = []
    for name, (tok, offset) in zip(("width", "height", "maxval"), tokens[1:]):
        if not tok.isdigit():
            raise PNMParseError(f"{name} is not a number: {tok!r}", offset)
        values.append(int(tok))
    width, height, maxval = values
    if width == 0 or height == 0:
        raise PNMParseError(f"zero image dimension {width}x{height}", tokens[1][1])
    if maxval != 255:
        raise PNMParseError(f"only 8-bit images (maxval 255) are supported, got {maxval}", tokens[3][1])
    channels = 3 if magic == b"P6" else 1
    count = width * height * channels
    payload = raw[data_start : data_start + count]
    if len(payload) < count:
        raise PNMParseError(f"truncated pixel data: expected {count} bytes, got {len(payload)}",
                            data_start + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels).transpose(2, 0, 1)
    if scale:
        return arr.astype(np.float64) / 255.0
    return arr.copy()


def load_pnm(path, scale=True):
    """Read a PGM/PPM file. With ``scale`` pixels are divided by 255,
    otherwise the raw 8-bit values are returned."""
    return decode_pnm(Path(path).read_bytes(), scale=scale)


def encode_pnm(pixels):
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ShapeError("PNM images need 1 or 3 channels", arr.shape)
    if np.issubdtype(arr.dtype, np.floating):
        if arr.min() < 0 or arr.max() > 1:
            raise ValueError("float pixels must lie in [0, 1]")
        arr = np.rint(arr * 255.0)
    elif arr.min() < 0 or arr.max() > 255:
        raise ValueError("integer pixels must lie in [0, 255]")
    arr = arr.astype(np.uint8)
    c, h, w = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + arr.transpose(1, 2, 0).tobytes()


def save_pnm(pixels, path):
    """Write (C, H, W) or (H, W) pixels. Floats in [0, 1] are scaled by 255
    and rounded; integers are written as-is."""
    Path(path).write_bytes(encode_pnm(pixels))


# --------------------------------------------------------------------------
# Dataset directories
# --------------------------------------------------------------------------

MANIFEST = "manifest.csv"


def write_dataset(samples, directory):
    """Write PNM files plus ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    segmentation = bool(samples) and samples[0].is_segmentation
    rows = []
    for sample in samples:
        image_file = f"{sample.id}.{'pgm' if sample.pixels.shape[0] == 1 else 'ppm'}"
        save_pnm(sample.pixels, directory / image_file)
        if segmentation:
            label_file = f"{sample.id}_label.pgm"
            save_pnm(np.asarray(sample.label, dtype=np.int64), directory / label_file)
            rows.append((sample.id, image_file, label_file))
        else:
            rows.append((sample.id, image_file, int(sample.label)))
    header = ("id", "image_file", "label_file") if segmentation else ("id", "filename", "label")
    path = directory / MANIFEST
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_dataset(path):
    """Load a dataset directory (or its manifest file)."""
    path = Path(path)
    manifest = path / MANIFEST if path.is_dir() else path
    root = manifest.parent
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{manifest}: empty manifest")
    header, body = rows[0], rows[1:]
    samples = []
    if header == ["id", "filename", "label"]:
        for sid, fname, label in body:
            samples.append(LabeledImage(load_pnm(root / fname), int(label), sid))
    elif header == ["id", "image_file", "label_file"]:
        for sid, fname, lname in body:
            label = load_pnm(root / lname, scale=False)[0].astype(np.int64)
            samples.append(LabeledImage(load_pnm(root / fname), label, sid))
    else:
        raise ValueError(f"{manifest}: unrecognised manifest header {header}")
    return samples


def stack(samples, dtype=np.float32):
    """Arrays ``(X, y)`` for a list of samples."""
    x = np.stack([s.pixels for s in samples]).astype(dtype)
    if samples and samples[0].is_segmentation:
        y = np.stack([s.label for s in samples]).astype(np.int64)
    else:
        y = np.array([int(s.label) for s in samples], dtype=np.int64)
    return x, y


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------


@dataclass
class AugmentPolicy:
    """D4 input augmentation. ``subset`` restricts the codes drawn (e.g.
    reflections only); without it all 8 codes are used when ``use_d4``."""

    use_d4: bool = False
    subset: tuple = None

    def codes(self):
        if self.subset:
            codes = tuple(int(c) for c in self.subset)
            if any(not 0 <= c < 8 for c in codes):
                raise ValueError(f"augmentation subset must hold codes 0..7, got {codes}")
            return codes
        return tuple(range(8)) if self.use_d4 else (0,)

    @property
    def active(self):
        return self.codes() != (0,)


def draw_codes(policy, stream, n):
    codes = np.asarray(policy.codes())
    return codes[stream.integers(0, len(codes), size=n)]


def apply_codes(x, codes):
    """Transform each item of a batch (last two axes) by its own code."""
    out = x.copy()
    for code in np.unique(codes):
        if code:
            sel = codes == code
            out[sel] = d4.apply(x[sel], int(code))
    return out


def augment(sample, policy, stream):
    """Same random D4 transform for the pixels and, for segmentation, the
    label map."""
    (code,) = draw_codes(policy, stream, 1)
    if code % 2 and sample.pixels.shape[-1] != sample.pixels.shape[-2]:
        raise ShapeError("rotations need square images", sample.pixels.shape)
    label = d4.apply(sample.label, code) if sample.is_segmentation else sample.label
    return LabeledImage(d4.apply(sample.pixels, code), label, sample.id)


# --------------------------------------------------------------------------
# Batching and folds
# --------------------------------------------------------------------------


def balanced_batches(labels, batch_size, stream, n_batches=None):
    """Yield index arrays with exactly ``batch_size / 2`` items per class.

    Each class is drawn without replacement from a shuffled order that is
    reshuffled when exhausted. By default the iterator runs until every
    item of the larger class has been drawn once.
    """
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"balanced batch size must be even, got {batch_size}")
    labels = np.asarray(labels)
    pools = [np.flatnonzero(labels == k) for k in (0, 1)]
    if any(len(p) == 0 for p in pools):
        raise ConfigError("balanced batching needs both classes present")
    half = batch_size // 2
    if n_batches is None:
        n_batches = math.ceil(max(len(p) for p in pools) / half)
    orders = [p[stream.permutation(len(p))] for p in pools]
    cursors = [0, 0]
    for _ in range(n_batches):
        picks = []
        for k in (0, 1):
            taken = []
            while len(taken) < half:
                if cursors[k] == len(orders[k]):
                    orders[k] = pools[k][stream.permutation(len(pools[k]))]
                    cursors[k] = 0
                step = min(half - len(taken), len(orders[k]) - cursors[k])
                taken.extend(orders[k][cursors[k] : cursors[k] + step])
                cursors[k] += step
            picks.extend(taken)
        yield np.asarray(picks)


def shuffled_batches(n, batch_size, stream):
    """Plain shuffled mini-batches covering ``range(n)`` once."""
    if batch_size < 1:
        raise ConfigError(f"batch size must be positive, got {batch_size}")
    order = stream.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class FoldSplit:
    fold_count: int
    assignment: dict
    test_fold: int = 0
    validation_fold: int = None
    roles: dict = field(init=False)

    def __post_init__(self):
        roles = {"train": [], "validation": [], "test": []}
        for sid, fold in self.assignment.items():
            if fold == self.test_fold:
                roles["test"].append(sid)
            elif fold == self.validation_fold:
                roles["validation"].append(sid)
            else:
                roles["train"].append(sid)
        self.roles = {k: sorted(v) for k, v in roles.items()}

    def fold_ids(self, fold):
        return sorted(sid for sid, f in self.assignment.items() if f == fold)

    def select(self, samples, role):
        wanted = set(self.roles[role])
        return [s for s in samples if s.id in wanted]


def _id_key(sid, seed):
    return hashlib.blake2b(f"{seed}:{sid}".encode("utf-8"), digest_size=8).digest()


def split_folds(items, fold_count, seed=0, test_fold=0, validation_fold=None):
    """Assign ids to near-equal folds.

    Ids are ordered by a seeded BLAKE2b hash and dealt round-robin, so the
    split depends on the id set and seed but not on input order.
    """
    ids = [getattr(item, "id", item) for item in items]
    ids = [str(i) for i in ids]
    if fold_count < 2:
        raise ConfigError(f"fold_count must be at least 2, got {fold_count}")
    if fold_count > len(ids):
        raise ConfigError(f"fold_count {fold_count} exceeds the {len(ids)} items")
    if len(set(ids)) != len(ids):
        raise ConfigError("fold splitting needs unique ids")
    for name, fold in (("test_fold", test_fold), ("validation_fold", validation_fold)):
        if fold is not None and not 0 <= fold < fold_count:
            raise ConfigError(f"{name} must be in 0..{fold_count - 1}, got {fold}")
    if validation_fold is not None and validation_fold == test_fold:
        raise ConfigError("validation_fold and test_fold must differ")
    ranked = sorted(ids, key=lambda sid: (_id_key(sid, seed), sid))
    assignment = {sid: rank % fold_count for rank, sid in enumerate(ranked)}
    return FoldSplit(fold_count, assignment, test_fold, validation_fold)
