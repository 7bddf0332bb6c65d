"""Synthetic Gaussian-mixture data with exact smoothed-score oracles, and MNIST IDX loading."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass(frozen=True)
class GmmSpec:
    """Mixture of isotropic Gaussians sharing one component variance.

    ``variance == 0`` turns the components into point masses.
    """

    weights: tuple[float, ...]
    means: tuple[tuple[float, ...], ...]
    variance: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        if w.ndim != 1 or m.ndim != 2 or m.shape[0] != w.size:
            raise ValueError("need one mean row per weight")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if not np.all(np.isfinite(m)):
            raise ValueError("means must be finite")
        if self.variance < 0:
            raise ValueError("variance must be >= 0")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))
        object.__setattr__(self, "means", tuple(tuple(float(x) for x in row) for row in m))

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def mean_array(self) -> np.ndarray:
        return np.array(self.means, dtype=float)

    def support(self) -> "GmmSpec":
        """The same mixture without its zero-weight components."""
        keep = [i for i, w in enumerate(self.weights) if w > 0]
        if len(keep) == self.n_components:
            return self
        return GmmSpec(tuple(self.weights[i] for i in keep), tuple(self.means[i] for i in keep), self.variance)

    def to_text(self) -> str:
        means = "; ".join(" ".join(repr(x) for x in row) for row in self.means)
        return (
            f"weights = {' '.join(repr(w) for w in self.weights)}\n"
            f"means = {means}\n"
            f"variance = {self.variance!r}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "GmmSpec":
        fields = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        try:
            weights = tuple(float(x) for x in fields["weights"].split())
            means = tuple(tuple(float(x) for x in row.split()) for row in fields["means"].split(";"))
            variance = float(fields.get("variance", 0.0))
        except KeyError as exc:
            raise ValueError(f"GMM block missing field {exc.args[0]!r}") from None
        return cls(weights, means, variance)


def point_masses(*centers: float) -> GmmSpec:
    """Equal-weight 1-D point masses, e.g. ``point_masses(-1, 1)``."""
    n = len(centers)
    return GmmSpec((1.0 / n,) * n, tuple((float(c),) for c in centers), 0.0)


def _square_layout(center: float, half_side: float, variance: float) -> GmmSpec:
    lo, hi = center - half_side, center + half_side
    return GmmSpec((0.25,) * 4, ((lo, lo), (hi, lo), (lo, hi), (hi, hi)), variance)


# Named 2-D, 4-component benchmarks. "corners" sits inside the unit square;
# "wide" and "far" space the modes out so that walk-jump sampling at
# sigma=0.5 and two-step denoising at sigma=1 have well-separated attractors.
BENCHMARKS = {
    "corners": _square_layout(0.5, 0.4, 0.0025),
    "wide": _square_layout(0.5, 1.25, 0.01),
    "far": _square_layout(0.5, 2.0, 0.2),
}


def benchmark(name: str) -> GmmSpec:
    try:
        return BENCHMARKS[name]
    except KeyError:
        raise ValueError(f"unknown GMM benchmark {name!r}; choose from {sorted(BENCHMARKS)}") from None


def gmm_sample_labeled(spec: GmmSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if n < 0:
        raise ValueError("n must be >= 0")
    labels = rng.choice(spec.n_components, size=n, p=np.asarray(spec.weights))
    x = spec.mean_array[labels]
    if spec.variance > 0:
        x = x + np.sqrt(spec.variance) * rng.standard_normal(x.shape)
    return x, labels


def gmm_sample(spec: GmmSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return gmm_sample_labeled(spec, n, rng)[0]


class OracleValues(NamedTuple):
    log_density: np.ndarray
    score: np.ndarray
    bayes_mean: np.ndarray


def gmm_smoothed_oracle(spec: GmmSpec, sigma: float, y) -> OracleValues:
    """Exact log-density, score and posterior mean of ``Y = X + N(0, sigma^2 I)``.

    ``y`` may be a single point ``(d,)`` or a batch ``(n, d)``.
    """
    total_var = spec.variance + sigma * sigma
    if sigma < 0 or total_var <= 0:
        raise ValueError("need sigma >= 0 and sigma^2 + variance > 0")
    spec = spec.support()
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    d = y2.shape[1]
    m = spec.mean_array
    diff = m[None, :, :] - y2[:, None, :]
    logits = np.log(np.asarray(spec.weights))[None, :] - 0.5 * np.sum(diff * diff, axis=2) / total_var
    top = logits.max(axis=1, keepdims=True)
    unnorm = np.exp(logits - top)
    norm = unnorm.sum(axis=1, keepdims=True)
    resp = unnorm / norm
    log_density = (top + np.log(norm))[:, 0] - 0.5 * d * np.log(2 * np.pi * total_var)
    score = np.einsum("nc,ncd->nd", resp, diff) / total_var
    bayes_mean = y2 + sigma * sigma * score
    if single:
        return OracleValues(log_density[0], score[0], bayes_mean[0])
    return OracleValues(log_density, score, bayes_mean)


def bayes_risk_mc(spec: GmmSpec, sigma: float, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo Bayes risk E||x - E[x|y]||^2 and its standard error."""
    x = gmm_sample(spec, n, rng)
    y = x + sigma * rng.standard_normal(x.shape)
    err = np.sum((x - gmm_smoothed_oracle(spec, sigma, y).bayes_mean) ** 2, axis=1)
    return float(err.mean()), float(err.std(ddof=1) / np.sqrt(n))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    train: np.ndarray
    test: np.ndarray
    value_range: tuple[float, float] | None = None
    image_shape: tuple[int, int] | None = None
    train_labels: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    gmm: GmmSpec | None = field(default=None, repr=False)

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=float)
        self.test = np.asarray(self.test, dtype=float)
        if self.train.ndim != 2 or self.test.ndim != 2 or self.train.shape[1] != self.test.shape[1]:
            raise ValueError("train and test must be matrices with the same column count")
        if not (np.all(np.isfinite(self.train)) and np.all(np.isfinite(self.test))):
            raise ValueError("dataset entries must be finite")

    @property
    def dim(self) -> int:
        return self.train.shape[1]


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split of ``range(n)`` into disjoint train/test index sets."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    n_train = int(round(fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} rows at fraction {fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:n_train], perm[n_train:]


def split(rows: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    tr, te = split_indices(len(rows), fraction, seed)
    rows = np.asarray(rows)
    return rows[tr], rows[te]


def gmm_dataset(spec: GmmSpec, n_train: int, n_test: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    x, labels = gmm_sample_labeled(spec, n_train + n_test, rng)
    return Dataset(
        train=x[:n_train],
        test=x[n_train:],
        train_labels=labels[:n_train],
        test_labels=labels[n_train:],
        gmm=spec,
    )


# ---------------------------------------------------------------------------
# IDX files


class IdxError(ValueError):
    """Base class for IDX parse failures."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array of its declared shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxMagicError(f"{path}: magic {magic}, expected {expected_magic}")
    if magic >> 8 != 0x08:
        raise IdxMagicError(f"{path}: magic {magic} is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - header < count:
        raise IdxTruncatedError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are supported")
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def mnist_load_idx(images_path, labels_path=None) -> Dataset:
    """Load an IDX image file (and optional labels) scaled into [0, 1].

    All rows land in ``train``; use :func:`split` to carve out a test set.
    """
    images = read_idx(images_path, IMAGE_MAGIC)
    if images.ndim != 3:
        raise IdxDimensionError(f"{images_path}: image file must be 3-D, got {images.ndim}-D")
    n, rows, cols = images.shape
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, LABEL_MAGIC)
        if labels.ndim != 1 or labels.shape[0] != n:
            raise IdxDimensionError(f"{labels_path}: {labels.shape[0]} labels for {n} images")
        labels = labels.astype(np.int64)
    x = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(
        train=x,
        test=np.zeros((0, rows * cols)),
        value_range=(0.0, 1.0),
        image_shape=(rows, cols),
        train_labels=labels,
    )


# ---------------------------------------------------------------------------
# CSV


def save_csv(path, matrix: np.ndarray, header: list[str] | None = None, int_columns: int = 0) -> None:
    """Write rows with round-trip float formatting; the first ``int_columns`` are written as integers."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write(",".join(header) + "\n")
        for row in matrix:
            cells = [str(int(v)) for v in row[:int_columns]] + [repr(float(v)) for v in row[int_columns:]]
            fh.write(",".join(cells) + "\n")


def load_csv(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    rows = []
    for line in lines:
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            if rows:
                raise
            continue  # header
    return np.array(rows, dtype=float)
