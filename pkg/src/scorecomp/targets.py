"""Analytic Gaussian-mixture targets and dataset ingestion.

A mixture diffused by the VP kernel stays a mixture: component ``i`` becomes
``N(sqrt(ab) mu_i, ab Sigma_i + (1 - ab) I)``. Scores and log-densities of
that mixture are exact, which makes it the ground truth for every sampler
and training check in the package.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import container
from .errors import DataError, DomainError, NumericError
from .sde import DiffusionSchedule


@dataclass(frozen=True)
class GaussianMixtureTarget:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        cov = np.asarray(self.covariances, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise DomainError(f"mixture weights must be a probability vector, got {w}")
        if not (len(w) == len(mu) == len(cov)):
            raise DomainError("weights, means and covariances disagree in length")
        d = mu.shape[1]
        if cov.shape[1:] != (d, d):
            raise DomainError(f"covariances must be {d}x{d}")
        for c in cov:
            if not np.allclose(c, c.T):
                raise DomainError("covariance not symmetric")
            if np.linalg.eigvalsh(c).min() <= 0:
                raise DomainError("covariance not positive definite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def isotropic(cls, means, variances=1.0, weights=None):
        mu = np.atleast_2d(np.asarray(means, dtype=np.float64))
        n, d = mu.shape
        var = np.broadcast_to(np.asarray(variances, dtype=np.float64), (n,))
        w = np.full(n, 1.0 / n) if weights is None else weights
        return cls(w, mu, var[:, None, None] * np.eye(d))

    @classmethod
    def standard_normal(cls, dim: int):
        return cls.isotropic(np.zeros((1, dim)))

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def diffused(self, t, sched: DiffusionSchedule):
        """Component means and covariances of the mixture at time ``t``."""
        ab = float(sched.alpha_bar(t))
        eye = np.eye(self.dim)
        return np.sqrt(ab) * self.means, ab * self.covariances + (1.0 - ab) * eye


def _component_terms(target, x, t, sched):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite point passed to the mixture oracle")
    means, covs = target.diffused(t, sched)
    chol = np.linalg.cholesky(covs)
    logdens, scores = [], []
    for m, c, L in zip(means, covs, chol):
        diff = x - m
        sol = np.linalg.solve(c, diff.T).T
        logdet = 2.0 * np.log(np.diag(L)).sum()
        maha = np.einsum("ij,ij->i", diff, sol)
        logdens.append(-0.5 * (maha + logdet + target.dim * np.log(2 * np.pi)))
        scores.append(-sol)
    logw = np.log(np.where(target.weights > 0, target.weights, 1.0))
    logw = np.where(target.weights > 0, logw, -np.inf)
    return np.stack(logdens, axis=1) + logw, np.stack(scores, axis=1)


def _per_time(fn, x, t):
    """Apply ``fn(x, scalar_t)`` row-wise when ``t`` is an array of per-row times."""
    if np.ndim(t) == 0:
        return fn(x, float(t))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    out = None
    for tv in np.unique(t):
        rows = t == tv
        part = fn(x[rows], float(tv))
        if out is None:
            out = np.empty((len(x),) + part.shape[1:])
        out[rows] = part
    return out


def analytic_logpdf(target: GaussianMixtureTarget, x, t, sched: DiffusionSchedule):
    """Exact log-density of the diffused mixture; returns shape ``(n,)``."""

    def f(xs, ts):
        logp, _ = _component_terms(target, xs, ts, sched)
        return logsumexp(logp, axis=1)

    return _per_time(f, x, t)


def analytic_score(target: GaussianMixtureTarget, x, t, sched: DiffusionSchedule):
    """Exact ``grad_x log p_t(x)`` as responsibility-weighted component scores.

    ``t`` may be a scalar or one time per row of ``x``.
    """

    def f(xs, ts):
        logp, scores = _component_terms(target, xs, ts, sched)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        return np.einsum("nk,nkd->nd", resp, scores)

    return _per_time(f, x, t)


def sample_target(target: GaussianMixtureTarget, n: int, rng: np.random.Generator,
                  return_components: bool = False):
    """Ancestral sampling: component index first, then the Gaussian."""
    comp = rng.choice(len(target.weights), size=n, p=target.weights)
    chol = np.linalg.cholesky(target.covariances)
    z = rng.standard_normal((n, target.dim))
    x = target.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)
    return (x, comp) if return_components else x


@dataclass
class Dataset:
    """Training data as an ``(N, d)`` float32 array.

    ``kind`` is ``"point-cloud"`` or ``"image"``; images are flattened row-major
    and mapped to [-1, 1] by ``v / 127.5 - 1``.
    """

    points: np.ndarray
    kind: str = "point-cloud"
    image_shape: tuple[int, int] | None = None
    normalization: dict = field(default_factory=lambda: {"scale": 1.0, "offset": 0.0})

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise DataError(f"dataset must be a non-empty 2-D array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("dataset contains non-finite values")
        if self.kind not in ("point-cloud", "image"):
            raise DataError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "image":
            if self.image_shape is None:
                raise DataError("image dataset requires image_shape")
            h, w = self.image_shape
            if h * w != pts.shape[1]:
                raise DataError(f"image_shape {self.image_shape} does not match {pts.shape[1]} features")
            self.image_shape = (int(h), int(w))
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _load_csv(path: Path) -> Dataset:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
            if rows and len(values) != len(rows[0]):
                raise DataError(
                    f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(values)}"
                )
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(rows, dtype=np.float32))


def _read_pgm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = (int(v) for v in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise DataError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1
    data = blob[pos : pos + width * height]
    if len(data) != width * height:
        raise DataError(f"{path}: expected {width * height} pixels, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width)


def _load_pgm_dir(path: Path) -> Dataset:
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise DataError(f"{path}: no .pgm files")
    images = []
    for f in files:
        img = _read_pgm(f)
        if images and img.shape != images[0].shape:
            raise DataError(f"{f}: shape {img.shape} differs from {images[0].shape}")
        images.append(img)
    shape = images[0].shape
    flat = np.stack([im.reshape(-1) for im in images]).astype(np.float64)
    return Dataset(
        (flat / 127.5 - 1.0).astype(np.float32),
        kind="image",
        image_shape=shape,
        normalization={"scale": 1 / 127.5, "offset": -1.0},
    )


def load_dataset(path, format: str | None = None) -> Dataset:
    """Load ``csv``, ``tensor-bin`` or ``pgm-dir`` data; format is inferred if omitted."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file or directory")
    if format is None:
        if path.is_dir():
            format = "pgm-dir"
        elif path.suffix.lower() == ".csv":
            format = "csv"
        else:
            format = "tensor-bin"
    if format == "csv":
        return _load_csv(path)
    if format == "pgm-dir":
        return _load_pgm_dir(path)
    if format == "tensor-bin":
        try:
            meta, tensors = container.read(path)
        except Exception as exc:
            raise DataError(f"{path}: {exc}") from None
        if "points" not in tensors:
            raise DataError(f"{path}: container has no 'points' tensor")
        shape = meta.get("image_shape")
        return Dataset(
            tensors["points"],
            kind=meta.get("kind", "point-cloud"),
            image_shape=tuple(shape) if shape else None,
            normalization=meta.get("normalization", {"scale": 1.0, "offset": 0.0}),
        )
    raise DataError(f"unknown dataset format {format!r}")


def save_dataset(ds: Dataset, path) -> None:
    meta = {
        "kind": ds.kind,
        "image_shape": list(ds.image_shape) if ds.image_shape else None,
        "normalization": ds.normalization,
    }
    container.write(path, meta, {"points": ds.points})


def write_pgm(path, image: np.ndarray) -> None:
    """Write a uint8 image (values already in 0..255) as binary PGM."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    container.atomic_write(path, f"P5\n{w} {h}\n255\n".encode() + image.tobytes())


def to_pixels(values: np.ndarray) -> np.ndarray:
    """Inverse of the [-1, 1] normalization, clipped and rounded to uint8."""
    return np.clip(np.rint((np.asarray(values) + 1.0) * 127.5), 0, 255).astype(np.uint8)
