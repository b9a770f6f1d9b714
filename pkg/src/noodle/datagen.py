"""Synthetic labeled mixtures, label-noise injection, and the CSV interchange format.

The CSV schema is shared by every file the pipeline reads or writes:

    label,noisy_label,f0,f1,...,f{d-1}

with integer label columns and features printed to 17 significant digits so a
write/read round trip is exact in float64.  Out-of-distribution files use the
same schema with both label columns set to -1.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

OOD_MODES = ("far_cluster", "uniform_shell")

# Feature format: 17 significant digits round-trips any float64 exactly.
_FLOAT_FMT = "%.16e"


@dataclass
class NoiseSpec:
    """Label corruption model. ``rate`` is the probability a label is flipped."""

    kind: str = "symmetric"
    rate: float = 0.0

    def validate(self) -> None:
        if self.kind != "symmetric":
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"noise rate must be in [0, 1], got {self.rate}")


@dataclass
class LabeledSet:
    """In-distribution samples with parallel clean and (possibly) noisy labels."""

    features: np.ndarray       # (n, dim) float64
    clean_labels: np.ndarray   # (n,) int64 in [0, num_classes)
    noisy_labels: np.ndarray   # (n,) int64 in [0, num_classes)
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64)
        self.noisy_labels = np.asarray(self.noisy_labels, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D (n, dim) array")
        if self.clean_labels.shape != (n,) or self.noisy_labels.shape != (n,):
            raise ValueError("label arrays must match the number of feature rows")
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        for name, lab in (("clean", self.clean_labels), ("noisy", self.noisy_labels)):
            if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
                raise ValueError(f"{name} labels outside [0, {self.num_classes})")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite entries")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _spread_out_means(
    num_classes: int, dim: int, separation: float, rng: np.random.Generator
) -> np.ndarray:
    """Place class means on a sphere, growing the radius until all pairwise
    distances reach ``separation``."""
    radius = max(separation, 1e-12)
    for _ in range(200):
        directions = rng.standard_normal((num_classes, dim))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        if (norms < 1e-12).any():
            continue
        means = radius * directions / norms
        diffs = means[:, None, :] - means[None, :, :]
        dist = np.linalg.norm(diffs, axis=-1)
        dist[np.diag_indices(num_classes)] = np.inf
        if dist.min() >= separation:
            return means
        radius *= 1.25
    raise RuntimeError("could not place class means; try a larger dim or smaller separation")


def make_gaussian_mixture(
    num_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    spread: float,
    rng: np.random.Generator,
) -> LabeledSet:
    """Sample an isotropic Gaussian mixture with well-separated class means.

    Args:
        num_classes: number of mixture components, >= 2.
        per_class: samples drawn per component, >= 1.
        dim: feature dimension, >= 1.
        separation: minimum pairwise distance between class means, > 0.
        spread: per-coordinate standard deviation around each mean, > 0.
        rng: generator; the means and the draws are both functions of it, so a
            fixed seed reproduces the set bit for bit.

    Returns:
        A LabeledSet whose noisy labels start out equal to the clean ones.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if separation <= 0 or spread <= 0:
        raise ValueError("separation and spread must be positive")

    means = _spread_out_means(num_classes, dim, separation, rng)
    features = np.empty((num_classes * per_class, dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = means[c] + spread * rng.standard_normal((per_class, dim))
        labels[block] = c
    return LabeledSet(
        features=features,
        clean_labels=labels,
        noisy_labels=labels.copy(),
        num_classes=num_classes,
        meta={"means": means, "separation": separation, "spread": spread},
    )


def _empirical_geometry(id_set: LabeledSet) -> tuple[np.ndarray, float]:
    """Class means and pooled per-coordinate standard deviation of ``id_set``."""
    means = np.stack(
        [id_set.features[id_set.clean_labels == c].mean(axis=0) for c in range(id_set.num_classes)]
    )
    centered = id_set.features - means[id_set.clean_labels]
    scale = float(np.sqrt((centered**2).sum() / max(id_set.features.size, 1)))
    return means, (scale if scale > 0 else 1.0)


def make_ood_set(id_set: LabeledSet, n: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` out-of-distribution points positioned relative to ``id_set``.

    ``far_cluster`` places a tight Gaussian blob well outside the mixture:
    its center sits 10 empirical-spread units beyond the farthest class mean
    (measured from the mixture centroid) and each draw is truncated to stay
    within 6 spread units of the blob center, so every point keeps a margin
    of at least 3 spread units from all ID class means.  ``uniform_shell``
    samples uniformly from the sphere of radius ``max_c ||mu_c|| + 10 *
    spread`` about the origin.

    Returns an (n, dim) feature array; OOD points carry no labels.
    """
    if mode not in OOD_MODES:
        raise ValueError(f"mode must be one of {OOD_MODES}, got {mode!r}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")

    means, scale = _empirical_geometry(id_set)
    dim = id_set.dim
    out = np.empty((n, dim))
    if mode == "far_cluster":
        centroid = means.mean(axis=0)
        reach = float(np.linalg.norm(means - centroid, axis=1).max())
        direction = _unit_vector(dim, rng)
        center = centroid + (reach + 10.0 * scale) * direction
        sigma = 3.0 * scale / np.sqrt(dim)
        for i in range(n):
            while True:
                offset = sigma * rng.standard_normal(dim)
                if np.linalg.norm(offset) <= 6.0 * scale:
                    break
            out[i] = center + offset
    else:
        radius = float(np.linalg.norm(means, axis=1).max()) + 10.0 * scale
        for i in range(n):
            out[i] = radius * _unit_vector(dim, rng)
    return out


def _unit_vector(dim: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(dim)
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            return v / norm


def inject_symmetric_noise(
    labels: np.ndarray, spec: NoiseSpec, num_classes: int, rng: np.random.Generator
) -> np.ndarray:
    """Flip each label with probability ``spec.rate`` to a uniformly random
    *different* class.

    The draw is vectorized: one uniform per sample decides the flip, one
    integer draw per sample picks the replacement among the other
    ``num_classes - 1`` classes.  Expected flip fraction is exactly the rate
    and the replacement is uniform over wrong classes.
    """
    spec.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError("labels must be 1-D")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    if num_classes < 2:
        raise ValueError("symmetric noise needs at least 2 classes")

    flip = rng.random(labels.size) < spec.rate
    draw = rng.integers(0, num_classes - 1, size=labels.size)
    # Skip over the original class so the replacement is uniform on the rest.
    replacement = np.where(draw >= labels, draw + 1, draw)
    return np.where(flip, replacement, labels)


# ---------------------------------------------------------------------------
# CSV interchange


def _header(dim: int) -> str:
    return "label,noisy_label," + ",".join(f"f{j}" for j in range(dim))


def save_features_csv(dataset: LabeledSet, path: str | os.PathLike) -> None:
    """Write ``dataset`` in the shared CSV schema (UTF-8, LF line endings)."""
    _write_rows(path, dataset.features, dataset.clean_labels, dataset.noisy_labels)


def save_ood_csv(features: np.ndarray, path: str | os.PathLike) -> None:
    """Write unlabeled OOD features; both label columns are set to -1."""
    features = np.asarray(features, dtype=float)
    sentinel = np.full(features.shape[0], -1, dtype=np.int64)
    _write_rows(path, features, sentinel, sentinel)


def _write_rows(
    path: str | os.PathLike, features: np.ndarray, clean: np.ndarray, noisy: np.ndarray
) -> None:
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("need a non-empty 2-D feature array")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_header(features.shape[1]) + "\n")
        for c, y, row in zip(clean, noisy, features):
            fh.write(f"{c},{y}," + ",".join(_FLOAT_FMT % v for v in row) + "\n")


def _parse_rows(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared strict parser. Returns (features, clean, noisy); raises ValueError
    naming the offending line on any malformed content."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        cols = header.split(",")
        if cols[:2] != ["label", "noisy_label"] or len(cols) < 3:
            raise ValueError(f"{path}: line 1: bad header {header!r}")
        dim = len(cols) - 2
        if cols[2:] != [f"f{j}" for j in range(dim)]:
            raise ValueError(f"{path}: line 1: feature columns must be f0..f{dim - 1}")

        clean: list[int] = []
        noisy: list[int] = []
        rows: list[np.ndarray] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dim + 2:
                raise ValueError(
                    f"{path}: line {lineno}: expected {dim + 2} fields, got {len(parts)}"
                )
            try:
                clean.append(int(parts[0]))
                noisy.append(int(parts[1]))
                values = np.array(parts[2:], dtype=float)
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            if not np.isfinite(values).all():
                raise ValueError(f"{path}: line {lineno}: non-finite feature value")
            rows.append(values)
        if not rows:
            raise ValueError(f"{path}: no data rows")
    return np.stack(rows), np.array(clean, dtype=np.int64), np.array(noisy, dtype=np.int64)


def load_features_csv(path: str | os.PathLike, num_classes: int | None = None) -> LabeledSet:
    """Read a labeled CSV back into a :class:`LabeledSet`.

    When ``num_classes`` is omitted it is inferred as ``max(label) + 1`` (with
    a floor of 2); pass it explicitly to validate files against a known class
    count.
    """
    features, clean, noisy = _parse_rows(path)
    if clean.min() < 0 or noisy.min() < 0:
        raise ValueError(f"{path}: negative labels in an ID file")
    inferred = int(max(clean.max(), noisy.max())) + 1
    if num_classes is None:
        num_classes = max(inferred, 2)
    elif inferred > num_classes:
        raise ValueError(f"{path}: labels require >= {inferred} classes, got {num_classes}")
    return LabeledSet(features, clean, noisy, num_classes)


def load_ood_csv(path: str | os.PathLike) -> np.ndarray:
    """Read an OOD CSV, returning only the feature block.

    Label columns are ignored, so any file in the shared schema can be scored
    as OOD (useful for sanity checks that score an ID file as if it were OOD).
    """
    features, _, _ = _parse_rows(path)
    return features
