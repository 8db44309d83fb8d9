"""Jet datasets: CSV ingestion, Welford normalization, padding, synthetic jets.

A jet is a variable-length set of particles, each an opaque feature
vector. Batches are dense ``[jets, num_particles, num_features]`` arrays
where rows past a jet's true length are exactly zero.

CSV layout (one particle per row, jets grouped by ``jet_id``)::

    jet_id,label,p_index,f0,f1,...

``label`` is a class name from the manifest or an integer class id. The
manifest is JSON: ``{"num_features": F, "num_classes": C, "class_names": [...]}``.
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .rng import substream

STD_EPS = 1e-8
DEFAULT_CLASS_NAMES = ("g", "q", "W", "Z", "t")


@dataclass
class JetRecord:
    particles: np.ndarray
    label: int
    length: int = None

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        if self.length is None:
            self.length = len(self.particles)


@dataclass
class JetBatch:
    """Zero-padded jets: ``features`` [N, P, F], ``labels`` [N], ``lengths`` [N]."""

    features: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def num_particles(self):
        return self.features.shape[1]

    @property
    def num_features(self):
        return self.features.shape[2]

    def subset(self, index):
        return JetBatch(self.features[index], self.labels[index], self.lengths[index])

    def mask(self):
        """Boolean [N, P] marking real (non-padded) particles."""
        return np.arange(self.num_particles)[None, :] < self.lengths[:, None]

    def batches(self, batch_size, rng=None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(self), batch_size):
            yield self.subset(order[i : i + batch_size])

    def split(self, val_fraction=0.1, seed=0):
        """Seeded shuffle split into (train, validation); 0.1 gives 9:1."""
        order = substream(seed, "split").permutation(len(self))
        n_val = int(round(len(self) * val_fraction))
        return self.subset(order[n_val:]), self.subset(order[:n_val])

    def records(self):
        return [
            JetRecord(self.features[i, : self.lengths[i]].copy(), int(self.labels[i]))
            for i in range(len(self))
        ]

    @classmethod
    def from_records(cls, records, num_particles, num_features):
        padded = [truncate_pad(r, num_particles, num_features) for r in records]
        if not padded:
            return cls(np.zeros((0, num_particles, num_features)), [], [])
        return cls(
            np.stack([r.particles for r in padded]),
            [r.label for r in padded],
            [r.length for r in padded],
        )


def truncate_pad(record, num_particles, num_features):
    """Keep the first particles and features, then zero-pad to a fixed size.

    The returned record always has ``particles.shape == (num_particles,
    num_features)``; ``length`` counts the particles that are real.
    """
    rows = record.particles[: min(record.length, num_particles)]
    if num_features > rows.shape[1]:
        raise ContractError(f"record has {rows.shape[1]} features, {num_features} requested")
    out = np.zeros((num_particles, num_features))
    out[: len(rows)] = rows[:, :num_features]
    return JetRecord(out, record.label, len(rows))


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class NormStats:
    count: int
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"count": int(self.count), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["count"]), np.asarray(d["mean"], float), np.asarray(d["std"], float))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def checksum(self):
        return hashlib.sha256(json.dumps(self.to_dict()).encode()).hexdigest()


@dataclass
class Welford:
    """Single-pass running mean and sum of squared deviations per feature."""

    num_features: int
    count: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.num_features)
        if self.m2 is None:
            self.m2 = np.zeros(self.num_features)

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.num_features,):
            raise ContractError(f"expected {self.num_features} features, got shape {x.shape}")
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)
        return self

    def update_many(self, rows):
        for row in np.asarray(rows, dtype=np.float64).reshape(-1, self.num_features):
            self.update(row)
        return self

    def variance(self):
        if self.count < 2:
            raise ContractError("sample variance needs at least two samples")
        return self.m2 / (self.count - 1)

    def finalize(self, eps=STD_EPS):
        std = np.maximum(np.sqrt(self.variance()), eps)
        return NormStats(self.count, self.mean.copy(), std)


def welford_update(acc, x):
    return acc.update(x)


def fit_norm_stats(batch):
    """Per-feature statistics over the real particles of ``batch``."""
    return Welford(batch.num_features).update_many(batch.features[batch.mask()]).finalize()


def normalize(batch, stats):
    """Standardize real particles with ``stats``; padded rows stay exactly zero."""
    x = (batch.features - stats.mean) / stats.std
    x = np.where(batch.mask()[..., None], x, 0.0)
    return JetBatch(x, batch.labels.copy(), batch.lengths.copy())


# ---------------------------------------------------------------------------
# Files


@dataclass
class Manifest:
    num_features: int
    num_classes: int
    class_names: list = None

    def __post_init__(self):
        if self.class_names is None:
            self.class_names = [str(i) for i in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ContractError("class_names must have num_classes entries")

    def label_id(self, token):
        if token in self.class_names:
            return self.class_names.index(token)
        try:
            value = int(token)
        except ValueError:
            raise KeyError(token) from None
        if not 0 <= value < self.num_classes:
            raise KeyError(token)
        return value

    def save(self, path):
        Path(path).write_text(json.dumps(self.__dict__, indent=2))

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def write_csv(path, records, manifest):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["jet_id", "label", "p_index"] + [f"f{i}" for i in range(manifest.num_features)])
        for jet_id, rec in enumerate(records):
            name = manifest.class_names[rec.label]
            for p in range(rec.length):
                w.writerow([jet_id, name, p] + [repr(float(v)) for v in rec.particles[p]])


def load_csv(path, manifest):
    """Parse a particle CSV into JetRecords, in order of first appearance."""
    jets = {}
    nf = manifest.num_features
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        expected = ["jet_id", "label", "p_index"] + [f"f{i}" for i in range(nf)]
        if header != expected:
            raise ParseError(f"{path}:1: header {header} does not match {expected}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise ParseError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                jet_id, p_index = row[0], int(row[2])
                values = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            try:
                label = manifest.label_id(row[1])
            except KeyError:
                raise ParseError(f"{path}:{lineno}: unknown label {row[1]!r}") from None
            jet = jets.setdefault(jet_id, {"label": label, "rows": []})
            if jet["label"] != label:
                raise ParseError(f"{path}:{lineno}: jet {jet_id} changes label")
            jet["rows"].append((p_index, values))
    records = []
    for jet in jets.values():
        rows = [v for _, v in sorted(jet["rows"], key=lambda r: r[0])]
        records.append(JetRecord(np.array(rows, dtype=np.float64).reshape(-1, nf), jet["label"]))
    return records


def load_dir(path, split="train"):
    """Load ``<split>.csv`` from a data directory holding ``manifest.json``."""
    path = Path(path)
    manifest = Manifest.load(path / "manifest.json")
    return load_csv(path / f"{split}.csv", manifest), manifest


# ---------------------------------------------------------------------------
# Synthetic jets

_PHI = (1 + 5**0.5) / 2
# The six diagonals of an icosahedron: pairwise angles of about 63 degrees.
_AXES = np.array(
    [[0, 1, _PHI], [0, -1, _PHI], [1, _PHI, 0], [-1, _PHI, 0], [_PHI, 0, 1], [_PHI, 0, -1]]
) / np.sqrt(1 + _PHI**2)


def class_axes(num_classes, num_features):
    """Unit directions, one per class, spanning the informative features."""
    k = min(num_features, 3)
    if k == 3 and num_classes <= len(_AXES):
        axes = _AXES[:num_classes]
    else:
        axes = substream(0, "synth-axes", num_classes, num_features).normal(size=(num_classes, k))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    out = np.zeros((num_classes, num_features))
    out[:, :k] = axes
    return out


def synth_gen(seed, num_jets, num_particles, num_features, num_classes, noise=0.6, min_particles=None):
    """Generate balanced synthetic jets.

    Each class owns an axis ``u_c``. A particle of class ``c`` is
    ``s * r * u_c + noise * e`` with a random sign ``s``, radius
    ``r ~ N(1.5, 0.3)`` and isotropic Gaussian ``e``: a two-component mixture
    centred at ``±1.5 u_c``. Every class has zero mean, so no linear function
    of the raw features separates them, but the orientation of the particle
    cloud identifies the class. Jets hold between ``min_particles`` (default
    half of ``num_particles``) and ``num_particles`` particles.
    """
    if num_classes < 2:
        raise ContractError("synth_gen needs at least two classes")
    rng = substream(seed, "synth")
    axes = class_axes(num_classes, num_features)
    lo = max(1, num_particles // 2) if min_particles is None else min_particles
    labels = rng.permutation(np.arange(num_jets) % num_classes)
    records = []
    for label in labels:
        n = int(rng.integers(lo, num_particles + 1))
        signs = rng.choice([-1.0, 1.0], size=(n, 1))
        radius = rng.normal(1.5, 0.3, size=(n, 1))
        parts = signs * radius * axes[label] + noise * rng.normal(size=(n, num_features))
        records.append(JetRecord(parts, int(label)))
    return records
