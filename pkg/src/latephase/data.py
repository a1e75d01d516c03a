"""Synthetic classification data, OOD sets, stratified splits and CSV I/O."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .numerics import RngStream

SCHEMA_VERSION = 1
OOD_ID_OFFSET = 10**12
DRAW_ID_STRIDE = 10**9
OOD_LABEL = -1
GENERATORS = ("gauss_blobs", "rings")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int
    provenance: str = ""
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise DataError(f"{self.labels.shape[0]} labels for {n} rows")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or infinite values")
        ok = ((self.labels >= 0) & (self.labels < self.classes)) | (self.labels == OOD_LABEL)
        if not np.all(ok):
            raise DataError(f"labels must lie in [0, {self.classes}) or be {OOD_LABEL}")
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (n,):
            raise DataError("ids must have one entry per row")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def is_ood(self):
        return len(self) > 0 and bool(np.all(self.labels == OOD_LABEL))

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[index], self.labels[index], self.classes,
                       self.provenance, self.ids[index])

    def with_features(self, features):
        return Dataset(features, self.labels, self.classes, self.provenance, self.ids)


@dataclass
class SyntheticSpec:
    """``gauss_blobs``: unit-variance clusters whose means are pairwise
    ``separation`` apart. ``rings``: class ``c`` on the circle of radius
    ``c + 1`` with isotropic noise; always two features."""

    generator: str = "gauss_blobs"
    classes: int = 4
    features: int = 8
    separation: float = 3.0
    noise: float = 0.1
    n: int = 2000
    seed: int = 0

    def validate(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}")
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.n < self.classes:
            raise ConfigError("n must be at least the number of classes")
        if self.generator == "gauss_blobs":
            if not self.separation > 0:
                raise ConfigError("separation must be positive")
            if self.features < 1:
                raise ConfigError("features must be positive")
        elif self.features != 2:
            raise ConfigError("rings data has exactly two features")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")
        return self

    def describe(self):
        return f"synthetic:{self.generator}:C={self.classes}:F={self.features}:seed={self.seed}"


def class_counts(n, classes):
    return [n // classes + (1 if c < n % classes else 0) for c in range(classes)]


def class_means(spec: SyntheticSpec):
    """Cluster centers; depend only on (classes, features, separation, seed)."""
    gen = RngStream(spec.seed, (0,)).generator
    raw = gen.standard_normal((spec.features, spec.classes))
    if spec.classes <= spec.features:
        q, _ = np.linalg.qr(raw)
        directions = q.T
    else:
        directions = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    return directions * (spec.separation / np.sqrt(2.0))


def _sample_classes(spec: SyntheticSpec, labels, gen):
    n = len(labels)
    if spec.generator == "gauss_blobs":
        return class_means(spec)[labels] + gen.standard_normal((n, spec.features))
    angle = gen.uniform(0.0, 2.0 * np.pi, n)
    radius = (labels + 1).astype(np.float64)
    x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    if spec.noise > 0:
        x = x + spec.noise * gen.standard_normal((n, 2))
    return x


def generate(spec: SyntheticSpec, draw: int = 0, n: int | None = None) -> Dataset:
    """Balanced dataset in a seeded random order.

    ``draw`` selects an independent sample of the same distribution (the class
    means are fixed by ``spec.seed``); draws other than 0 get disjoint ids.
    """
    spec.validate()
    n = spec.n if n is None else int(n)
    if n < spec.classes:
        raise ConfigError("n must be at least the number of classes")
    gen = RngStream(spec.seed, (1, int(draw))).generator
    labels = np.concatenate([np.full(k, c) for c, k in enumerate(class_counts(n, spec.classes))])
    labels = labels[gen.permutation(n)]
    features = _sample_classes(spec, labels, gen)
    ids = int(draw) * DRAW_ID_STRIDE + np.arange(n, dtype=np.int64)
    provenance = spec.describe() + (f":draw={draw}" if draw else "")
    return Dataset(features, labels, spec.classes, provenance, ids)


def make_ood(spec: SyntheticSpec, shift=None, novel_cluster=False, n=None, seed=0,
             spread=1.0) -> Dataset:
    """Out-of-distribution samples for ``spec``; labels are invalid (-1).

    With ``novel_cluster`` the samples form one isotropic cluster of scale
    ``spread`` at the centroid of the class means, displaced by ``shift``
    if given. Otherwise they are fresh in-distribution draws translated by
    ``shift`` (a scalar is added to every coordinate; zero gives the null set).
    """
    spec.validate()
    n = spec.n if n is None else int(n)
    if n < 1:
        raise ConfigError("n must be positive")
    gen = RngStream(spec.seed, (2, int(seed))).generator
    offset = np.zeros(spec.features)
    if shift is not None:
        offset = np.broadcast_to(np.asarray(shift, dtype=np.float64), (spec.features,)).copy()
    if novel_cluster:
        if spec.generator == "gauss_blobs":
            center = class_means(spec).mean(axis=0)
        else:
            center = np.zeros(2)
        x = center + offset + spread * gen.standard_normal((n, spec.features))
        kind = f"novel_cluster:spread={spread}"
    else:
        labels = gen.integers(0, spec.classes, n)
        x = _sample_classes(spec, labels, gen) + offset
        kind = "translate"
    shift_desc = "0" if shift is None else ",".join(repr(float(v)) for v in np.ravel(shift))
    provenance = f"ood:{kind}:shift={shift_desc}:seed={seed}:from={spec.describe()}"
    ids = OOD_ID_OFFSET + np.arange(n, dtype=np.int64)
    return Dataset(x, np.full(n, OOD_LABEL), spec.classes, provenance, ids)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features):
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] == 0:
            raise DataError("cannot fit a standardizer on an empty dataset")
        std = features.std(axis=0)
        return cls(features.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, data: Dataset) -> Dataset:
        return data.with_features((data.features - self.mean) / self.std)


def _split_key(seed, sample_id):
    digest = hashlib.blake2b(f"{int(seed)}:{int(sample_id)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _apportion(n, fractions):
    exact = [n * f for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    order = sorted(range(len(fractions)), key=lambda j: (-(exact[j] - counts[j]), j))
    for j in order[:n - sum(counts)]:
        counts[j] += 1
    return counts


def split(dataset: Dataset, fractions=(0.8, 0.2), seed=0):
    """Deterministic stratified split into ``len(fractions)`` parts.

    Within each class, samples are ordered by a keyed hash of their id, so the
    partition depends only on sample identities and the seed, never on row
    order.
    """
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("fractions must be nonnegative and sum to 1")
    if len(np.unique(dataset.ids)) != len(dataset):
        raise DataError("split needs unique sample ids")
    active = sum(1 for f in fractions if f > 0)
    parts = [[] for _ in fractions]
    for c in np.unique(dataset.labels):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) < active:
            raise DataError(f"class {c} has {len(members)} samples for {active} parts")
        members = sorted(members, key=lambda i: _split_key(seed, dataset.ids[i]))
        start = 0
        for j, count in enumerate(_apportion(len(members), fractions)):
            parts[j].extend(members[start:start + count])
            start += count
    out = []
    for idx in parts:
        idx = sorted(idx, key=lambda i: _split_key(seed, dataset.ids[i]))
        out.append(dataset.subset(np.array(idx, dtype=np.int64)))
    return tuple(out)


def save_csv(dataset: Dataset, path, with_ids=True):
    """Comment preamble, header ``f0..fF-1,label[,id]``, one row per sample."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version: {SCHEMA_VERSION}\n")
        fh.write(f"# provenance: {dataset.provenance}\n")
        fh.write(f"# classes: {dataset.classes}\n")
        writer = csv.writer(fh, lineterminator="\n")
        header = [f"f{j}" for j in range(dataset.n_features)] + ["label"]
        if with_ids:
            header.append("id")
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.features[i]] + [str(int(dataset.labels[i]))]
            if with_ids:
                row.append(str(int(dataset.ids[i])))
            writer.writerow(row)


def load_csv(path) -> Dataset:
    path = Path(path)
    meta = {}
    header = None
    rows, labels, ids = [], [], []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                meta[key.strip()] = value.strip()
                continue
            if not line.strip():
                continue
            cells = next(csv.reader([line]))
            if header is None:
                header = [c.strip() for c in cells]
                if "label" not in header:
                    raise DataError("missing required column 'label'", line=lineno)
                feats = [c for c in header if c not in ("label", "id")]
                if feats != [f"f{j}" for j in range(len(feats))]:
                    raise DataError("feature columns must be named f0..fF-1 in order", line=lineno)
                label_col = header.index("label")
                id_col = header.index("id") if "id" in header else None
                feat_cols = [header.index(c) for c in feats]
                continue
            if len(cells) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(cells)}", line=lineno)
            try:
                rows.append([float(cells[j]) for j in feat_cols])
            except ValueError as exc:
                raise DataError(f"bad feature value ({exc})", line=lineno) from None
            try:
                labels.append(int(cells[label_col]))
                if id_col is not None:
                    ids.append(int(cells[id_col]))
            except ValueError:
                raise DataError("label and id must be integers", line=lineno) from None
    if header is None:
        raise DataError(f"{path}: no header row")
    if not rows:
        raise DataError(f"{path}: file has no data rows")
    labels = np.array(labels, dtype=np.int64)
    if "classes" in meta:
        classes = int(meta["classes"])
    else:
        classes = int(labels.max()) + 1 if labels.max() >= 0 else 1
    return Dataset(np.array(rows, dtype=np.float64), labels, classes,
                   meta.get("provenance", ""), np.array(ids) if ids else None)


def dataset_manifest(dataset: Dataset, spec: SyntheticSpec | None = None) -> dict:
    out = {"schema_version": SCHEMA_VERSION, "N": len(dataset), "F": dataset.n_features,
           "C": dataset.classes, "provenance": dataset.provenance}
    if spec is not None:
        out.update({"seed": spec.seed, "generator": spec.generator, "spec": asdict(spec)})
    return out


def write_manifest(dataset: Dataset, path, spec: SyntheticSpec | None = None):
    Path(path).write_text(json.dumps(dataset_manifest(dataset, spec), indent=2, sort_keys=True) + "\n")
