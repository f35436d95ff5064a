"""Synthetic domain-shift datasets, target-label quarantine, and CSV I/O."""

from __future__ import annotations

import csv
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import rng as rngmod

SOURCE, TARGET = 1, 0
NO_LABEL = -1


class LeakageError(RuntimeError):
    """Target ground truth was read outside an evaluation scope."""


class LabelGuard:
    """Counts reads of quarantined labels and rejects those outside a scope."""

    def __init__(self):
        self.reads_inside = 0
        self.reads_outside = 0
        self._depth = 0

    @contextmanager
    def evaluation(self):
        self._depth += 1
        try:
            yield self
        finally:
            self._depth -= 1

    @property
    def active(self) -> bool:
        return self._depth > 0

    def check(self, what: str) -> None:
        if self._depth:
            self.reads_inside += 1
            return
        self.reads_outside += 1
        raise LeakageError(f"quarantined labels of {what} read outside evaluation")

    def reset(self) -> None:
        self.reads_inside = 0
        self.reads_outside = 0


GUARD = LabelGuard()


class Sample(NamedTuple):
    id: int
    features: tuple
    label: int | None
    domain: int
    view: str | None


class Dataset:
    """Columnar sample store.

    Labels of target-domain rows are quarantined: :attr:`labels` raises
    :class:`LeakageError` unless read inside ``GUARD.evaluation()``.
    Training code should use :attr:`source_labels`, which only exists for
    all-source datasets.
    """

    def __init__(self, ids, features, labels, domain, view=None, name=""):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.features = np.asarray(features, dtype=np.float64)
        self._labels = np.asarray(labels, dtype=np.int64)
        self.domain = np.asarray(domain, dtype=np.int64)
        self.view = view
        self.name = name
        n = len(self.ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be an (n, d) array matching ids")
        if self._labels.shape != (n,) or self.domain.shape != (n,):
            raise ValueError("labels and domain must have one entry per sample")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        if len(np.unique(self.ids)) != n:
            raise ValueError("sample ids must be unique")
        if not np.isin(self.domain, (SOURCE, TARGET)).all():
            raise ValueError("domain must be 0 (target) or 1 (source)")
        src = self.domain == SOURCE
        if (self._labels[src] < 0).any():
            raise ValueError("source samples must be labeled")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def quarantined(self) -> bool:
        return bool((self.domain == TARGET).any())

    @property
    def labels(self) -> np.ndarray:
        if self.quarantined:
            GUARD.check(self.name or "target dataset")
        return self._labels

    @property
    def source_labels(self) -> np.ndarray:
        if self.quarantined:
            raise LeakageError("source_labels requested on a dataset with target rows")
        return self._labels

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.ids[idx], self.features[idx], self._labels[idx],
                       self.domain[idx], self.view, self.name)

    def samples(self) -> Iterator[Sample]:
        with GUARD.evaluation():
            labels = self.labels
        for i in range(len(self)):
            lab = int(labels[i])
            yield Sample(int(self.ids[i]), tuple(self.features[i]),
                         None if lab < 0 else lab, int(self.domain[i]), self.view)

    def equals(self, other: "Dataset") -> bool:
        return (np.array_equal(self.ids, other.ids)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self._labels, other._labels)
                and np.array_equal(self.domain, other.domain)
                and self.view == other.view)


@dataclass
class ShiftSpec:
    generator: str = "moons"
    classes: int = 2
    n_source: int = 500
    n_target: int = 500
    rotation: float = 0.0
    translation: list = field(default_factory=lambda: [0.0, 0.0])
    noise_sigma: float = 0.1
    dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.generator not in ("moons", "blobs"):
            raise ValueError(f"generator must be 'moons' or 'blobs', got {self.generator!r}")
        if self.generator == "moons" and (self.classes != 2 or self.dim != 2):
            raise ValueError("moons generator is 2-class and 2-D")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.n_source < self.classes or self.n_target < self.classes:
            raise ValueError("sample counts must be >= classes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.rotation != 0 and self.dim != 2:
            raise ValueError("rotation is only defined for 2-D generators")
        self.translation = [float(t) for t in self.translation]
        if len(self.translation) != self.dim:
            raise ValueError(f"translation must have {self.dim} entries")

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown spec key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _class_counts(n: int, k: int) -> np.ndarray:
    return np.array([n // k + (c < n % k) for c in range(k)])


def _moons(rng, labels, sigma):
    t = rng.uniform(0.0, math.pi, size=len(labels))
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.where(labels[:, None] == 0, upper, lower)
    x = x - np.array([0.5, 0.25])
    return x + rng.normal(scale=sigma, size=x.shape)


def _blob_centers(spec: ShiftSpec) -> np.ndarray:
    if spec.dim == 2:
        ang = 2 * math.pi * np.arange(spec.classes) / spec.classes
        return 2.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    crng = rngmod.stream(spec.seed, "data", 99)
    return crng.normal(scale=2.0, size=(spec.classes, spec.dim))


def _draw(spec: ShiftSpec, rng, n: int):
    labels = np.repeat(np.arange(spec.classes), _class_counts(n, spec.classes))
    rng.shuffle(labels)
    if spec.generator == "moons":
        x = _moons(rng, labels, spec.noise_sigma)
    else:
        x = _blob_centers(spec)[labels] + rng.normal(scale=spec.noise_sigma, size=(n, spec.dim))
    return x, labels


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def generate(spec: ShiftSpec) -> tuple[Dataset, Dataset]:
    """Draw source and target sets; the target is rotated then translated."""
    xs, ys = _draw(spec, rngmod.stream(spec.seed, "data", 0), spec.n_source)
    xt, yt = _draw(spec, rngmod.stream(spec.seed, "data", 1), spec.n_target)
    if spec.dim == 2:
        xt = xt @ rotation_matrix(spec.rotation).T
    xt = xt + np.asarray(spec.translation)
    ids_s = np.arange(spec.n_source)
    ids_t = spec.n_source + np.arange(spec.n_target)
    source = Dataset(ids_s, xs, ys, np.full(spec.n_source, SOURCE), name="source")
    target = Dataset(ids_t, xt, yt, np.full(spec.n_target, TARGET), name="target")
    return source, target


@dataclass
class PairedDataset:
    source_a: Dataset
    target_a: Dataset
    source_b: Dataset
    target_b: Dataset

    def __post_init__(self):
        for a, b in ((self.source_a, self.source_b), (self.target_a, self.target_b)):
            if not np.array_equal(a.ids, b.ids):
                raise ValueError("view A and view B must share sample ids in the same order")
            if not (np.array_equal(a._labels, b._labels) and np.array_equal(a.domain, b.domain)):
                raise ValueError("views must share labels and domains")

    def view(self, tag: str) -> tuple[Dataset, Dataset]:
        if tag == "A":
            return self.source_a, self.target_a
        if tag == "B":
            return self.source_b, self.target_b
        raise KeyError(tag)


def generate_paired(spec: ShiftSpec, projection_seed: int, view_dim: int = 2,
                    view_noise: float = 0.2, maps: str = "random") -> PairedDataset:
    """Two noisy linear views of one latent sample per id.

    Each view sees the latent through its own fixed map plus independent
    Gaussian noise, so either view predicts the label on its own while
    their errors are not shared.
    """
    source, target = generate(spec)
    d = spec.dim
    if maps == "identity":
        if view_dim != d:
            raise ValueError("identity maps require view_dim == latent dim")
        ma = mb = np.eye(d)
    elif maps == "random":
        vr = rngmod.stream(projection_seed, "views", 0)
        ma = vr.normal(size=(d, view_dim)) / math.sqrt(d)
        mb = vr.normal(size=(d, view_dim)) / math.sqrt(d)
    else:
        raise ValueError(f"maps must be 'random' or 'identity', got {maps!r}")
    nr = rngmod.stream(projection_seed, "views", 1)

    def project(ds: Dataset, m, tag):
        noise = nr.normal(scale=view_noise, size=(len(ds), view_dim)) if view_noise else 0.0
        return Dataset(ds.ids, ds.features @ m + noise, ds._labels, ds.domain,
                       view=tag, name=f"{ds.name}_{tag}")

    sa, ta = project(source, ma, "A"), project(target, ma, "A")
    sb, tb = project(source, mb, "B"), project(target, mb, "B")
    return PairedDataset(sa, ta, sb, tb)


# -- file I/O ---------------------------------------------------------------

class FormatError(ValueError):
    pass


def save(dataset: Dataset, path, include_quarantined: bool = True) -> None:
    """Write ``id,domain,label,view,f0..`` rows with 17 significant digits.

    Target labels are written unless ``include_quarantined`` is False, in
    which case the label column holds ``-``.
    """
    header = ["id", "domain", "label", "view"] + [f"f{j}" for j in range(dataset.dim)]
    with GUARD.evaluation():
        labels = dataset.labels
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            lab = int(labels[i])
            hidden = dataset.domain[i] == TARGET and not include_quarantined
            w.writerow([int(dataset.ids[i]), int(dataset.domain[i]),
                        "-" if lab < 0 or hidden else lab,
                        dataset.view or "-"]
                       + ["%.17g" % v for v in dataset.features[i]])


def load(path, name: str = "") -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = rows[0]
    if header[:4] != ["id", "domain", "label", "view"] or len(header) < 5:
        raise FormatError(f"{path}:1: bad header {header!r}")
    d = len(header) - 4
    if header[4:] != [f"f{j}" for j in range(d)]:
        raise FormatError(f"{path}:1: feature columns must be f0..f{d - 1}")
    if len(rows) == 1:
        raise FormatError(f"{path}: no data rows")
    ids, feats, labels, doms, views = [], [], [], [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            ids.append(int(row[0]))
            dom = int(row[1])
            if dom not in (SOURCE, TARGET):
                raise ValueError("domain must be 0 or 1")
            doms.append(dom)
            labels.append(NO_LABEL if row[2] == "-" else int(row[2]))
            if labels[-1] < NO_LABEL:
                raise ValueError("negative label")
            f = [float(v) for v in row[4:]]
            if not all(math.isfinite(v) for v in f):
                raise ValueError("non-finite feature")
            feats.append(f)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        views.add(None if row[3] == "-" else row[3])
    if len(views) > 1:
        raise FormatError(f"{path}: mixed view tags {sorted(map(str, views))}")
    try:
        return Dataset(ids, feats, labels, doms, view=views.pop(), name=name or path.stem)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_many(datasets: Sequence[tuple[str, Dataset]], out_dir) -> list[Path]:
    out = []
    for fname, ds in datasets:
        p = Path(out_dir) / fname
        save(ds, p)
        out.append(p)
    return out
