"""Synthetic datasets, N-way K-shot task splitting and two-view augmentation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ClassOverlap, InvalidConfig, NotEnoughClasses, NotEnoughSamples


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    image_shape: tuple[int, int, int] | None = None

    def __len__(self):
        return len(self.y)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.y)


def generate_blobs(n_classes: int, dim: int, samples_per_class: int, class_sep: float,
                   cluster_std: float, seed: int) -> Dataset:
    """Isotropic Gaussian classes whose means sit on a sphere scaled so that the
    closest pair of means is exactly ``class_sep`` apart."""
    if n_classes < 2 or dim < 2 or class_sep <= 0 or cluster_std < 0 or samples_per_class < 1:
        raise InvalidConfig("need n_classes >= 2, dim >= 2, class_sep > 0, cluster_std >= 0, samples >= 1")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    gaps = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=2)
    min_gap = gaps[np.triu_indices(n_classes, 1)].min()
    means = dirs * (class_sep / min_gap)
    x = np.concatenate([m + cluster_std * rng.standard_normal((samples_per_class, dim)) for m in means])
    y = np.repeat(np.arange(n_classes), samples_per_class)
    return Dataset(x, y)


def generate_images(n_classes: int, samples_per_class: int, seed: int, side: int = 16,
                    noise_std: float = 0.3) -> Dataset:
    """Procedural single-channel textures: stripes or checkers at class-specific
    frequencies, random phase per sample. Every pattern is invariant to a
    horizontal flip up to phase, so flips never change the class."""
    if n_classes < 2 or samples_per_class < 1 or side % 4:
        raise InvalidConfig("need n_classes >= 2, samples >= 1 and side divisible by 4")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / side
    freqs = 1.0 + np.arange((n_classes + 2) // 3)
    xs, ys = [], []
    for c in range(n_classes):
        kind, f = c % 3, freqs[c // 3]
        for _ in range(samples_per_class):
            px, py = rng.uniform(0, 2 * np.pi, size=2)
            if kind == 0:
                img = np.sin(2 * np.pi * f * xx + px)
            elif kind == 1:
                img = np.sin(2 * np.pi * f * yy + py)
            else:
                img = np.sin(2 * np.pi * f * xx + px) * np.sin(2 * np.pi * f * yy + py)
            xs.append((img + noise_std * rng.standard_normal(img.shape)).ravel())
            ys.append(c)
    return Dataset(np.array(xs), np.array(ys), image_shape=(1, side, side))


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    name: str
    classes: tuple[int, ...]
    x_train: np.ndarray
    y_train: np.ndarray          # hidden during training; used only for evaluation of clustering
    x_test: np.ndarray
    y_test: np.ndarray
    anchor_idx: np.ndarray       # positions in x_train whose labels may be used for inference
    train_rows: np.ndarray       # row numbers into the source dataset
    test_rows: np.ndarray
    is_base: bool = False

    @property
    def anchors(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x_train[self.anchor_idx], self.y_train[self.anchor_idx]

    @property
    def n_ways(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class TaskSequence:
    base_task: Task
    fewshot_tasks: tuple[Task, ...] = ()
    image_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        seen: set[int] = set()
        for task in self.tasks:
            overlap = seen & set(task.classes)
            if overlap:
                raise ClassOverlap(f"classes {sorted(overlap)} appear in more than one task")
            seen |= set(task.classes)

    @property
    def tasks(self) -> tuple[Task, ...]:
        return (self.base_task, *self.fewshot_tasks)

    @property
    def class_registry(self) -> dict[int, str]:
        return {c: t.name for t in self.tasks for c in t.classes}

    def manifest(self) -> dict:
        return {
            t.name: {
                "classes": list(t.classes),
                "train": t.train_rows.tolist(),
                "test": t.test_rows.tolist(),
                "anchors": t.train_rows[t.anchor_idx].tolist(),
            }
            for t in self.tasks
        }


def _canonical_rows(x: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # order equal-labelled rows by content so splits ignore row order in the file
    keys = x[rows].T[::-1]
    return rows[np.lexsort(keys)]


def split_tasks(dataset: Dataset, base_classes: int, ways: int, shots: int, n_fewshot_tasks: int,
                anchor_budget_base: int = 25, test_fraction: float = 0.2, seed: int = 0) -> TaskSequence:
    classes = dataset.classes
    needed = base_classes + ways * n_fewshot_tasks
    if base_classes < 2 or (n_fewshot_tasks and ways < 1) or shots < 1:
        raise InvalidConfig("need base_classes >= 2, ways >= 1 and shots >= 1")
    if needed > len(classes):
        raise NotEnoughClasses(f"split needs {needed} classes, dataset has {len(classes)}")
    if not 0 <= test_fraction < 1:
        raise InvalidConfig("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)

    def class_rows(c):
        rows = _canonical_rows(dataset.x, np.flatnonzero(dataset.y == c))
        rows = rows[rng.permutation(len(rows))]
        n_test = int(round(test_fraction * len(rows)))
        return rows[n_test:], rows[:n_test]

    def build(name, task_classes, is_base):
        train_rows, test_rows = [], []
        for c in task_classes:
            tr, te = class_rows(c)
            if not is_base:
                if len(tr) < shots:
                    raise NotEnoughSamples(f"class {c} has {len(tr)} training samples, needs {shots}")
                tr = tr[:shots]
            elif len(tr) == 0:
                raise NotEnoughSamples(f"base class {c} has no training samples")
            train_rows.append(tr)
            test_rows.append(te)
        train_rows = np.concatenate(train_rows)
        test_rows = np.concatenate(test_rows)
        y_train = dataset.y[train_rows]
        if is_base:
            anchor_idx = _stratified_anchors(y_train, anchor_budget_base, rng)
        else:
            anchor_idx = np.arange(len(train_rows))
        return Task(name, tuple(int(c) for c in task_classes), dataset.x[train_rows], y_train,
                    dataset.x[test_rows], dataset.y[test_rows], anchor_idx, train_rows, test_rows, is_base)

    base = build("session_1", classes[:base_classes], True)
    fewshot = []
    for k in range(n_fewshot_tasks):
        lo = base_classes + k * ways
        fewshot.append(build(f"session_{k + 2}", classes[lo:lo + ways], False))
    return TaskSequence(base, tuple(fewshot), dataset.image_shape)


def _stratified_anchors(y: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    """One anchor per class first, then uniform draws without replacement up to ``budget``."""
    chosen = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        chosen.append(int(idx[rng.integers(len(idx))]))
    rest = np.setdiff1d(np.arange(len(y)), chosen)
    extra = max(0, min(budget - len(chosen), len(rest)))
    chosen.extend(rng.choice(rest, size=extra, replace=False).tolist())
    return np.sort(np.array(chosen, dtype=np.int64))


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    jitter_std: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.0
    image_shape: tuple[int, int, int] | None = None
    stream: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo > hi:
            raise InvalidConfig("scale_range must satisfy lo <= hi")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidConfig("flip_prob must lie in [0, 1]")
        if self.jitter_std < 0:
            raise InvalidConfig("jitter_std must be non-negative")


def _one_view(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    batch = np.atleast_2d(x)
    lo, hi = policy.scale_range
    s = rng.uniform(lo, hi, size=(len(batch), 1)) if hi > lo else np.full((len(batch), 1), lo)
    v = batch * s
    if policy.jitter_std > 0:
        v = v + policy.jitter_std * rng.standard_normal(batch.shape)
    if policy.image_shape is not None and policy.flip_prob > 0:
        c, h, w = policy.image_shape
        flip = rng.uniform(size=len(batch)) < policy.flip_prob
        if flip.any():
            imgs = v[flip].reshape(-1, c, h, w)[..., ::-1]
            v[flip] = imgs.reshape(int(flip.sum()), -1)
    return v.reshape(x.shape)


def augment(x, policy: AugmentPolicy, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent random views of ``x`` (a sample or a batch). ``x`` is not modified."""
    x = np.asarray(x, dtype=np.float64)
    return _one_view(x, policy, rng), _one_view(x, policy, rng)


# ---------------------------------------------------------------------------
# CSV / manifest I/O

def save_csv(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(dataset.x.shape[1])] + ["label"])
        for row, label in zip(dataset.x, dataset.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path: str | Path, image_shape=None) -> Dataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if not header or header[-1] != "label":
            raise InvalidConfig("last CSV column must be 'label'")
        rows = list(r)
    x = np.array([[float(v) for v in row[:-1]] for row in rows], dtype=np.float64)
    y = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    return Dataset(x, y, image_shape)


def save_manifest(tasks: TaskSequence, path: str | Path) -> None:
    Path(path).write_text(json.dumps(tasks.manifest(), indent=2))
