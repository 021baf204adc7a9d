"""Datasets, augmentation, continual stream construction, and exemplar memory.

A scenario is a sequence of T task steps over a main dataset: each step t
exposes a small labeled set T_t for K fresh classes and an unlabeled pool U_t
mixing related samples (main-dataset classes) with unrelated ones drawn from
peripheral datasets. Which pool samples are related is sealed provenance:
training code never reads it, only the final metrics do.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

VARIANTS = ("standard", "after", "before", "only_related", "only_unrelated", "non_iid")
MEMORY_POLICIES = ("random", "low_confidence", "high_confidence", "rainbow")

_DATASET_MAGIC = b"OSSCLDS1"


class PoolExhaustedError(RuntimeError):
    """A step asked for more samples than its source pool holds."""


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Flat-feature train/test splits with stable per-sample ids.

    Class ids are contiguous 0..C-1 in the train split; ids are unique within
    the dataset and, for synthetic data, globally disjoint across dataset
    seeds (ids embed the seed).
    """

    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    train_ids: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_ids: np.ndarray

    def __post_init__(self):
        if self.train_x.ndim != 2:
            raise ValueError("train_x must be [n, d]")
        n = self.train_x.shape[0]
        if not (len(self.train_y) == len(self.train_ids) == n):
            raise ValueError("train arrays must align")
        if len(np.unique(self.train_ids)) != n:
            raise ValueError("train ids must be unique")
        if self.test_x.size and np.intersect1d(self.train_ids, self.test_ids).size:
            raise ValueError("train and test ids must be disjoint")
        classes = np.unique(self.train_y)
        if classes.size and not np.array_equal(classes, np.arange(classes.size)):
            raise ValueError("train classes must be contiguous from 0")

    @property
    def n_classes(self):
        return int(self.train_y.max()) + 1 if self.train_y.size else 0

    @property
    def dim(self):
        return self.train_x.shape[1]


def synth_dataset(n_classes, dim, train_per_class, test_per_class, seed,
                  mean_radius=4.0, noise_sigma=1.0, name=None):
    """Gaussian blobs: class means on a radius-`mean_radius` shell, isotropic
    unit-ish noise around them.

    With noise_sigma=0 every sample equals its class mean exactly. Sample ids
    are (seed << 20) + running index to keep differently seeded datasets
    id-disjoint.
    """
    if n_classes < 1 or dim < 1 or train_per_class < 1 or test_per_class < 0:
        raise ValueError("n_classes, dim, train_per_class must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, dim))
    means *= mean_radius / np.linalg.norm(means, axis=1, keepdims=True)

    counter = 0
    tr_x, tr_y, tr_i, te_x, te_y, te_i = [], [], [], [], [], []
    for c in range(n_classes):
        total = train_per_class + test_per_class
        samples = means[c] + noise_sigma * rng.standard_normal((total, dim))
        ids = (seed << 20) + counter + np.arange(total)
        counter += total
        tr_x.append(samples[:train_per_class])
        tr_y.append(np.full(train_per_class, c))
        tr_i.append(ids[:train_per_class])
        te_x.append(samples[train_per_class:])
        te_y.append(np.full(test_per_class, c))
        te_i.append(ids[train_per_class:])
    return Dataset(
        name=name or f"synth{n_classes}x{dim}s{seed}",
        train_x=np.concatenate(tr_x).astype(np.float32),
        train_y=np.concatenate(tr_y).astype(np.int64),
        train_ids=np.concatenate(tr_i).astype(np.int64),
        test_x=np.concatenate(te_x).astype(np.float32),
        test_y=np.concatenate(te_y).astype(np.int64),
        test_ids=np.concatenate(te_i).astype(np.int64),
    )


def load_cifar_binary(train_path, test_path=None, name="cifar"):
    """Read CIFAR-style binary batches: records of 1 label byte + 3072 pixel
    bytes (channel-major 32x32 RGB).

    Pixels are scaled to [0, 1] and standardized per channel with train-split
    statistics. Labels above 9 are rejected. Ids are file order; test ids are
    offset past the train ids.
    """
    def read(path):
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % 3073 != 0:
            raise ValueError(f"{path}: size {raw.size} is not a multiple of 3073")
        rec = raw.reshape(-1, 3073)
        labels = rec[:, 0].astype(np.int64)
        if labels.max() > 9:
            raise ValueError(f"{path}: label {labels.max()} out of range")
        pixels = rec[:, 1:].astype(np.float32) / 255.0
        return pixels, labels

    train_px, train_y = read(train_path)
    per_channel = train_px.reshape(-1, 3, 1024)
    mean = per_channel.mean(axis=(0, 2))
    std = per_channel.std(axis=(0, 2))
    std[std == 0] = 1.0

    def standardize(px):
        shaped = px.reshape(-1, 3, 1024)
        shaped = (shaped - mean[None, :, None]) / std[None, :, None]
        return shaped.reshape(-1, 3072).astype(np.float32)

    n_train = len(train_y)
    if test_path is not None:
        test_px, test_y = read(test_path)
        test_x = standardize(test_px)
        test_ids = n_train + np.arange(len(test_y), dtype=np.int64)
    else:
        test_x = np.zeros((0, 3072), dtype=np.float32)
        test_y = np.zeros(0, dtype=np.int64)
        test_ids = np.zeros(0, dtype=np.int64)
    return Dataset(
        name=name,
        train_x=standardize(train_px),
        train_y=train_y,
        train_ids=np.arange(n_train, dtype=np.int64),
        test_x=test_x,
        test_y=test_y,
        test_ids=test_ids,
    )


def write_cifar_binary(path, labels, pixels):
    """Write records in the same 3073-byte layout load_cifar_binary reads."""
    labels = np.asarray(labels, dtype=np.uint8)
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.shape != (len(labels), 3072):
        raise ValueError("pixels must be [n, 3072] uint8")
    rec = np.concatenate([labels[:, None], pixels], axis=1)
    rec.tofile(path)


def save_dataset(dataset, path):
    """Byte-exact binary export of a Dataset (float32 features)."""
    with open(path, "wb") as f:
        f.write(_DATASET_MAGIC)
        name_b = dataset.name.encode()
        f.write(struct.pack("<I", len(name_b)))
        f.write(name_b)
        f.write(struct.pack("<IIII", dataset.dim, len(dataset.train_y),
                            len(dataset.test_y), dataset.n_classes))
        for arr, dt in ((dataset.train_x, np.float32), (dataset.train_y, np.int64),
                        (dataset.train_ids, np.int64), (dataset.test_x, np.float32),
                        (dataset.test_y, np.int64), (dataset.test_ids, np.int64)):
            f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_dataset(path):
    """Read a save_dataset export; round-trips exactly."""
    with open(path, "rb") as f:
        if f.read(len(_DATASET_MAGIC)) != _DATASET_MAGIC:
            raise ValueError("bad dataset magic")
        (name_len,) = struct.unpack("<I", f.read(4))
        name = f.read(name_len).decode()
        dim, n_train, n_test, _ = struct.unpack("<IIII", f.read(16))

        def read(count, dt):
            dt = np.dtype(dt)
            raw = f.read(count * dt.itemsize)
            if len(raw) != count * dt.itemsize:
                raise ValueError("dataset file truncated")
            return np.frombuffer(raw, dtype=dt).copy()

        train_x = read(n_train * dim, np.float32).reshape(n_train, dim)
        train_y = read(n_train, np.int64)
        train_ids = read(n_train, np.int64)
        test_x = read(n_test * dim, np.float32).reshape(n_test, dim)
        test_y = read(n_test, np.int64)
        test_ids = read(n_test, np.int64)
    return Dataset(name=name, train_x=train_x, train_y=train_y, train_ids=train_ids,
                   test_x=test_x, test_y=test_y, test_ids=test_ids)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Augmenter:
    """Stochastic view generator.

    vector mode adds isotropic Gaussian noise then zeroes coordinates
    independently; with sigma=0 and dropout=0 it is the identity. image mode
    treats rows as channel-major 3 x hw x hw images and applies random
    resized crop, horizontal flip, color jitter, and grayscale.
    """

    mode: str = "vector"
    sigma: float = 0.5
    dropout: float = 0.1
    crop_scale: tuple = (0.2, 1.0)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strengths: tuple = (0.4, 0.4, 0.4, 0.1)
    gray_p: float = 0.2
    image_hw: int = 32

    def __post_init__(self):
        if self.mode not in ("vector", "image"):
            raise ValueError(f"unknown augmenter mode {self.mode!r}")
        if self.sigma < 0 or not 0 <= self.dropout <= 1:
            raise ValueError("sigma must be >= 0 and dropout in [0, 1]")

    def apply_batch(self, xs, rng):
        """One augmented view per row of xs; consumes rng deterministically."""
        xs = np.asarray(xs)
        if self.mode == "vector":
            out = xs + self.sigma * rng.standard_normal(xs.shape)
            drop = rng.random(xs.shape) < self.dropout
            out = np.where(drop, 0.0, out)
            return out.astype(xs.dtype, copy=False)
        return self._apply_images(xs, rng)

    def pair_views(self, xs, rng):
        """Two independent views per row, interleaved: rows 2k, 2k+1 come
        from xs[k]."""
        a = self.apply_batch(xs, rng)
        b = self.apply_batch(xs, rng)
        out = np.empty((2 * len(xs), xs.shape[1]), dtype=a.dtype)
        out[0::2] = a
        out[1::2] = b
        return out

    # image helpers -----------------------------------------------------

    def _apply_images(self, xs, rng):
        hw = self.image_hw
        imgs = xs.reshape(len(xs), 3, hw, hw).astype(np.float64)
        out = np.empty_like(imgs)
        for i in range(len(imgs)):
            out[i] = self._augment_one(imgs[i], rng)
        return out.reshape(len(xs), 3 * hw * hw).astype(xs.dtype)

    def _augment_one(self, img, rng):
        hw = self.image_hw
        # random resized crop: square side from the area-scale range
        area_scale = rng.uniform(*self.crop_scale)
        side = max(1, min(hw, round(hw * math.sqrt(area_scale))))
        top = rng.integers(0, hw - side + 1)
        left = rng.integers(0, hw - side + 1)
        crop = img[:, top:top + side, left:left + side]
        idx = np.clip((np.arange(hw) * side) // hw, 0, side - 1)
        img = crop[:, idx][:, :, idx]
        if rng.random() < self.flip_p:
            img = img[:, :, ::-1]
        if rng.random() < self.jitter_p:
            img = self._jitter(img, rng)
        if rng.random() < self.gray_p:
            luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
            img = np.stack([luma, luma, luma])
        return img

    def _jitter(self, img, rng):
        sb, sc, ss, sh = self.jitter_strengths
        img = img * rng.uniform(1 - sb, 1 + sb)
        mean = img.mean()
        img = mean + (img - mean) * rng.uniform(1 - sc, 1 + sc)
        luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        sat = rng.uniform(1 - ss, 1 + ss)
        img = luma[None] + (img - luma[None]) * sat
        # hue: rotate the chroma plane in YIQ space
        theta = 2.0 * math.pi * rng.uniform(-sh, sh)
        yiq = np.tensordot(_RGB2YIQ, img, axes=1)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        i_rot = yiq[1] * cos_t - yiq[2] * sin_t
        q_rot = yiq[1] * sin_t + yiq[2] * cos_t
        yiq = np.stack([yiq[0], i_rot, q_rot])
        return np.tensordot(_YIQ2RGB, yiq, axes=1)


_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


# ---------------------------------------------------------------------------
# Stream construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    """Shape of the continual stream.

    labeled_fraction is the per-class fraction of train samples that keep
    their label; n_related / n_unrelated size each step's unlabeled pool
    (unrelated counts apply per peripheral dataset). variant selects the pool
    composition rule; non_iid_fraction is the class-subset fraction used by
    the non_iid variant.
    """

    n_tasks: int
    classes_per_task: int
    labeled_fraction: float
    n_related: int
    n_unrelated: int
    seed: int
    variant: str = "standard"
    non_iid_fraction: float = 0.5

    def __post_init__(self):
        if self.n_tasks < 1 or self.classes_per_task < 1:
            raise ValueError("n_tasks and classes_per_task must be positive")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must be in (0, 1]")
        if self.n_related < 0 or self.n_unrelated < 0:
            raise ValueError("pool sizes must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.variant == "non_iid" and not 0 < self.non_iid_fraction <= 1:
            raise ValueError("non_iid_fraction must be in (0, 1]")


class SealedProvenance:
    """Ground truth of one unlabeled pool, hidden behind reveal().

    Training code receives the pool without labels; reveal() is reserved for
    ood_metrics and final reporting.
    """

    def __init__(self, related, true_classes):
        self._related = np.asarray(related, dtype=bool).copy()
        self._true_classes = np.asarray(true_classes, dtype=np.int64).copy()
        self._related.flags.writeable = False
        self._true_classes.flags.writeable = False

    def __len__(self):
        return len(self._related)

    def reveal(self):
        return self._related, self._true_classes


@dataclass(frozen=True)
class StreamStep:
    """One continual step: labeled T_t, unlabeled U_t, sealed provenance."""

    index: int
    task_classes: tuple
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    labeled_ids: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_ids: np.ndarray
    provenance: SealedProvenance

    def __post_init__(self):
        if len(self.unlabeled_x) != len(self.provenance):
            raise ValueError("provenance must cover the unlabeled pool")


@dataclass(frozen=True)
class Stream:
    """The full T-step scenario plus the config that produced it."""

    steps: tuple
    config: ScenarioConfig

    @property
    def task_classes(self):
        return [s.task_classes for s in self.steps]

    @property
    def all_classes(self):
        return sorted(c for s in self.steps for c in s.task_classes)


def _related_class_window(task_classes, t, variant, rng, non_iid_fraction):
    """Class ids eligible for the related part of U_t under each variant."""
    every = [c for task in task_classes for c in task]
    if variant in ("standard", "only_related", "only_unrelated"):
        return every
    if variant == "after":
        return [c for task in task_classes[t - 1:] for c in task]
    if variant == "before":
        return [c for task in task_classes[:t] for c in task]
    if variant == "non_iid":
        k = max(1, math.ceil(non_iid_fraction * len(every)))
        picked = rng.choice(len(every), size=k, replace=False)
        return [every[i] for i in sorted(picked)]
    raise ValueError(f"unknown variant {variant!r}")


def _draw(rng, indices, count, what):
    if count > len(indices):
        raise PoolExhaustedError(
            f"{what}: requested {count} of {len(indices)} available")
    picked = rng.choice(len(indices), size=count, replace=False)
    return indices[np.sort(picked)]


def build_stream(config, main, peripherals=()):
    """Assemble the T-step scenario from a main dataset and peripherals.

    Task classes are a seeded permutation of the main classes chunked into T
    tasks of K. Labeled sets take floor(P * class size) samples per class,
    drawn once up front; the remainder forms the related reservoir. Each
    step's pool draws without replacement within the step (exhaustion raises)
    but reservoirs reset across steps, so a sample may recur in later pools.
    """
    rng = np.random.default_rng([config.seed, 0x5ce])
    total_classes = config.n_tasks * config.classes_per_task
    if total_classes > main.n_classes:
        raise ValueError(
            f"need {total_classes} classes, main dataset has {main.n_classes}")

    perm = rng.permutation(main.n_classes)[:total_classes]
    task_classes = [tuple(int(c) for c in perm[i * config.classes_per_task:
                                               (i + 1) * config.classes_per_task])
                    for i in range(config.n_tasks)]

    labeled_idx = {}
    reservoir_idx = {}
    for c in sorted(perm):
        members = np.nonzero(main.train_y == c)[0]
        n_lab = max(1, int(math.floor(config.labeled_fraction * len(members))))
        picked = _draw(rng, members, n_lab, f"labeled class {c}")
        labeled_idx[int(c)] = picked
        reservoir_idx[int(c)] = np.setdiff1d(members, picked)

    steps = []
    for t in range(1, config.n_tasks + 1):
        classes = task_classes[t - 1]
        lab = np.concatenate([labeled_idx[c] for c in classes])

        window = _related_class_window(task_classes, t, config.variant, rng,
                                       config.non_iid_fraction)
        related_pool = (np.concatenate([reservoir_idx[c] for c in window])
                        if window else np.zeros(0, dtype=np.int64))
        n_rel = 0 if config.variant == "only_unrelated" else config.n_related
        rel = _draw(rng, related_pool, n_rel, f"related pool at t={t}")

        unrel_parts = []
        n_unrel = (0 if config.variant in ("after", "before", "only_related",
                                           "non_iid")
                   else config.n_unrelated)
        for p in peripherals:
            idx = _draw(rng, np.arange(len(p.train_y)), n_unrel,
                        f"peripheral {p.name} at t={t}")
            unrel_parts.append((p, idx))

        pool_x = [main.train_x[rel]]
        pool_ids = [main.train_ids[rel]]
        related_flags = [np.ones(len(rel), dtype=bool)]
        true_classes = [main.train_y[rel]]
        for p, idx in unrel_parts:
            pool_x.append(p.train_x[idx])
            pool_ids.append(p.train_ids[idx])
            related_flags.append(np.zeros(len(idx), dtype=bool))
            true_classes.append(np.full(len(idx), -1, dtype=np.int64))

        ux = np.concatenate(pool_x)
        uids = np.concatenate(pool_ids)
        rel_flags = np.concatenate(related_flags)
        true_cls = np.concatenate(true_classes)
        order = rng.permutation(len(ux))
        steps.append(StreamStep(
            index=t,
            task_classes=classes,
            labeled_x=main.train_x[lab].copy(),
            labeled_y=main.train_y[lab].copy(),
            labeled_ids=main.train_ids[lab].copy(),
            unlabeled_x=ux[order],
            unlabeled_ids=uids[order],
            provenance=SealedProvenance(rel_flags[order], true_cls[order]),
        ))
    return Stream(steps=tuple(steps), config=config)


# ---------------------------------------------------------------------------
# Exemplar memory
# ---------------------------------------------------------------------------


class MemoryBuffer:
    """Class-balanced exemplar store with a fixed capacity.

    Quotas are floor(capacity / n_classes) per stored class with the
    remainder spread one-per-class over the lowest class ids. Selection
    within a class follows the policy: random keeps a uniform subset,
    low/high_confidence keep the least/most confident samples under the
    provided scorer, rainbow keeps an evenly spaced sweep of the
    confidence-sorted class (head to tail).
    """

    def __init__(self, capacity, policy="random"):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        if policy not in MEMORY_POLICIES:
            raise ValueError(f"policy must be one of {MEMORY_POLICIES}")
        self.capacity = int(capacity)
        self.policy = policy
        self._x = {}
        self._y = {}
        self._conf = {}

    def __len__(self):
        return sum(len(v) for v in self._y.values())

    def class_counts(self):
        return {c: len(self._y[c]) for c in sorted(self._y)}

    def items(self):
        """All stored exemplars as (xs, ys), class-sorted."""
        if not self._y:
            return (np.zeros((0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64))
        classes = sorted(self._y)
        return (np.concatenate([self._x[c] for c in classes]),
                np.concatenate([self._y[c] for c in classes]))

    def quotas(self, classes):
        """Per-class capacities for a given class set; remainder goes to the
        lowest ids."""
        classes = sorted(classes)
        if not classes:
            return {}
        base = self.capacity // len(classes)
        rem = self.capacity - base * len(classes)
        return {c: base + (1 if i < rem else 0) for i, c in enumerate(classes)}

    def update(self, xs, ys, rng, confidence=None):
        """Fold a new labeled set in and rebalance to the enlarged class set.

        Args:
            xs, ys: the new task's labeled samples.
            rng: Generator; consumed by every policy (selection order is
                deterministic given the stream).
            confidence: per-sample scores aligned with xs, required by the
                confidence-ranked policies. Existing exemplars keep their
                stored score for re-ranking.
        """
        xs = np.asarray(xs)
        ys = np.asarray(ys)
        if self.policy != "random" and confidence is None:
            raise ValueError(f"policy {self.policy} requires confidence scores")
        conf = np.asarray(confidence, dtype=np.float64) if confidence is not None \
            else np.zeros(len(ys))

        pool_x = dict(self._x)
        pool_c = dict(self._conf)
        for c in np.unique(ys):
            c = int(c)
            mask = ys == c
            add_x = xs[mask]
            add_c = conf[mask]
            if c in pool_x:
                pool_x[c] = np.concatenate([pool_x[c], add_x])
                pool_c[c] = np.concatenate([pool_c[c], add_c])
            else:
                pool_x[c] = add_x
                pool_c[c] = add_c

        quotas = self.quotas(pool_x.keys())
        self._x, self._y, self._conf = {}, {}, {}
        for c in sorted(pool_x):
            quota = min(quotas[c], len(pool_x[c]))
            chosen = self._select(pool_x[c], pool_c[c], quota, rng)
            self._x[c] = pool_x[c][chosen]
            self._conf[c] = pool_c[c][chosen]
            self._y[c] = np.full(quota, c, dtype=np.int64)

    def _select(self, xs, conf, quota, rng):
        if quota == 0:
            return np.zeros(0, dtype=np.int64)
        if self.policy == "random":
            picked = rng.choice(len(xs), size=quota, replace=False)
            return np.sort(picked)
        order = np.argsort(conf, kind="stable")
        if self.policy == "low_confidence":
            return order[:quota]
        if self.policy == "high_confidence":
            return order[::-1][:quota]
        # rainbow: even sweep across the sorted confidence range
        pos = np.linspace(0, len(xs) - 1, quota).round().astype(np.int64)
        return order[pos]


def epoch_batches(n, batch_size, rng):
    """Seeded permutation of range(n) chunked into batches; the tail batch may
    be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def sample_batch(n, batch_size, rng):
    """One without-replacement batch of min(batch_size, n) indices."""
    size = min(batch_size, n)
    picked = rng.choice(n, size=size, replace=False)
    return picked
