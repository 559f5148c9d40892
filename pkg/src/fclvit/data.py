"""Labelled image sets, the procedural pattern generator, a CIFAR-style
binary reader and disjoint class-incremental task splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Rng

FAMILIES = (
    "hstripes", "vstripes", "dstripes", "adstripes", "rings", "checker", "hgrad", "vgrad",
    "radial", "blob", "twoblobs", "plus", "xcross", "frame", "disk", "triangle", "dots",
    "hline", "vline", "texture",
)


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (n, C, H, W) in [0, 1]
    labels: np.ndarray  # global class ids
    class_names: tuple = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self):
        return sorted(set(self.labels.tolist()))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledImageSet(self.images[idx], self.labels[idx], self.class_names)

    def select_classes(self, classes):
        mask = np.isin(self.labels, list(classes))
        return self.subset(np.flatnonzero(mask))


# procedural generator -------------------------------------------------------------


def _pattern(family, g, side):
    yy, xx = np.mgrid[0:side, 0:side] / side
    u = g.uniform
    phase = u(0, 1)
    freq = u(2.0, 3.0)
    cy, cx = u(0.3, 0.7), u(0.3, 0.7)

    def wave(t):
        return 0.5 + 0.5 * np.sin(2 * np.pi * (freq * t + phase))

    def gauss(y0, x0, s):
        return np.exp(-((yy - y0) ** 2 + (xx - x0) ** 2) / (2 * s * s))

    if family == "hstripes":
        return wave(yy)
    if family == "vstripes":
        return wave(xx)
    if family == "dstripes":
        return wave((xx + yy) / np.sqrt(2))
    if family == "adstripes":
        return wave((xx - yy) / np.sqrt(2))
    if family == "rings":
        return wave(np.hypot(yy - cy, xx - cx) * 1.5)
    if family == "checker":
        f = u(1.5, 2.5)
        s = np.sin(2 * np.pi * (f * xx + phase)) * np.sin(2 * np.pi * (f * yy + u(0, 1)))
        return 0.5 + 0.5 * np.tanh(4 * s)
    if family == "hgrad":
        return np.clip(xx * u(0.8, 1.2) + u(-0.1, 0.1), 0, 1)
    if family == "vgrad":
        return np.clip(yy * u(0.8, 1.2) + u(-0.1, 0.1), 0, 1)
    if family == "radial":
        return np.clip(1.0 - np.hypot(yy - cy, xx - cx) * u(1.2, 1.6), 0, 1)
    if family == "blob":
        return gauss(u(0.2, 0.8), u(0.2, 0.8), u(0.08, 0.12))
    if family == "twoblobs":
        a = gauss(u(0.15, 0.4), u(0.15, 0.4), 0.08)
        b = gauss(u(0.6, 0.85), u(0.6, 0.85), 0.08)
        return np.maximum(a, b)
    if family == "plus":
        w = u(0.06, 0.1)
        return np.maximum(np.abs(yy - cy) < w, np.abs(xx - cx) < w).astype(float)
    if family == "xcross":
        w = u(0.05, 0.08)
        return np.maximum(np.abs((yy - cy) - (xx - cx)) < w,
                          np.abs((yy - cy) + (xx - cx)) < w).astype(float)
    if family == "frame":
        h = u(0.25, 0.35)
        d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        return (np.abs(d - h) < 0.07).astype(float)
    if family == "disk":
        return (np.hypot(yy - cy, xx - cx) < u(0.18, 0.28)).astype(float)
    if family == "triangle":
        return (yy > xx + u(-0.2, 0.2)).astype(float)
    if family == "dots":
        f = u(3.0, 4.0)
        s = np.cos(2 * np.pi * (f * xx + phase)) * np.cos(2 * np.pi * (f * yy + u(0, 1)))
        return (s > 0.6).astype(float)
    if family == "hline":
        return (np.abs(yy - cy) < 0.07).astype(float)
    if family == "vline":
        return (np.abs(xx - cx) < 0.07).astype(float)
    if family == "texture":
        coarse = g.uniform(0, 1, size=(side // 4 + 1, side // 4 + 1))
        return np.kron(coarse, np.ones((4, 4)))[:side, :side]
    raise ValueError(family)


def synth_generate(seed, n_classes, samples_per_class, image_side=16, channels=3, noise=0.08):
    """Deterministic dataset: class k draws from pattern family k, with a
    random per-sample colour pair, geometric jitter and pixel noise."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_classes > len(FAMILIES):
        raise ValueError(f"at most {len(FAMILIES)} pattern families are available, got {n_classes}")
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be positive")
    images = np.empty((n_classes * samples_per_class, channels, image_side, image_side))
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    for k in range(n_classes):
        g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, k])))
        for s in range(samples_per_class):
            pat = _pattern(FAMILIES[k], g, image_side)
            fg = g.uniform(0.5, 1.0, size=channels)
            bg = g.uniform(0.0, 0.4, size=channels)
            img = pat[None] * fg[:, None, None] + (1 - pat[None]) * bg[:, None, None]
            img += g.normal(0, noise, size=img.shape)
            images[k * samples_per_class + s] = np.clip(img, 0.0, 1.0)
    return LabeledImageSet(images, labels, FAMILIES[:n_classes])


# raw binary reader ----------------------------------------------------------------


@dataclass
class Manifest:
    path: str
    channels: int = 3
    height: int = 32
    width: int = 32
    layout: str = "cifar10"  # cifar10 | cifar100 | header
    classes: int = 10
    use_coarse: bool = False
    extra: dict = field(default_factory=dict)


def _truthy(v):
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def parse_manifest(text, base_dir=None) -> Manifest:
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"manifest line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    if "path" not in kv:
        raise FormatError("manifest has no 'path' entry")
    path = kv.pop("path")
    if base_dir is not None and not Path(path).is_absolute():
        path = str(Path(base_dir) / path)
    try:
        m = Manifest(
            path=path,
            channels=int(kv.pop("channels", 3)),
            height=int(kv.pop("height", 32)),
            width=int(kv.pop("width", 32)),
            layout=kv.pop("layout", "cifar10"),
            classes=int(kv.pop("classes", 10)),
            use_coarse=_truthy(kv.pop("use_coarse", "false")),
        )
    except ValueError as e:
        raise FormatError(f"manifest: {e}") from None
    if m.layout not in ("cifar10", "cifar100", "header"):
        raise FormatError(f"manifest: unknown layout {m.layout!r}")
    m.extra = kv
    return m


def read_manifest(path) -> Manifest:
    p = Path(path)
    return parse_manifest(p.read_text(), base_dir=p.parent)


def load_raw_images(path, manifest: Manifest) -> LabeledImageSet:
    """Read fixed-size records of u8 label byte(s) followed by C*H*W u8 pixels.

    ``cifar100`` records carry (coarse, fine) label bytes; the fine label is
    used unless ``use_coarse`` is set. ``header`` files start with four
    little-endian u32s: count, channels, height, width.
    """
    blob = Path(path).read_bytes()
    c, h, w = manifest.channels, manifest.height, manifest.width
    offset = 0
    count = None
    if manifest.layout == "header":
        if len(blob) < 16:
            raise FormatError(f"header needs 16 bytes, file has {len(blob)}")
        count, c, h, w = struct.unpack("<4I", blob[:16])
        if (c, h, w) != (manifest.channels, manifest.height, manifest.width):
            raise FormatError(
                f"header dims {(c, h, w)} disagree with manifest "
                f"{(manifest.channels, manifest.height, manifest.width)}")
        offset = 16
    nlab = 2 if manifest.layout == "cifar100" else 1
    rec = nlab + c * h * w
    body = len(blob) - offset
    if count is None:
        count = -(-body // rec)  # a partial trailing record still counts as one
    expected = count * rec
    if body != expected or count == 0:
        if count == 0 and body == 0:
            raise FormatError("file holds no records")
        got_records = body // rec
        raise FormatError(
            f"truncated or oversized data: expected {expected} bytes for {count} records of "
            f"{rec} bytes, found {body} (record {got_records} at byte offset "
            f"{offset + got_records * rec} is incomplete)")
    arr = np.frombuffer(blob, dtype=np.uint8, offset=offset).reshape(count, rec)
    lab_col = 0 if (nlab == 1 or manifest.use_coarse) else 1
    labels = arr[:, lab_col].astype(np.int64)
    bad = np.flatnonzero(labels >= manifest.classes)
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"label {labels[i]} out of range [0, {manifest.classes}) in record {i} "
            f"at byte offset {offset + i * rec + lab_col}")
    images = arr[:, nlab:].reshape(count, c, h, w).astype(np.float64) / 255.0
    return LabeledImageSet(images, labels)


# task splits ----------------------------------------------------------------------


@dataclass
class Task:
    index: int
    classes: tuple
    train: LabeledImageSet
    test: LabeledImageSet


@dataclass
class TaskSplit:
    tasks: list

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def check(self, all_classes=None):
        seen = set()
        for t in self.tasks:
            cs = set(t.classes)
            if cs & seen:
                raise ValueError(f"task {t.index} repeats classes {sorted(cs & seen)}")
            seen |= cs
            for part in (t.train, t.test):
                if not set(part.labels.tolist()) <= cs:
                    raise ValueError(f"task {t.index} holds samples outside its class set")
        if all_classes is not None and seen != set(all_classes):
            raise ValueError("task class sets do not cover the dataset's classes")


def split_tasks(data: LabeledImageSet, classes_per_task, seed, train_fraction=0.8,
                shuffle_classes=True) -> TaskSplit:
    classes = data.classes
    if classes_per_task < 1 or len(classes) % classes_per_task:
        raise ValueError(
            f"{len(classes)} classes cannot be split into tasks of {classes_per_task}")
    rng = Rng(seed)
    order = [classes[i] for i in rng.permutation(len(classes))] if shuffle_classes else classes
    train_idx, test_idx = {}, {}
    for c in classes:
        members = np.flatnonzero(data.labels == c)
        perm = members[rng.child(1, c).permutation(len(members))]
        cut = int(round(train_fraction * len(members)))
        if len(members) > 1:
            cut = min(max(cut, 1), len(members) - 1)
        train_idx[c], test_idx[c] = np.sort(perm[:cut]), np.sort(perm[cut:])
    tasks = []
    for t in range(len(classes) // classes_per_task):
        cs = tuple(int(c) for c in order[t * classes_per_task:(t + 1) * classes_per_task])
        tr = np.concatenate([train_idx[c] for c in cs])
        te = np.concatenate([test_idx[c] for c in cs])
        tasks.append(Task(t, cs, data.subset(tr), data.subset(te)))
    split = TaskSplit(tasks)
    split.check(classes)
    return split


def make_benchmark(seed, task_classes=6, classes_per_task=2, base_classes=14,
                   samples_per_class=80, image_side=16, channels=3, noise=0.08):
    """Desk-scale setup: ``base_classes`` pattern families reserved for
    backbone pretraining, the next ``task_classes`` families split into tasks.

    Returns (base_train, base_test, split).
    """
    data = synth_generate(seed, base_classes + task_classes, samples_per_class, image_side,
                          channels, noise)
    base = data.select_classes(range(base_classes))
    perm = Rng(seed).child(7).permutation(len(base))
    cut = int(0.8 * len(base))
    base_train, base_test = base.subset(np.sort(perm[:cut])), base.subset(np.sort(perm[cut:]))
    rest = data.select_classes(range(base_classes, base_classes + task_classes))
    return base_train, base_test, split_tasks(rest, classes_per_task, seed)
