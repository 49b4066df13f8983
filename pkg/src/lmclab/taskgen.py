"""Seeded procedural image tasks and the streams built from them.

Each task renders class-conditional glyphs (bars, crosses, rings, ...)
in a foreground color on a background color, with per-sample position and
scale jitter plus additive pixel noise. Generation is pure given the
spec's seed: the same spec always yields the same bytes, and the three
splits draw from disjoint sub-seeds.

Streams reproduce the standard continual-learning stream shapes at desk
scale: a data-rich first task repeated with little data at the end
(direct transfer), the mirrored version (knowledge update), a background
color change, a label permutation, a plasticity stream of unrelated
tasks, a long stream with recurring task distributions, and a 5x5
class-pair x color grid whose diagonal forms the training stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, IngestError
from .tensorfile import load_tensor, save_tensor

COLORS = {
    "red": (1.0, 0.15, 0.15),
    "green": (0.15, 1.0, 0.15),
    "blue": (0.2, 0.35, 1.0),
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "yellow": (1.0, 1.0, 0.2),
    "magenta": (1.0, 0.2, 1.0),
    "cyan": (0.2, 1.0, 1.0),
    "orange": (1.0, 0.55, 0.1),
    "gray": (0.5, 0.5, 0.5),
}


def _bar_h(dy, dx, r):
    return (np.abs(dy) < 0.3 * r) & (np.abs(dx) < r)


def _bar_v(dy, dx, r):
    return (np.abs(dx) < 0.3 * r) & (np.abs(dy) < r)


def _cross(dy, dx, r):
    return _bar_h(dy, dx, r) | _bar_v(dy, dx, r)


def _ring(dy, dx, r):
    d = np.sqrt(dy * dy + dx * dx)
    return (d > 0.55 * r) & (d < r)


def _disk(dy, dx, r):
    return np.sqrt(dy * dy + dx * dx) < 0.62 * r


def _frame(dy, dx, r):
    m = np.maximum(np.abs(dy), np.abs(dx))
    return (m > 0.55 * r) & (m < r)


def _diag_main(dy, dx, r):
    return (np.abs(dy - dx) < 0.35 * r) & (np.maximum(np.abs(dy), np.abs(dx)) < r)


def _diag_anti(dy, dx, r):
    return (np.abs(dy + dx) < 0.35 * r) & (np.maximum(np.abs(dy), np.abs(dx)) < r)


def _corner_dots(dy, dx, r):
    out = np.zeros_like(dy, dtype=bool)
    for sy in (-0.6, 0.6):
        for sx in (-0.6, 0.6):
            out |= np.sqrt((dy - sy * r) ** 2 + (dx - sx * r) ** 2) < 0.33 * r
    return out


def _triangle(dy, dx, r):
    return (dy > -0.85 * r) & (dy < 0.85 * r) & (np.abs(dx) < 0.62 * (0.85 * r - dy))


GLYPHS = [_bar_h, _bar_v, _cross, _ring, _disk, _frame, _diag_main, _diag_anti, _corner_dots, _triangle]


@dataclass
class TaskSpec:
    """Recipe for one procedural classification task."""

    name: str = "task"
    classes: int = 4
    n_train: int = 200
    n_val: int = 100
    n_test: int = 400
    image_size: int = 16
    fg: str = "red"
    bg: str = "black"
    shape_family: int = 0
    label_perm: Optional[list] = None  # class -> label; identity when None
    jitter: float = 0.22
    scale_jitter: float = 0.28
    noise: float = 0.16
    seed: int = 0

    def glyph_index(self, cls: int) -> int:
        return (self.shape_family + cls) % len(GLYPHS)


@dataclass
class Task:
    """A generated dataset with train/val/test splits."""

    spec: TaskSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def classes(self) -> int:
        return self.spec.classes

    def split(self, which: str):
        return getattr(self, f"x_{which}"), getattr(self, f"y_{which}")


@dataclass
class TaskStream:
    kind: str
    base_seed: int
    specs: list

    def __len__(self):
        return len(self.specs)


def _render_sample(spec: TaskSpec, cls: int, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    coords = (np.arange(size) - (size - 1) / 2) / (size / 2)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cy, cx = spec.jitter * rng.uniform(-1.0, 1.0, size=2)
    r = 0.58 * (1.0 + spec.scale_jitter * rng.uniform(-1.0, 1.0))
    mask = GLYPHS[spec.glyph_index(cls)](yy - cy, xx - cx, r)
    fg = np.array(COLORS[spec.fg])[:, None, None]
    bg = np.array(COLORS[spec.bg])[:, None, None]
    img = bg * (~mask) + fg * mask
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_split(spec: TaskSpec, n: int, split_index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, split_index]))
    classes = np.tile(np.arange(spec.classes), n // spec.classes + 1)[:n]
    classes = rng.permutation(classes)
    xs = np.stack([_render_sample(spec, int(c), rng) for c in classes])
    perm = spec.label_perm or list(range(spec.classes))
    ys = np.array([perm[c] for c in classes], dtype=np.int64)
    return xs, ys


def gen_task(spec: TaskSpec) -> Task:
    """Render the task; deterministic given the spec."""
    if spec.classes > len(GLYPHS):
        raise ContractError(f"{spec.classes} classes requested but only {len(GLYPHS)} glyph families exist")
    if spec.label_perm is not None and sorted(spec.label_perm) != list(range(spec.classes)):
        raise ContractError(f"label_perm {spec.label_perm} is not a permutation of 0..{spec.classes - 1}")
    xt, yt = _render_split(spec, spec.n_train, 0)
    xv, yv = _render_split(spec, spec.n_val, 1)
    xe, ye = _render_split(spec, spec.n_test, 2)
    return Task(spec, xt, yt, xv, yv, xe, ye)


def _mix_seed(base_seed: int, index: int) -> int:
    return int((base_seed * 1_000_003 + 7_919 * (index + 1)) % (2**62))


def _non_identity_perm(classes: int, rng: np.random.Generator) -> list:
    while True:
        perm = list(rng.permutation(classes))
        if perm != list(range(classes)):
            return [int(p) for p in perm]


# (shape family, fg, bg) for the distinct middle/plasticity tasks
_TASK_PALETTE = [
    (2, "green", "black"),
    (4, "blue", "black"),
    (6, "magenta", "black"),
    (8, "cyan", "black"),
    (0, "yellow", "gray"),
    (3, "orange", "black"),
    (5, "white", "blue"),
    (7, "red", "gray"),
]


def make_stream(kind: str, base_seed: int, scale: float = 1.0,
                length: int = 30, classes: int = 4) -> TaskStream:
    """Construct one of the named streams; bitwise reproducible."""
    big = max(classes, int(round(2000 * scale)))
    small = max(classes, int(round(200 * scale)))
    test = max(50, int(round(400 * scale)))

    def spec(name, idx, family, fg, bg, n_train, perm=None, cls=classes):
        return TaskSpec(name=name, classes=cls, n_train=n_train,
                        n_val=max(20, n_train // 2), n_test=test,
                        fg=fg, bg=bg, shape_family=family, label_perm=perm,
                        seed=_mix_seed(base_seed, idx))

    first = (0, "red", "black")
    middles = [spec(f"t{i + 2}", i + 1, *_TASK_PALETTE[i], small) for i in range(4)]

    if kind == "s_minus":
        specs = [spec("t1+", 0, *first, big)] + middles + [spec("t1-", 5, *first, small)]
    elif kind == "s_plus":
        specs = [spec("t1", 0, *first, small)] + middles + [spec("t1+", 5, *first, big)]
    elif kind == "s_in":
        specs = [spec("t1+", 0, *first, big)] + middles + [spec("t1'", 5, 0, "red", "gray", small)]
    elif kind == "s_out":
        rng = np.random.default_rng(np.random.SeedSequence([base_seed, 999]))
        perm = _non_identity_perm(classes, rng)
        specs = [spec("t1+", 0, *first, big)] + middles + [spec("t1''", 5, *first, small, perm=perm)]
    elif kind == "s_pl":
        palette = [first] + _TASK_PALETTE[:4]
        sizes = [small] * 4 + [big]
        specs = [spec(f"t{i + 1}", i, *palette[i], sizes[i]) for i in range(5)]
    elif kind == "long":
        combos = [first] + _TASK_PALETTE[:7]
        specs = []
        for i in range(length):
            fam, fg, bg = combos[i % len(combos)]
            specs.append(spec(f"t{i + 1}", i, fam, fg, bg, small, cls=2))
    else:
        raise ContractError(f"unknown stream kind {kind!r}")
    return TaskStream(kind, base_seed, specs)


OOD_COLOR_COMBOS = [
    ("red", "black"),
    ("green", "black"),
    ("blue", "black"),
    ("black", "red"),
    ("black", "green"),
]


def make_ood_grid(base_seed: int, scale: float = 1.0) -> tuple[TaskStream, list]:
    """5 class-pairs x 5 color combos; cell (i, j) uses class pair i in
    colors j. The diagonal cells form the training stream; all 25 cells
    are available for evaluation."""
    n_train = max(2, int(round(600 * scale)))
    grid = []
    for i in range(5):
        row = []
        for j in range(5):
            fg, bg = OOD_COLOR_COMBOS[j]
            row.append(TaskSpec(
                name=f"cell{i}{j}", classes=2, n_train=n_train,
                n_val=max(20, n_train // 3), n_test=max(50, int(round(300 * scale))),
                fg=fg, bg=bg, shape_family=2 * i,
                seed=_mix_seed(base_seed, 100 + 10 * i + j),
            ))
        grid.append(row)
    diagonal = TaskStream("ood_diagonal", base_seed, [grid[i][i] for i in range(5)])
    return diagonal, grid


# -- file-based ingestion -----------------------------------------------------

SPLIT_FILES = ["x_train", "y_train", "x_val", "y_val", "x_test", "y_test"]


def export_task(task: Task, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLIT_FILES:
        save_tensor(directory / f"{name}.lmct", getattr(task, name))


def ingest_task(directory) -> Task:
    """Load a task from portable tensor files, validating shapes and labels."""
    directory = Path(directory)
    arrays = {}
    for name in SPLIT_FILES:
        path = directory / f"{name}.lmct"
        if not path.exists():
            raise IngestError(f"{path}: missing split file")
        arrays[name] = load_tensor(path)
    for split in ("train", "val", "test"):
        x, y = arrays[f"x_{split}"], arrays[f"y_{split}"]
        if x.ndim != 4:
            raise IngestError(f"{directory / ('x_' + split + '.lmct')}: expected rank-4 images, got rank {x.ndim}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise IngestError(
                f"{directory / ('y_' + split + '.lmct')}: label extent {y.shape} does not match batch {x.shape[0]}")
        if not np.allclose(y, np.round(y)):
            raise IngestError(f"{directory / ('y_' + split + '.lmct')}: labels must be integral")
    classes = int(max(arrays[f"y_{s}"].max() for s in ("train", "val", "test"))) + 1
    for split in ("train", "val", "test"):
        y = arrays[f"y_{split}"]
        if y.min() < 0:
            raise IngestError(f"{directory / ('y_' + split + '.lmct')}: negative label")
    c, h, w = arrays["x_train"].shape[1:]
    spec = TaskSpec(name=directory.name, classes=classes, image_size=h,
                    n_train=arrays["x_train"].shape[0], n_val=arrays["x_val"].shape[0],
                    n_test=arrays["x_test"].shape[0])
    return Task(spec, arrays["x_train"], arrays["y_train"].astype(np.int64),
                arrays["x_val"], arrays["y_val"].astype(np.int64),
                arrays["x_test"], arrays["y_test"].astype(np.int64))


def load_custom_stream(directory) -> TaskStream:
    """A stream from a directory of task subdirectories, ordered by name."""
    directory = Path(directory)
    subdirs = sorted(p for p in directory.iterdir() if p.is_dir())
    if not subdirs:
        raise IngestError(f"{directory}: no task subdirectories found")
    stream = TaskStream("custom", 0, [])
    stream.tasks = [ingest_task(p) for p in subdirs]
    stream.specs = [t.spec for t in stream.tasks]
    return stream


def materialize(stream: TaskStream) -> list:
    """Instantiate every task of a stream (custom streams are pre-loaded)."""
    if hasattr(stream, "tasks"):
        return stream.tasks
    return [gen_task(s) for s in stream.specs]
