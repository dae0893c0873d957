"""Synthetic multi-view, multi-task scenes.

Each scene is a 3x16x16 image holding one to three axis-aligned shapes
(square, cross, bar) on a noisy background. Labels are rendered exactly from
the shape list: a 4-class segmentation map, a binary saliency mask and the
index of the shape kind that covers the most cells. Four overlapping 12x12
crops play the role of the sensing devices' views.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

GRID = 16
VIEW = 12
CHANNELS = 3
NUM_SEG_CLASSES = 4  # background + 3 shape kinds
NUM_SHAPE_KINDS = 3
VIEW_OFFSETS = ((0, 0), (0, 4), (4, 0), (4, 4))

SQUARE, CROSS, BAR = 1, 2, 3
BASE_COLORS = {
    SQUARE: (0.9, 0.2, 0.2),
    CROSS: (0.2, 0.9, 0.2),
    BAR: (0.2, 0.3, 0.9),
}
BACKGROUND_AMPLITUDE = 0.1
COLOR_JITTER = 0.1


@dataclass(frozen=True)
class Shape:
    kind: int
    row: int
    col: int
    size: int
    vertical: bool = False

    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        r, c, s = self.row, self.col, self.size
        if self.kind == SQUARE:
            rr, cc = np.mgrid[r:r + s, c:c + s]
        elif self.kind == CROSS:
            # s is the arm length; bounding box is (2s+1) square
            span = np.arange(-s, s + 1)
            rr = np.concatenate([r + span, np.full(span.size, r)])
            cc = np.concatenate([np.full(span.size, c), c + span])
        elif self.kind == BAR:
            if self.vertical:
                rr, cc = np.mgrid[r:r + s, c:c + 2]
            else:
                rr, cc = np.mgrid[r:r + 2, c:c + s]
        else:
            raise ValueError(f"unknown shape kind {self.kind}")
        return np.ravel(rr), np.ravel(cc)


@dataclass
class Scene:
    image: np.ndarray        # (3, 16, 16) in [0, 1]
    y_seg: np.ndarray        # (16, 16) int, 0 = background
    y_sal: np.ndarray        # (16, 16) int in {0, 1}
    y_cls: int               # dominant shape kind index in [0, 3)
    shapes: list[Shape] = field(default_factory=list)

    @property
    def views(self) -> list[np.ndarray]:
        return split_views(self.image)

    def tobytes(self) -> bytes:
        return (self.image.astype("<f4").tobytes() + self.y_seg.astype(np.uint8).tobytes()
                + self.y_sal.astype(np.uint8).tobytes() + bytes([self.y_cls]))


def split_views(image: np.ndarray) -> list[np.ndarray]:
    image = np.asarray(image)
    if image.shape != (CHANNELS, GRID, GRID):
        raise ValueError(f"expected image of shape {(CHANNELS, GRID, GRID)}, got {image.shape}")
    return [image[:, r:r + VIEW, c:c + VIEW].copy() for r, c in VIEW_OFFSETS]


def render_labels(shapes: list[Shape]) -> tuple[np.ndarray, np.ndarray, int]:
    """Recompute (segmentation, saliency, dominant kind index) from geometry."""
    seg = np.zeros((GRID, GRID), dtype=np.int64)
    for shp in shapes:
        rr, cc = shp.cells()
        seg[rr, cc] = shp.kind
    sal = (seg != 0).astype(np.int64)
    counts = np.bincount(seg.ravel(), minlength=NUM_SEG_CLASSES)[1:]
    return seg, sal, int(np.argmax(counts))


def _place(kind: int, rng: np.random.Generator) -> Shape:
    if kind == SQUARE:
        s = int(rng.integers(3, 6))
        return Shape(kind, int(rng.integers(0, GRID - s + 1)), int(rng.integers(0, GRID - s + 1)), s)
    if kind == CROSS:
        s = int(rng.integers(2, 4))
        return Shape(kind, int(rng.integers(s, GRID - s)), int(rng.integers(s, GRID - s)), s)
    s = int(rng.integers(7, 12))
    vertical = bool(rng.integers(0, 2))
    if vertical:
        return Shape(kind, int(rng.integers(0, GRID - s + 1)), int(rng.integers(0, GRID - 1)), s, True)
    return Shape(kind, int(rng.integers(0, GRID - 1)), int(rng.integers(0, GRID - s + 1)), s, False)


def generate_scene(rng: np.random.Generator, class_probs=(1 / 3, 1 / 3, 1 / 3),
                   max_shapes: int = 3) -> Scene:
    n = int(rng.integers(1, max_shapes + 1))
    kinds = rng.choice(np.arange(1, NUM_SHAPE_KINDS + 1), size=n, p=np.asarray(class_probs))
    shapes = [_place(int(k), rng) for k in kinds]
    image = rng.uniform(0.0, BACKGROUND_AMPLITUDE, size=(CHANNELS, GRID, GRID))
    for shp in shapes:
        color = np.clip(np.asarray(BASE_COLORS[shp.kind]) + rng.uniform(-COLOR_JITTER, COLOR_JITTER, 3), 0, 1)
        rr, cc = shp.cells()
        image[:, rr, cc] = color[:, None]
    # keep values exactly representable in the f32 dump format
    image = image.astype(np.float32).astype(np.float64)
    seg, sal, cls = render_labels(shapes)
    return Scene(image, seg, sal, cls, shapes)


@dataclass
class Dataset:
    train: list[Scene]
    test: list[Scene]
    seed: int = 0


def make_dataset(n_train: int = 512, n_test: int = 128, seed: int = 0) -> Dataset:
    if n_train < 1 or n_test < 1:
        raise ValueError("dataset sizes must be >= 1")
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    train_rng = np.random.default_rng(train_ss)
    test_rng = np.random.default_rng(test_ss)
    train = [generate_scene(train_rng) for _ in range(n_train)]
    test = [generate_scene(test_rng) for _ in range(n_test)]
    return Dataset(train, test, seed)


# ---------------------------------------------------------------- task labels

TASK_KINDS = ("segmentation", "saliency", "classification")


def task_kinds_for(m_users: int) -> list[str]:
    """Round-robin assignment of task kinds to users."""
    return [TASK_KINDS[i % len(TASK_KINDS)] for i in range(m_users)]


def task_label(scene: Scene, kind: str):
    if kind == "segmentation":
        return scene.y_seg
    if kind == "saliency":
        return scene.y_sal
    if kind == "classification":
        return scene.y_cls
    raise ValueError(f"unknown task kind {kind!r}")


@dataclass
class ArrayView:
    """Dense arrays for a list of scenes, as fed to the codecs."""

    views: np.ndarray   # (S, N, C*V*V)
    seg: np.ndarray     # (S, 16, 16)
    sal: np.ndarray     # (S, 16, 16)
    cls: np.ndarray     # (S,)

    def __len__(self) -> int:
        return self.views.shape[0]

    def labels(self, kind: str, idx=slice(None)) -> np.ndarray:
        return {"segmentation": self.seg, "saliency": self.sal, "classification": self.cls}[kind][idx]


def to_arrays(scenes: list[Scene]) -> ArrayView:
    views = np.stack([np.stack([v.reshape(-1) for v in s.views]) for s in scenes])
    return ArrayView(views, np.stack([s.y_seg for s in scenes]), np.stack([s.y_sal for s in scenes]),
                     np.array([s.y_cls for s in scenes], dtype=np.int64))


# ---------------------------------------------------------------- dump format

DATASET_MAGIC = b"MIBD"
DATASET_VERSION = 1


def dump_dataset(path, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIIIIq", DATASET_VERSION, len(ds.train), len(ds.test),
                             CHANNELS, GRID, GRID, ds.seed))
        for scene in ds.train + ds.test:
            fh.write(scene.tobytes())


class DatasetFormatError(ValueError):
    pass


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != DATASET_MAGIC:
        raise DatasetFormatError("bad magic")
    version, n_train, n_test, ch, h, w, seed = struct.unpack_from("<IIIIIIq", buf, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    if (ch, h, w) != (CHANNELS, GRID, GRID):
        raise DatasetFormatError("unexpected grid dimensions")
    pos = 4 + struct.calcsize("<IIIIIIq")
    img_bytes = 4 * ch * h * w
    rec = img_bytes + 2 * h * w + 1
    if len(buf) != pos + rec * (n_train + n_test):
        raise DatasetFormatError("file length does not match header counts")
    scenes = []
    for _ in range(n_train + n_test):
        image = np.frombuffer(buf, "<f4", ch * h * w, pos).reshape(ch, h, w).astype(np.float64)
        pos += img_bytes
        seg = np.frombuffer(buf, np.uint8, h * w, pos).reshape(h, w).astype(np.int64)
        pos += h * w
        sal = np.frombuffer(buf, np.uint8, h * w, pos).reshape(h, w).astype(np.int64)
        pos += h * w
        cls = buf[pos]
        pos += 1
        if not np.array_equal(sal, (seg != 0).astype(np.int64)):
            raise DatasetFormatError("saliency mask disagrees with segmentation")
        if seg.max() >= NUM_SEG_CLASSES or cls >= NUM_SHAPE_KINDS:
            raise DatasetFormatError("label out of range")
        if sal.sum() == 0:
            raise DatasetFormatError("scene without foreground")
        counts = np.bincount(seg.ravel(), minlength=NUM_SEG_CLASSES)[1:]
        if int(np.argmax(counts)) != cls:
            raise DatasetFormatError("classification label disagrees with segmentation")
        scenes.append(Scene(image, seg, sal, int(cls)))
    return Dataset(scenes[:n_train], scenes[n_train:], seed)
