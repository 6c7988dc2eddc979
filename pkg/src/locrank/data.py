"""Synthetic attribute benchmark, comparison pairs, and pair manifests.

A synthetic image holds one bright "attribute" disk whose radius grows
linearly with a hidden strength in [0, 1], over a background of dimmer
distractor disks and noise. Pairs are labelled from the hidden strengths:
``L = 1`` when the first image is clearly stronger, ``L = 0.5`` when the two
are within ``eps`` of each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError
from .netpbm import read_image, write_image

__all__ = [
    "SyntheticSample",
    "ComparisonPair",
    "PairDataset",
    "ManifestRecord",
    "DatasetManifest",
    "blob_radius",
    "render_blob",
    "gen_synthetic",
    "make_pairs",
    "load_manifest",
    "write_manifest",
    "read_truth",
    "write_truth",
    "write_synthetic_dataset",
    "LABEL_GT",
    "LABEL_EQ",
]

LABEL_GT = 1.0
LABEL_EQ = 0.5
_LABEL_NAMES = {"gt": LABEL_GT, "eq": LABEL_EQ}


@dataclass
class SyntheticSample:
    image: np.ndarray  # [1, H, W]
    strength: float
    true_center: tuple[float, float]
    true_radius: float


def _default_radii(w: int, h: int) -> tuple[float, float]:
    side = min(w, h)
    return side / 32.0, side / 8.0


def blob_radius(strength: float, r_min: float, r_max: float) -> float:
    return r_min + strength * (r_max - r_min)


def render_blob(image_size, center, radius: float, intensity: float = 1.0) -> np.ndarray:
    """Anti-aliased disk ``[H, W]``: value ``clip(r + 0.5 - dist, 0, 1) * intensity``."""
    w, h = image_size
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(xx - center[0], yy - center[1])
    return np.clip(radius + 0.5 - dist, 0.0, 1.0) * intensity


def gen_synthetic(
    n_images: int,
    image_size=(64, 64),
    clutter_level: float = 0.5,
    position_mode: str = "fixed-region",
    seed: int = 0,
    n_distractors: int = 6,
    r_min: float | None = None,
    r_max: float | None = None,
) -> list[SyntheticSample]:
    """Generate ``n_images`` grayscale samples with known strength and blob location.

    ``fixed-region`` jitters the attribute blob around the center of the
    top-left quadrant; ``uniform`` places it anywhere it fits.
    """
    if n_images < 2:
        raise DataError(f"need at least 2 images, got {n_images}")
    if position_mode not in ("fixed-region", "uniform"):
        raise DataError(f"unknown position_mode {position_mode!r}")
    w, h = int(image_size[0]), int(image_size[1])
    d_min, d_max = _default_radii(w, h)
    r_min = d_min if r_min is None else r_min
    r_max = d_max if r_max is None else r_max
    margin = r_max + 1.0
    if 2 * margin >= min(w, h) - 1:
        raise DataError(f"image {w}x{h} too small for a blob of radius {r_max}")
    region = ((w - 1) / 4.0, (h - 1) / 4.0)
    jitter = min(w, h) / 16.0
    if position_mode == "fixed-region" and min(region) - jitter < margin:
        raise DataError(f"image {w}x{h} too small for the fixed region with radius {r_max}")

    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_images):
        strength = float(rng.uniform(0.0, 1.0))
        radius = blob_radius(strength, r_min, r_max)
        if position_mode == "fixed-region":
            center = (region[0] + rng.uniform(-jitter, jitter), region[1] + rng.uniform(-jitter, jitter))
        else:
            center = (rng.uniform(margin, w - 1 - margin), rng.uniform(margin, h - 1 - margin))

        background = clutter_level * 0.1 * rng.standard_normal((h, w))
        placed = 0
        for _attempt in range(50 * n_distractors):
            if placed == n_distractors:
                break
            rc = rng.uniform(r_min, r_max)
            cx, cy = rng.uniform(rc, w - 1 - rc), rng.uniform(rc, h - 1 - rc)
            if np.hypot(cx - center[0], cy - center[1]) < radius + rc + 2.0:
                continue
            level = clutter_level * rng.uniform(0.3, 1.0)
            background = np.maximum(background, render_blob((w, h), (cx, cy), rc, level))
            placed += 1
        img = np.maximum(np.clip(background, 0.0, 1.0), render_blob((w, h), center, radius))
        samples.append(SyntheticSample(img[None], strength, (float(center[0]), float(center[1])), radius))
    return samples


# -- pairs -------------------------------------------------------------------


@dataclass
class ComparisonPair:
    """Two image references (arrays or file paths) and the label L in {1, 0.5}."""

    image_1: object
    image_2: object
    label: float
    ids: tuple | None = None

    def __post_init__(self):
        if self.label not in (LABEL_GT, LABEL_EQ):
            raise DataError(f"pair label must be 1 or 0.5, got {self.label}")

    @staticmethod
    def _load(ref) -> np.ndarray:
        if isinstance(ref, (str, Path)):
            return read_image(ref)
        return np.asarray(ref, dtype=np.float64)

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        return self._load(self.image_1), self._load(self.image_2)


def make_pairs(
    samples: Sequence[SyntheticSample],
    n_pairs: int,
    eps: float = 0.1,
    seed: int = 0,
    q_only: bool = False,
) -> list[ComparisonPair]:
    """Draw random distinct-image pairs, labelled and ordered by hidden strength.

    ``|s1 - s2| <= eps`` gives a similar pair (L = 0.5); otherwise the pair
    is ordered stronger-first with L = 1. ``q_only`` keeps drawing until
    ``n_pairs`` ordered pairs are found.
    """
    if eps < 0:
        raise DataError(f"eps must be non-negative, got {eps}")
    if len(samples) < 2:
        raise DataError("need at least 2 samples to form pairs")
    rng = np.random.default_rng(seed)
    pairs: list[ComparisonPair] = []
    attempts = 0
    while len(pairs) < n_pairs:
        attempts += 1
        if attempts > 1000 * max(n_pairs, 1):
            raise DataError("could not draw enough pairs; eps too large for these strengths?")
        i, j = rng.choice(len(samples), size=2, replace=False)
        si, sj = samples[i].strength, samples[j].strength
        if abs(si - sj) <= eps:
            if q_only:
                continue
            pairs.append(ComparisonPair(samples[i].image, samples[j].image, LABEL_EQ, (int(i), int(j))))
        else:
            if sj > si:
                i, j = j, i
            pairs.append(ComparisonPair(samples[i].image, samples[j].image, LABEL_GT, (int(i), int(j))))
    return pairs


@dataclass
class PairDataset:
    """Deduplicated image bank plus pair indices into it."""

    images: np.ndarray  # [M, C, H, W]
    index: np.ndarray  # [K, 2] int
    labels: np.ndarray  # [K]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.index) == 0:
            raise DataError("dataset has no pairs")
        if len(self.index) != len(self.labels):
            raise DataError("pair index and label counts differ")
        if self.images.ndim != 4:
            raise DataError(f"image bank must be [M, C, H, W], got {self.images.shape}")

    def __len__(self) -> int:
        return len(self.index)

    @property
    def is_q(self) -> np.ndarray:
        return self.labels == LABEL_GT

    def __iter__(self) -> Iterator[ComparisonPair]:
        for (a, b), label in zip(self.index, self.labels):
            yield ComparisonPair(self.images[a], self.images[b], float(label), (int(a), int(b)))

    def subset(self, rows) -> "PairDataset":
        return PairDataset(self.images, self.index[rows], self.labels[rows], self.names)

    @classmethod
    def from_pairs(cls, pairs: Sequence[ComparisonPair]) -> "PairDataset":
        if not pairs:
            raise DataError("dataset has no pairs")
        bank: dict[object, int] = {}
        images: list[np.ndarray] = []
        names: list[str] = []
        index, labels = [], []

        def key_of(ref, ident):
            if isinstance(ref, (str, Path)):
                return ("path", str(Path(ref)))
            if ident is not None:
                return ("id", ident)
            return ("obj", id(ref))

        for pair in pairs:
            row = []
            for side, ref in enumerate((pair.image_1, pair.image_2)):
                key = key_of(ref, None if pair.ids is None else pair.ids[side])
                if key not in bank:
                    bank[key] = len(images)
                    images.append(ComparisonPair._load(ref))
                    names.append(str(ref) if isinstance(ref, (str, Path)) else f"#{key[1]}")
                row.append(bank[key])
            index.append(row)
            labels.append(pair.label)
        shapes = {img.shape for img in images}
        if len(shapes) != 1:
            raise DataError(f"images differ in shape: {sorted(shapes)}")
        return cls(np.stack(images), np.array(index), np.array(labels), names)


# -- manifests ---------------------------------------------------------------


@dataclass
class ManifestRecord:
    path_1: str
    path_2: str
    label: str

    @property
    def L(self) -> float:
        return _LABEL_NAMES[self.label]


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_pairs(self) -> list[ComparisonPair]:
        return [ComparisonPair(self.resolve(r.path_1), self.resolve(r.path_2), r.L) for r in self.records]

    def to_dataset(self) -> PairDataset:
        return PairDataset.from_pairs(self.to_pairs())


def load_manifest(path) -> DatasetManifest:
    """Parse ``path<TAB>path<TAB>{gt|eq}`` lines; paths are relative to the manifest."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    manifest = DatasetManifest([], path.parent)
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.rstrip("\r").split("\t")
        if len(cols) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}")
        p1, p2, label = (c.strip() for c in cols)
        if label not in _LABEL_NAMES:
            raise DataError(f"{path}:{lineno}: label must be 'gt' or 'eq', got {label!r}")
        record = ManifestRecord(p1, p2, label)
        for ref in (p1, p2):
            if not manifest.resolve(ref).is_file():
                raise DataError(f"{path}:{lineno}: image not found: {manifest.resolve(ref)}")
        manifest.records.append(record)
    if not manifest.records:
        raise DataError(f"{path}: manifest has no records")
    return manifest


def write_manifest(path, records: Sequence[ManifestRecord]) -> None:
    lines = [f"{r.path_1}\t{r.path_2}\t{r.label}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_truth(path, names: Sequence[str], samples: Sequence[SyntheticSample]) -> None:
    lines = ["# name\tstrength\tcenter_x\tcenter_y\tradius"]
    for name, s in zip(names, samples):
        lines.append(f"{name}\t{s.strength!r}\t{s.true_center[0]!r}\t{s.true_center[1]!r}\t{s.true_radius!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_truth(path) -> dict[str, tuple[float, tuple[float, float], float]]:
    """Map image name to (strength, true center, true radius)."""
    out = {}
    path = Path(path)
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 columns")
        out[cols[0]] = (float(cols[1]), (float(cols[2]), float(cols[3])), float(cols[4]))
    return out


def write_synthetic_dataset(out_dir, config) -> dict[str, Path]:
    """Render train/test splits to PGM files plus manifests and a ground-truth sidecar."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(config.seed).generate_state(4)
    size = (config.image_size, config.image_size)
    paths = {}
    truth_names, truth_samples = [], []
    for split, n_img, n_pairs, img_seed, pair_seed, q_only in (
        ("train", config.n_train_images, config.n_train_pairs, seeds[0], seeds[1], False),
        ("test", config.n_test_images, config.n_test_pairs, seeds[2], seeds[3], True),
    ):
        samples = gen_synthetic(n_img, size, config.clutter_level, config.position_mode, int(img_seed))
        names = [f"images/{split}_{k:05d}.pgm" for k in range(len(samples))]
        for name, s in zip(names, samples):
            write_image(out_dir / name, s.image)
        pairs = make_pairs(samples, n_pairs, config.pair_eps, int(pair_seed), q_only=q_only)
        records = [
            ManifestRecord(names[p.ids[0]], names[p.ids[1]], "gt" if p.label == LABEL_GT else "eq") for p in pairs
        ]
        paths[split] = out_dir / f"{split}.tsv"
        write_manifest(paths[split], records)
        truth_names += names
        truth_samples += samples
    paths["truth"] = out_dir / "truth.tsv"
    write_truth(paths["truth"], truth_names, truth_samples)
    return paths
