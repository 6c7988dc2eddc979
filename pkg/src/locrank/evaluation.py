"""Pairwise ranking accuracy and localization diagnostics."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import PairDataset, SyntheticSample
from .model import ModelParams, score_branch
from .train import _as_dataset, score_images

logger = logging.getLogger(__name__)

__all__ = [
    "EvalReport",
    "accuracy_from_scores",
    "eq_accuracy_from_scores",
    "eval_pairs",
    "predicted_centers",
    "localization_error",
    "center_errors",
]


@dataclass
class EvalReport:
    n_pairs_q: int
    n_pairs_e: int
    accuracy_q: float
    accuracy_e: float | None = None
    eq_tau: float | None = None
    mean_center_error_px: float | None = None
    oob_fraction: float = 0.0
    seconds_per_image: float = 0.0

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if value is None:
                value = "nan"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def accuracy_from_scores(scores: np.ndarray, index: np.ndarray) -> float:
    """Fraction of ordered pairs ``(a, b)`` with ``scores[a] > scores[b]``; ties are wrong."""
    index = np.asarray(index).reshape(-1, 2)
    if len(index) == 0:
        return float("nan")
    scores = np.asarray(scores)
    return float(np.mean(scores[index[:, 0]] > scores[index[:, 1]]))


def eq_accuracy_from_scores(scores: np.ndarray, index: np.ndarray, tau: float) -> float:
    """Fraction of similar pairs whose scores differ by at most ``tau``."""
    index = np.asarray(index).reshape(-1, 2)
    if len(index) == 0:
        return float("nan")
    scores = np.asarray(scores)
    return float(np.mean(np.abs(scores[index[:, 0]] - scores[index[:, 1]]) <= tau))


def _center_crops(images: np.ndarray, crop: int) -> tuple[np.ndarray, np.ndarray]:
    _, _, h, w = images.shape
    ox, oy = (w - crop) // 2, (h - crop) // 2
    return images[:, :, oy : oy + crop, ox : ox + crop], np.array([ox, oy], dtype=np.float64)


def predicted_centers(images: np.ndarray, params: ModelParams, config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Patch centers in full-image pixels from the center crop, plus in-bounds flags."""
    crops, offset = _center_crops(np.asarray(images, dtype=np.float64), config.crop_size)
    out = score_branch(crops, params)
    return out.center_px.data + offset, out.in_bounds


def center_errors(predicted: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(predicted, dtype=np.float64) - np.asarray(truth, dtype=np.float64), axis=-1)


def localization_error(samples: Sequence[SyntheticSample], params: ModelParams, config: RunConfig) -> float:
    """Mean Euclidean distance between the localizer's patch center and the true blob center."""
    images = np.stack([s.image for s in samples])
    centers, _ = predicted_centers(images, params, config)
    return float(center_errors(centers, [s.true_center for s in samples]).mean())


def eval_pairs(
    data,
    params: ModelParams,
    config: RunConfig,
    samples: Sequence[SyntheticSample] | None = None,
    truth_centers: np.ndarray | None = None,
    verbose: bool = True,
) -> EvalReport:
    """Score every distinct image once (10-crop TTA) and judge each pair.

    Ordered pairs are correct iff the first image scores strictly higher.
    Similar pairs count as correct when the scores are within
    ``tau = eq_tau_factor * std(scores)`` and are kept out of ``accuracy_q``.
    Ground-truth centers (``samples`` or ``truth_centers``, aligned with the
    dataset's image bank) add the mean localization error.
    """
    dataset: PairDataset = _as_dataset(data)
    t0 = time.perf_counter()
    scores = score_images(dataset.images, params, config, tta=True)
    per_image = (time.perf_counter() - t0) / len(dataset.images)
    if verbose:
        print(f"scoring time: {per_image * 1e3:.3f} ms per image ({len(dataset.images)} images, 10-crop TTA)")
    logger.info("scored %d images at %.4f s/image", len(dataset.images), per_image)

    q = dataset.is_q
    e_index = dataset.index[~q]
    tau = config.eq_tau_factor * float(np.std(scores))
    centers, inside = predicted_centers(dataset.images, params, config)
    if samples is not None:
        truth_centers = np.array([s.true_center for s in samples])
    err = None
    if truth_centers is not None:
        err = float(center_errors(centers, truth_centers).mean())
    return EvalReport(
        n_pairs_q=int(q.sum()),
        n_pairs_e=int((~q).sum()),
        accuracy_q=accuracy_from_scores(scores, dataset.index[q]),
        accuracy_e=eq_accuracy_from_scores(scores, e_index, tau) if len(e_index) else None,
        eq_tau=tau,
        mean_center_error_px=err,
        oob_fraction=float(np.mean(~inside)),
        seconds_per_image=per_image,
    )
