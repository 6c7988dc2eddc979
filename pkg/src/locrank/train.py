"""Two-stage training loop, crop augmentation and 10-crop test-time scoring."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Graph
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import ComparisonPair, PairDataset
from .errors import ConfigurationError, DataError, NonFiniteError
from .loss import LossResult, combined_loss
from .model import Architecture, ModelParams, init_params, promote_to_stage2, score_branch, siamese_forward
from .optim import OptimState, make_optim_state, sgd_step

logger = logging.getLogger(__name__)

__all__ = [
    "EpochRecord",
    "TrainLog",
    "TrainingError",
    "architecture_for",
    "build_params",
    "prepare_params",
    "crop_batch",
    "tta_crops",
    "score_images",
    "score_image_tta",
    "compute_batch_gradients",
    "train",
]


class TrainingError(NonFiniteError):
    """Non-finite loss during training; the message names the offending pair."""


@dataclass
class EpochRecord:
    epoch: int
    mean_total_loss: float
    mean_rank_loss: float
    mean_st_loss: float
    oob_fraction: float
    mean_s: float
    mean_t_x: float
    mean_t_y: float
    wall_seconds: float

    def to_line(self, include_time: bool = True) -> str:
        wall = self.wall_seconds if include_time else 0.0
        return (
            f"{self.epoch}\t{self.mean_total_loss:.10g}\t{self.mean_rank_loss:.10g}\t"
            f"{self.mean_st_loss:.10g}\t{self.oob_fraction:.10g}\t{self.mean_s:.10g}\t{wall:.3f}"
        )


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    # per epoch: every patch center seen, in full-image pixel coordinates
    centers: list[np.ndarray] = field(default_factory=list)

    def write(self, path, include_time: bool = True) -> None:
        header = "# epoch\tmean_total_loss\tmean_rank_loss\tmean_st_loss\toob_fraction\tmean_s\twall_seconds"
        lines = [header] + [r.to_line(include_time) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def write_timing(self, path) -> None:
        lines = ["# epoch\twall_seconds"] + [f"{r.epoch}\t{r.wall_seconds:.3f}" for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def write_centers(self, path) -> None:
        lines = ["# epoch\tx\ty"]
        for rec, pts in zip(self.records, self.centers):
            lines += [f"{rec.epoch}\t{x:.6f}\t{y:.6f}" for x, y in pts]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def read_centers(path) -> dict[int, np.ndarray]:
        by_epoch: dict[int, list] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            e, x, y = line.split("\t")
            by_epoch.setdefault(int(e), []).append((float(x), float(y)))
        return {e: np.array(v) for e, v in sorted(by_epoch.items())}


# -- parameters ----------------------------------------------------------------


def architecture_for(config: RunConfig, use_global: bool | None = None) -> Architecture:
    arch = Architecture(
        in_channels=config.channels,
        input_size=config.crop_size,
        patch_size=config.patch_size,
        use_global=(config.stage == 2) if use_global is None else use_global,
    )
    arch.layer_shapes()  # dry-run shape audit
    return arch


def build_params(config: RunConfig, rng: np.random.Generator, use_global: bool | None = None) -> ModelParams:
    return init_params(
        architecture_for(config, use_global), rng, config.s_init, config.t_init_range, config.scale_lr_factor
    )


def prepare_params(config: RunConfig, rng: np.random.Generator, params: ModelParams | None) -> ModelParams:
    """Resolve the starting parameters for ``config.stage``.

    Stage 1 starts fresh unless ``params`` is given. Stage 2 needs stage-1
    weights, either passed in or named by ``init_checkpoint``; they are
    widened with :func:`promote_to_stage2`.
    """
    if config.stage == 1:
        if params is None:
            return build_params(config, rng)
        if params.arch.use_global:
            raise ConfigurationError("stage 1 trains without the global stream, but params have a 128-input head")
        return params
    if params is None:
        if not config.init_checkpoint:
            raise ConfigurationError("stage 2 needs stage-1 weights: set 'init_checkpoint' or pass params")
        params, _, _ = load_checkpoint(config.init_checkpoint)
    if not params.arch.use_global:
        params = promote_to_stage2(params, rng, keep_ranker=config.stage2_keep_ranker)
    params.scale_grad_factor = config.scale_lr_factor
    return params


# -- cropping ------------------------------------------------------------------


def crop_batch(images: np.ndarray, offsets: np.ndarray, size: int) -> np.ndarray:
    """Crop ``images [N, C, H, W]`` at per-image ``(x, y)`` offsets."""
    return np.stack([img[:, oy : oy + size, ox : ox + size] for img, (ox, oy) in zip(images, offsets)])


def tta_crops(image: np.ndarray, crop: int, flip: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Four corner crops and the center crop, then (optionally) their mirrors.

    Returns ``(crops [K, C, crop, crop], offsets [K, 2])``.
    """
    _, h, w = image.shape
    offsets = np.array([(0, 0), (w - crop, 0), (0, h - crop), (w - crop, h - crop), ((w - crop) // 2, (h - crop) // 2)])
    crops = crop_batch(image[None].repeat(len(offsets), axis=0), offsets, crop)
    if flip:
        crops = np.concatenate([crops, crops[..., ::-1]])
        offsets = np.concatenate([offsets, offsets])
    return np.ascontiguousarray(crops), offsets


def score_images(
    images: np.ndarray, params: ModelParams, config: RunConfig, tta: bool = True, chunk: int = 40
) -> np.ndarray:
    """Attribute strength per image; with ``tta`` the mean over the 10 crops."""
    images = np.asarray(images, dtype=np.float64)
    crop = config.crop_size
    out = np.empty(len(images))
    for start in range(0, len(images), chunk):
        block = images[start : start + chunk]
        if tta:
            crops = np.concatenate([tta_crops(img, crop, config.tta_flip)[0] for img in block])
            per = 10 if config.tta_flip else 5
        else:
            off = np.tile([(images.shape[-1] - crop) // 2, (images.shape[-2] - crop) // 2], (len(block), 1))
            crops, per = crop_batch(block, off, crop), 1
        v = score_branch(crops, params).v.data.reshape(len(block), per)
        out[start : start + len(block)] = v.mean(axis=1)
    return out


def score_image_tta(image: np.ndarray, params: ModelParams, config: RunConfig) -> float:
    return float(score_images(np.asarray(image)[None], params, config, tta=True)[0])


# -- one mini-batch ---------------------------------------------------------------


def _chunk_gradients(params: ModelParams, x1, x2, labels, n_total: int, st_weight: float):
    local = params.snapshot()
    out1, out2 = siamese_forward(x1, x2, local)
    res = combined_loss(out1, out2, labels, st_weight)
    scaled = res.total * (len(labels) / n_total)
    Graph(scaled).backward()
    return local.grads(), res, out1, out2


def compute_batch_gradients(
    params: ModelParams,
    x1: np.ndarray,
    x2: np.ndarray,
    labels: np.ndarray,
    st_weight: float = 1.0,
    threads: int = 1,
):
    """Gradient of the mean gated loss over a batch of pairs.

    With ``threads > 1`` the batch is split into contiguous chunks, each on
    its own graph over a snapshot of the parameters; chunk gradients are
    summed in chunk order so the reduction is reproducible.
    """
    n = len(labels)
    bounds = np.array_split(np.arange(n), max(1, min(threads, n)))
    jobs = [(params, x1[b], x2[b], labels[b], n, st_weight) for b in bounds]
    if len(jobs) == 1:
        results = [_chunk_gradients(*jobs[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            results = list(pool.map(lambda j: _chunk_gradients(*j), jobs))
    grads = {k: g.copy() for k, g in results[0][0].items()}
    for other in results[1:]:
        for k, g in other[0].items():
            grads[k] += g
    return grads, results


def _diagnose(params, x1, x2, labels, rows, dataset: PairDataset, st_weight: float) -> str:
    for k, row in enumerate(rows):
        try:
            _chunk_gradients(params, x1[k : k + 1], x2[k : k + 1], labels[k : k + 1], 1, st_weight)
        except NonFiniteError as exc:
            a, b = dataset.index[row]
            names = dataset.names
            label = f"{names[a]} vs {names[b]}" if names else f"images {a} vs {b}"
            return f"pair {row} ({label}, L={labels[k]}): {exc}"
    return f"batch of pairs {list(rows)} (no single pair reproduces the failure)"


# -- training loop ---------------------------------------------------------------


def _as_dataset(data) -> PairDataset:
    if isinstance(data, PairDataset):
        return data
    if isinstance(data, Sequence) and data and isinstance(data[0], ComparisonPair):
        return PairDataset.from_pairs(data)
    raise DataError("training data must be a PairDataset or a non-empty list of ComparisonPair")


def train(
    config: RunConfig,
    data,
    params: ModelParams | None = None,
    out_dir=None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train for ``config.epochs`` epochs on ``data`` and return ``(params, log)``.

    Every epoch visits the pairs in a fresh random order in mini-batches of
    ``config.batch_size``; each image gets an independent random crop. With
    ``out_dir`` a checkpoint is written every ``checkpoint_every`` epochs and
    at the end, along with the per-epoch log and the logged patch centers.
    """
    dataset = _as_dataset(data)
    _, c, h, w = dataset.images.shape
    if (c, h, w) != (config.channels, config.image_size, config.image_size):
        raise ConfigurationError(
            f"dataset images are {c}x{h}x{w}, config expects "
            f"{config.channels}x{config.image_size}x{config.image_size}"
        )
    init_seq, loop_seq = np.random.SeedSequence(config.seed).spawn(2)
    params = prepare_params(config, np.random.default_rng(init_seq), params)
    rng = np.random.default_rng(loop_seq)
    state = make_optim_state(config)
    threads = 1 if config.deterministic else config.threads
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log = TrainLog()
    crop = config.crop_size
    span = config.image_size - crop + 1
    n_pairs = len(dataset)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        totals = np.zeros(3)  # total, rank, st
        oob = 0.0
        thetas, centers = [], []
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, config.batch_size):
            rows = order[start : start + config.batch_size]
            i1, i2 = dataset.index[rows, 0], dataset.index[rows, 1]
            labels = dataset.labels[rows]
            offsets = rng.integers(0, span, size=(len(rows), 2, 2))
            x1 = crop_batch(dataset.images[i1], offsets[:, 0], crop)
            x2 = crop_batch(dataset.images[i2], offsets[:, 1], crop)
            try:
                grads, results = compute_batch_gradients(params, x1, x2, labels, config.st_loss_weight, threads)
            except NonFiniteError as exc:
                where = _diagnose(params, x1, x2, labels, rows, dataset, config.st_loss_weight)
                raise TrainingError(f"epoch {epoch}: non-finite loss at {where}") from exc
            sgd_step(params, grads, state)

            for (_, res, out1, out2), chunk in zip(results, np.array_split(np.arange(len(rows)), len(results))):
                res: LossResult
                totals += [
                    res.per_pair.sum(),
                    res.rank_component.sum(),
                    (res.lambda_1 * res.st_components[0] + res.lambda_2 * res.st_components[1]).sum(),
                ]
                oob += res.lambda_1.sum() + res.lambda_2.sum()
                thetas += [out1.theta.data, out2.theta.data]
                centers += [out1.center_px.data + offsets[chunk, 0], out2.center_px.data + offsets[chunk, 1]]

        theta = np.concatenate(thetas)
        record = EpochRecord(
            epoch=epoch,
            mean_total_loss=totals[0] / n_pairs,
            mean_rank_loss=totals[1] / n_pairs,
            mean_st_loss=totals[2] / n_pairs,
            oob_fraction=oob / (2 * n_pairs),
            mean_s=float(theta[:, 0].mean()),
            mean_t_x=float(theta[:, 1].mean()),
            mean_t_y=float(theta[:, 2].mean()),
            wall_seconds=time.perf_counter() - t0,
        )
        log.records.append(record)
        log.centers.append(np.concatenate(centers))
        logger.info(
            "stage %d epoch %d: loss %.4f rank %.4f st %.4f oob %.3f s %.3f (%.1fs)",
            config.stage, epoch, record.mean_total_loss, record.mean_rank_loss,
            record.mean_st_loss, record.oob_fraction, record.mean_s, record.wall_seconds,
        )
        if on_epoch is not None:
            on_epoch(record)
        if out_dir is not None and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
            save_checkpoint(out_dir / f"stage{config.stage}_epoch{epoch:04d}.lrk", params, state, config)

    if out_dir is not None:
        save_checkpoint(out_dir / f"stage{config.stage}_final.lrk", params, state, config)
        log.write(out_dir / f"stage{config.stage}_log.tsv", include_time=not config.deterministic)
        log.write_timing(out_dir / f"stage{config.stage}_timing.tsv")
        log.write_centers(out_dir / f"stage{config.stage}_centers.tsv")
    return params, log
