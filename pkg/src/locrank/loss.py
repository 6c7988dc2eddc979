"""Pairwise ranking loss, patch-boundary loss, and their gated combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import BranchOutput
from .spatial import patch_center_px

__all__ = ["rank_loss", "rank_probability", "st_loss", "LossResult", "combined_loss"]


def _scalar_or_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def rank_probability(v1, v2) -> np.ndarray:
    """P(first image ranks higher) = logistic(v1 - v2)."""
    d = np.asarray(_scalar_or_tensor(v1).data - _scalar_or_tensor(v2).data)
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def rank_loss(v1, v2, label) -> Tensor:
    """Cross-entropy between logistic(v1 - v2) and the target ``label``.

    Written as ``softplus(-d) + (1 - L) * d`` with ``d = v1 - v2``, which is
    the same quantity as ``-L log P - (1 - L) log(1 - P)`` but cannot
    overflow. ``label`` is 1 for an ordered pair and 0.5 for a similar pair.
    """
    v1, v2 = _scalar_or_tensor(v1), _scalar_or_tensor(v2)
    d = ad.sub(v1, v2)
    label = np.broadcast_to(np.asarray(label, dtype=np.float64), d.shape)
    return ad.add(ad.softplus(ad.neg(d)), ad.mul(d, Tensor(1.0 - label)))


def st_loss(theta, image_size) -> Tensor:
    """Squared pixel distance of the warped patch center from the image center."""
    w, h = image_size
    center = patch_center_px(theta, image_size)
    offset = np.broadcast_to(np.array([(w - 1) / 2.0, (h - 1) / 2.0]), center.shape)
    diff = ad.sub(center, Tensor(offset))
    dx, dy = diff[..., 0], diff[..., 1]
    return ad.add(ad.mul(dx, dx), ad.mul(dy, dy))


@dataclass
class LossResult:
    """Batch loss plus the per-pair pieces it was assembled from."""

    total: Tensor
    rank_component: np.ndarray
    st_components: tuple[np.ndarray, np.ndarray]
    lambda_1: np.ndarray
    lambda_2: np.ndarray
    P: np.ndarray
    per_pair: np.ndarray

    @property
    def routing(self) -> list[str]:
        """'full' when the rank loss reaches ranker and localizer, 'stn-only' otherwise."""
        gate = (1 - self.lambda_1) * (1 - self.lambda_2)
        return ["full" if g else "stn-only" for g in gate]


def _stack_outputs(items: list[BranchOutput]) -> BranchOutput:
    # each item holds exactly one image
    return BranchOutput(
        ad.stack([ad.reshape(o.v, ()) for o in items]),
        ad.stack([ad.reshape(o.theta, (3,)) for o in items]),
        ad.stack([ad.reshape(o.patch, o.patch.shape[-3:]) for o in items]),
        ad.stack([ad.reshape(o.center_px, (2,)) for o in items]),
        np.array([bool(np.all(o.in_bounds)) for o in items]),
        ad.stack([ad.reshape(o.grid, o.grid.shape[-3:]) for o in items]),
        items[0].image_size,
    )


def combined_loss(out_1, out_2=None, labels=None, st_weight: float = 1.0) -> LossResult:
    """Gated batch loss.

    Per pair: ``(1-l1)(1-l2) * rank + l1 * ST_1 + l2 * ST_2``, averaged over
    the batch, where ``l_i = 1`` iff branch i's patch center left the image.
    The ST terms depend only on theta, so their gradient reaches the
    localizer alone; a zero gate multiplies the rank gradient by exactly 0,
    so an out-of-bounds pair sends nothing into the ranker.

    Accepts either two batched :class:`BranchOutput` objects plus a label
    array, or a single list of ``(BranchOutput, BranchOutput, L)`` triples.
    """
    if out_2 is None:
        triples = list(out_1)
        if not triples:
            raise ValueError("combined_loss needs a non-empty batch")
        out_1 = _stack_outputs([t[0] for t in triples])
        out_2 = _stack_outputs([t[1] for t in triples])
        labels = np.array([t[2] for t in triples], dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = len(out_1)
    if n == 0:
        raise ValueError("combined_loss needs a non-empty batch")

    lam1 = (~out_1.in_bounds).astype(np.float64)
    lam2 = (~out_2.in_bounds).astype(np.float64)
    gate = (1.0 - lam1) * (1.0 - lam2)

    rank = rank_loss(out_1.v, out_2.v, labels)
    st1 = st_loss(out_1.theta, out_1.image_size)
    st2 = st_loss(out_2.theta, out_2.image_size)
    gate_t = Tensor(gate)
    gate_t.kink = np.stack([lam1, lam2])  # routing is discrete in theta
    per_pair = ad.add(
        ad.mul(rank, gate_t),
        ad.add(ad.mul(st1, Tensor(st_weight * lam1)), ad.mul(st2, Tensor(st_weight * lam2))),
    )
    total = ad.mul(ad.tsum(per_pair), 1.0 / n)
    return LossResult(
        total=total,
        rank_component=rank.data.copy(),
        st_components=(st1.data.copy(), st2.data.copy()),
        lambda_1=lam1,
        lambda_2=lam2,
        P=rank_probability(out_1.v, out_2.v),
        per_pair=per_pair.data.copy(),
    )
