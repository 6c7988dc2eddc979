"""scikit-learn style wrapper around two-stage training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import RunConfig
from .data import PairDataset
from .errors import DataError
from .evaluation import accuracy_from_scores, predicted_centers
from .model import localize
from .train import score_images, train
from .validation import check_images, check_pairs

__all__ = ["LocalizeRanker"]


class LocalizeRanker(BaseEstimator):
    """Learn where an attribute lives and how strong it is from pairwise labels.

    Parameters
    ----------
    epochs : int
        Stage-1 epochs (patch stream only).
    stage2_epochs : int
        Stage-2 epochs with the global stream added; 0 skips stage 2.
    crop_size : int or None
        Training crop side. ``None`` uses the image side minus 8.
    patch_size : int
        Side of the resampled patch seen by the ranker.
    threads : int
        Worker cap for gradient computation; ignored when ``deterministic``.

    The remaining parameters map one-to-one onto :class:`~locrank.config.RunConfig`.

    Attributes
    ----------
    params_ : ModelParams
        Trained weights of the final stage.
    config_ : RunConfig
        Configuration of the final stage.
    logs_ : list of TrainLog
        One per trained stage.
    """

    def __init__(
        self,
        epochs=50,
        stage2_epochs=50,
        batch_size=25,
        lr_rn=1e-3,
        lr_stn=1e-4,
        scale_lr_factor=0.1,
        momentum=0.9,
        st_loss_weight=1.0,
        crop_size=None,
        patch_size=32,
        s_init=0.5,
        t_init_range=0.3,
        tta_flip=True,
        seed=0,
        threads=1,
        deterministic=True,
    ):
        self.epochs = epochs
        self.stage2_epochs = stage2_epochs
        self.batch_size = batch_size
        self.lr_rn = lr_rn
        self.lr_stn = lr_stn
        self.scale_lr_factor = scale_lr_factor
        self.momentum = momentum
        self.st_loss_weight = st_loss_weight
        self.crop_size = crop_size
        self.patch_size = patch_size
        self.s_init = s_init
        self.t_init_range = t_init_range
        self.tta_flip = tta_flip
        self.seed = seed
        self.threads = threads
        self.deterministic = deterministic

    def _config(self, images: np.ndarray) -> RunConfig:
        _, c, h, w = images.shape
        if h != w:
            raise DataError(f"images must be square, got {h}x{w}")
        keys = ["batch_size", "lr_rn", "lr_stn", "scale_lr_factor", "momentum", "st_loss_weight",
                "patch_size", "s_init", "t_init_range", "tta_flip", "seed", "threads", "deterministic"]
        return RunConfig(
            epochs=self.epochs,
            channels=c,
            image_size=h,
            crop_size=self.crop_size if self.crop_size is not None else h - 8,
            **{k: getattr(self, k) for k in keys},
        )

    def fit(self, X, y):
        """Train on pairs ``X [n_pairs, 2, C, H, W]`` with labels ``y`` in {1, 0.5, 0}."""
        pairs, labels = check_pairs(X, y)
        n = len(pairs)
        dataset = PairDataset(
            pairs.reshape((2 * n,) + pairs.shape[2:]), np.arange(2 * n).reshape(n, 2), labels
        )
        config = self._config(dataset.images)
        params, log = train(config, dataset)
        self.logs_ = [log]
        if self.stage2_epochs > 0:
            config = config.replace(stage=2, epochs=self.stage2_epochs)
            params, log = train(config, dataset, params=params)
            self.logs_.append(log)
        self.params_, self.config_ = params, config
        self.n_features_in_ = int(np.prod(pairs.shape[2:]))
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this LocalizeRanker is not fitted yet; call fit first")

    def _check_shape(self, images: np.ndarray) -> None:
        expected = (self.config_.channels, self.config_.image_size, self.config_.image_size)
        if images.shape[1:] != expected:
            raise DataError(f"expected images of shape {expected}, got {images.shape[1:]}")

    def predict(self, X) -> np.ndarray:
        """Attribute strength per image of ``X [N, C, H, W]`` (10-crop mean)."""
        self._check_fitted()
        images = check_images(X)
        self._check_shape(images)
        return score_images(images, self.params_, self.config_, tta=True)

    def transform(self, X) -> np.ndarray:
        """Localizer output ``theta = (s, t_x, t_y)`` per image, ``[N, 3]``, from the center crop."""
        self._check_fitted()
        images = check_images(X)
        self._check_shape(images)
        crop = self.config_.crop_size
        ox, oy = (images.shape[3] - crop) // 2, (images.shape[2] - crop) // 2
        return localize(images[:, :, oy : oy + crop, ox : ox + crop], self.params_).data.copy()

    def localize(self, X) -> np.ndarray:
        """Patch centers ``[N, 2]`` in pixel coordinates of the full images."""
        self._check_fitted()
        images = check_images(X)
        self._check_shape(images)
        return predicted_centers(images, self.params_, self.config_)[0]

    def score(self, X, y) -> float:
        """Pairwise accuracy over the ordered pairs (labels 1 or 0) of ``X``."""
        pairs, labels = check_pairs(X, y)
        ordered = labels == 1.0
        if not ordered.any():
            raise DataError("score needs at least one ordered pair (label 1 or 0)")
        pairs = pairs[ordered]
        n = len(pairs)
        scores = self.predict(pairs.reshape((2 * n,) + pairs.shape[2:]))
        return accuracy_from_scores(scores, np.arange(2 * n).reshape(n, 2))

    @property
    def center_logs_(self) -> list[np.ndarray]:
        self._check_fitted()
        return [c for log in self.logs_ for c in log.centers]
