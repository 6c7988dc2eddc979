import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from locrank import LocalizeRanker
from locrank.data import gen_synthetic, make_pairs
from locrank.errors import DataError
from locrank.validation import check_images, check_pairs


def pair_arrays(n_images=12, n_pairs=16, size=24, seed=0):
    samples = gen_synthetic(n_images, (size, size), seed=seed)
    pairs = make_pairs(samples, n_pairs, seed=seed)
    X = np.stack([np.stack([p.image_1, p.image_2]) for p in pairs])
    y = np.array([p.label for p in pairs])
    return X, y, samples


class TestValidation:
    def test_images_ok(self):
        assert check_images(np.zeros((2, 1, 4, 4), dtype=np.float32)).dtype == np.float64

    @pytest.mark.parametrize("shape", [(1, 4, 4), (2, 2, 4, 4), (0, 1, 4, 4)])
    def test_images_bad_shape(self, shape):
        with pytest.raises(DataError):
            check_images(np.zeros(shape))

    def test_images_non_finite(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 1, 1] = np.inf
        with pytest.raises(DataError, match="NaN or infinite"):
            check_images(x)

    def test_pairs_swap_label_zero(self):
        X = np.stack([np.zeros((2, 1, 3, 3)), np.zeros((2, 1, 3, 3))])
        X[0, 0] = 1.0
        out, labels = check_pairs(X, [0.0, 0.5])
        np.testing.assert_array_equal(labels, [1.0, 0.5])
        assert out[0, 1].max() == 1.0 and out[0, 0].max() == 0.0
        assert X[0, 0].max() == 1.0  # input untouched

    def test_pairs_bad_labels(self):
        with pytest.raises(DataError, match="labels"):
            check_pairs(np.zeros((1, 2, 1, 3, 3)), [2.0])
        with pytest.raises(DataError, match="labels"):
            check_pairs(np.zeros((2, 2, 1, 3, 3)), [1.0])

    def test_pairs_non_finite_second_image(self):
        X = np.zeros((1, 2, 1, 3, 3))
        X[0, 1, 0, 0, 0] = np.nan
        with pytest.raises(DataError):
            check_pairs(X, [1.0])


class TestEstimator:
    def test_get_params_and_clone(self):
        est = LocalizeRanker(epochs=3, lr_rn=0.01, crop_size=20)
        params = est.get_params()
        assert params["epochs"] == 3 and params["crop_size"] == 20 and params["stage2_epochs"] == 50
        twin = clone(est)
        assert twin.get_params() == params
        est.set_params(seed=4)
        assert est.seed == 4

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            LocalizeRanker().predict(np.zeros((1, 1, 24, 24)))

    def test_fit_predict_localize_score(self):
        X, y, samples = pair_arrays()
        est = LocalizeRanker(epochs=2, stage2_epochs=1, batch_size=8, patch_size=12, lr_rn=0.01)
        assert est.fit(X, y) is est
        images = np.stack([s.image for s in samples])
        v = est.predict(images)
        assert v.shape == (12,) and np.all(np.isfinite(v))
        centers = est.localize(images)
        assert centers.shape == (12, 2)
        theta = est.transform(images)
        assert theta.shape == (12, 3) and np.all((theta[:, 0] >= 0.05) & (theta[:, 0] <= 2.0))
        # center = (s * t + 1) * (crop - 1) / 2 + crop offset
        np.testing.assert_allclose(centers, (theta[:, 0:1] * theta[:, 1:] + 1) * 7.5 + 4, atol=1e-12)
        acc = est.score(X, y)
        assert 0.0 <= acc <= 1.0
        assert len(est.logs_) == 2 and est.config_.stage == 2
        assert len(est.center_logs_) == 3
        assert est.n_features_in_ == 24 * 24
        assert est.params_["rn.score.weights"].shape == (1, 128)

    def test_fit_is_deterministic(self):
        X, y, samples = pair_arrays()
        images = np.stack([s.image for s in samples])
        kw = dict(epochs=1, stage2_epochs=0, batch_size=8, patch_size=12)
        a = LocalizeRanker(**kw).fit(X, y).predict(images)
        b = LocalizeRanker(**kw).fit(X, y).predict(images)
        assert a.tobytes() == b.tobytes()

    def test_predict_shape_mismatch(self):
        X, y, _ = pair_arrays()
        est = LocalizeRanker(epochs=1, stage2_epochs=0, batch_size=8, patch_size=12).fit(X, y)
        with pytest.raises(DataError):
            est.predict(np.zeros((1, 1, 28, 28)))

    def test_non_square_rejected(self):
        with pytest.raises(DataError, match="square"):
            LocalizeRanker(epochs=1).fit(np.zeros((1, 2, 1, 24, 20)), [1.0])
