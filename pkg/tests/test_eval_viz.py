import numpy as np
import pytest

from locrank.config import RunConfig
from locrank.data import PairDataset, SyntheticSample, gen_synthetic
from locrank.evaluation import (
    EvalReport,
    accuracy_from_scores,
    center_errors,
    eq_accuracy_from_scores,
    eval_pairs,
    localization_error,
)
from locrank.errors import UsageError
from locrank.model import init_params, score_branch
from locrank.netpbm import read_image
from locrank.spatial import grid_bbox
from locrank.train import architecture_for, score_images
from locrank.viz import draw_box, emit_heatmap, emit_ranked_strip, heatmap_density, hot_ramp


def small_config(**kw):
    return RunConfig(**{**dict(image_size=24, crop_size=20, patch_size=12), **kw})


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy_from_scores([3.0, 2.0, 1.0], [[0, 1], [1, 2], [0, 2]]) == 1.0

    def test_three_of_four(self):
        assert accuracy_from_scores([3.0, 2.0, 1.0, 5.0], [[0, 1], [1, 2], [0, 2], [0, 3]]) == 0.75

    def test_tie_is_wrong(self):
        assert accuracy_from_scores([1.0, 1.0], [[0, 1]]) == 0.0

    def test_eq_accuracy(self):
        assert eq_accuracy_from_scores([1.0, 1.05, 2.0], [[0, 1], [0, 2]], tau=0.1) == 0.5

    def test_brute_force_recount_and_order_invariance(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=30)
        scores[5] = scores[6]
        index = rng.integers(0, 30, (200, 2))
        index[0] = [5, 6]
        count = 0
        for a, b in index:
            count += 1 if scores[a] > scores[b] else 0
        assert accuracy_from_scores(scores, index) == count / len(index)
        perm = rng.permutation(len(index))
        assert accuracy_from_scores(scores, index[perm]) == count / len(index)


class TestEvalPairs:
    def setup_dataset(self):
        config = small_config()
        samples = gen_synthetic(8, (24, 24), seed=0)
        images = np.stack([s.image for s in samples])
        index = np.array([[0, 1], [2, 3], [4, 5], [6, 7], [1, 2], [3, 0]])
        labels = np.array([1.0, 1.0, 1.0, 1.0, 0.5, 0.5])
        params = init_params(architecture_for(config), np.random.default_rng(1))
        params["stn.theta.weights"].data[:] = np.random.default_rng(2).normal(0, 0.3, (3, 32))
        return config, samples, PairDataset(images, index, labels), params

    def test_report_matches_recount(self, capsys):
        config, samples, ds, params = self.setup_dataset()
        report = eval_pairs(ds, params, config, samples=samples)
        assert "ms per image" in capsys.readouterr().out
        scores = score_images(ds.images, params, config)
        q = ds.labels == 1.0
        assert report.accuracy_q == np.mean(scores[ds.index[q, 0]] > scores[ds.index[q, 1]])
        assert report.n_pairs_q == 4 and report.n_pairs_e == 2
        assert report.eq_tau == pytest.approx(0.1 * np.std(scores))
        assert 0 <= report.accuracy_e <= 1
        assert report.seconds_per_image > 0

    def test_order_invariance(self):
        config, samples, ds, params = self.setup_dataset()
        a = eval_pairs(ds, params, config, verbose=False)
        perm = np.random.default_rng(3).permutation(len(ds))
        b = eval_pairs(ds.subset(perm), params, config, verbose=False)
        assert a.accuracy_q == b.accuracy_q and a.accuracy_e == b.accuracy_e

    def test_report_text(self, tmp_path):
        report = EvalReport(n_pairs_q=4, n_pairs_e=0, accuracy_q=0.75)
        report.write(tmp_path / "r.txt")
        text = (tmp_path / "r.txt").read_text()
        assert "accuracy_q = 0.75" in text and "accuracy_e = nan" in text


class TestLocalization:
    def test_hand_distance(self):
        assert center_errors([[48.0, 32.0]], [[32.0, 32.0]])[0] == 16.0

    def test_exact_center_is_zero(self):
        config = small_config(crop_size=24)
        params = init_params(architecture_for(config), np.random.default_rng(0), t_init_range=0.0)
        s = SyntheticSample(np.zeros((1, 24, 24)), 0.5, (11.5, 11.5), 2.0)
        assert localization_error([s, s], params, config) == 0.0

    def test_shifted_prediction(self):
        # crop == image, theta = (0.5, 1, 0): center at 0.5 * 23 * 1.5 = 17.25 on x
        config = small_config(crop_size=24)
        params = init_params(architecture_for(config), np.random.default_rng(0), s_init=0.5, t_init_range=0.0)
        params["stn.theta.bias"].data[1] = 1.0
        s = SyntheticSample(np.zeros((1, 24, 24)), 0.5, (11.5, 11.5), 2.0)
        assert localization_error([s], params, config) == pytest.approx(23 * 0.75 - 11.5, abs=1e-12)

    def test_untrained_error_sanity_bound(self):
        config = RunConfig()
        params = init_params(architecture_for(config), np.random.default_rng(0))
        samples = gen_synthetic(60, (64, 64), position_mode="uniform", seed=1)
        err = localization_error(samples, params, config)
        rng = np.random.default_rng(2)
        margin = 9.0
        a = rng.uniform(margin, 63 - margin, (20000, 2))
        b = rng.uniform(margin, 63 - margin, (20000, 2))
        mc = np.linalg.norm(a - b, axis=1).mean()
        # a near-central guess beats a random one but stays the same order
        assert 0.4 * mc < err < 1.2 * mc


class TestHeatmap:
    def test_single_peak(self):
        d = heatmap_density(np.tile([[10.0, 5.0]], (50, 1)), (20, 16))
        assert np.unravel_index(np.argmax(d), d.shape) == (5, 10) and d.max() == 1.0
        assert (d == 1.0).sum() == 1

    def test_uniform_is_flat(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-0.5, 19.5, (200000, 2))
        d = heatmap_density(pts, (20, 20), sigma=1.5)
        assert d.max() / d.min() < 1.3

    def test_ramp_endpoints(self):
        np.testing.assert_array_equal(hot_ramp(np.array([0.0, 1.0])), [[0, 1], [0, 1], [0, 1]])

    def test_files_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        logs = [rng.uniform(0, 23, (30, 2)) for _ in range(3)]
        bg = rng.random((1, 24, 24))
        a = emit_heatmap(logs, (24, 24), tmp_path / "a", background=bg)
        b = emit_heatmap(logs, (24, 24), tmp_path / "b", background=bg)
        assert [p.name for p in a] == ["heatmap_epoch0001.ppm", "heatmap_epoch0002.ppm", "heatmap_epoch0003.ppm"]
        for x, y in zip(a, b):
            assert x.read_bytes() == y.read_bytes()
        assert read_image(a[0]).shape == (3, 24, 24)

    def test_unknown_epoch(self, tmp_path):
        with pytest.raises(UsageError):
            emit_heatmap({1: np.zeros((2, 2))}, (8, 8), tmp_path, epochs=[5])


class TestStrip:
    def params(self, config):
        params = init_params(architecture_for(config), np.random.default_rng(0))
        params["stn.theta.weights"].data[:] = np.random.default_rng(1).normal(0, 0.3, (3, 32))
        return params

    def test_single_tile(self, tmp_path):
        config = small_config()
        images = [s.image for s in gen_synthetic(5, (24, 24), seed=0)]
        picks, scores = emit_ranked_strip(images, self.params(config), 1, tmp_path / "s.ppm", config)
        assert len(picks) == 1
        assert read_image(tmp_path / "s.ppm").shape == (3, 24, 24)

    def test_order_and_width(self, tmp_path):
        config = small_config()
        images = [s.image for s in gen_synthetic(9, (24, 24), seed=0)]
        picks, scores = emit_ranked_strip(images, self.params(config), 4, tmp_path / "s.ppm", config)
        assert np.all(np.diff(scores[picks]) >= 0)
        assert picks[0] == np.argmin(scores) and picks[-1] == np.argmax(scores)
        assert read_image(tmp_path / "s.ppm").shape == (3, 24, 96)

    def test_box_is_grid_bbox(self, tmp_path):
        config = small_config()
        params = self.params(config)
        img = np.zeros((1, 24, 24))
        emit_ranked_strip([img], params, 1, tmp_path / "s.ppm", config)
        strip = read_image(tmp_path / "s.ppm")
        out = score_branch(img[:, 2:22, 2:22], params)
        x0, y0, x1, y1 = np.rint(np.asarray(grid_bbox(out.grid.data)[0]) + 2).astype(int)
        red = (strip[0] == 1.0) & (strip[1] == 0.0)
        ys, xs = np.nonzero(red)
        assert (xs.min(), ys.min(), xs.max(), ys.max()) == (max(x0, 0), max(y0, 0), min(x1, 23), min(y1, 23))

    def test_k_out_of_range(self, tmp_path):
        config = small_config()
        with pytest.raises(UsageError):
            emit_ranked_strip([np.zeros((1, 24, 24))], self.params(config), 2, tmp_path / "s.ppm", config)

    def test_draw_box_pixels(self):
        out = draw_box(np.zeros((1, 6, 6)), (1, 1, 4, 3))
        red = out[0] == 1.0
        assert red[1, 1:5].all() and red[3, 1:5].all() and red[1:4, 1].all() and red[1:4, 4].all()
        assert not red[2, 2:4].any()
