"""Localizer, ranker and the weight-shared Siamese composition.

One branch maps an image to a scalar attribute strength ``v``:

1. the localizer convnet regresses ``theta = (s, t_x, t_y)``;
2. the image is warped through ``theta`` into a ``P x P`` patch;
3. the ranker convnet embeds the patch (and, in stage 2, a downscaled copy
   of the whole image, through the same weights);
4. a linear head maps the (concatenated) embedding to ``v``.

Both Siamese branches run on one :class:`ModelParams` instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError
from .spatial import (
    S_MAX,
    S_MIN,
    bilinear_sample,
    generate_grid,
    in_bounds,
    patch_center_px,
)

__all__ = [
    "Architecture",
    "ModelParams",
    "BranchOutput",
    "init_params",
    "promote_to_stage2",
    "localize",
    "score_branch",
    "siamese_forward",
    "STN_PREFIX",
    "RN_PREFIX",
]

STN_PREFIX = "stn."
RN_PREFIX = "rn."


@dataclass(frozen=True)
class Architecture:
    """Layer widths and input geometry; everything else is fixed by the layer recipe."""

    in_channels: int = 1
    input_size: int = 56
    patch_size: int = 32
    use_global: bool = False
    loc_channels: tuple[int, int, int] = (8, 16, 16)
    loc_hidden: int = 32
    rank_channels: tuple[int, int] = (8, 16)
    rank_hidden: int = 64

    @staticmethod
    def _after_block(size: int, kernel: int, what: str) -> int:
        size = size - kernel + 1
        if size < 2:
            raise ConfigurationError(f"{what}: feature map collapses to {size}x{size}")
        return size // 2

    def loc_flat(self) -> int:
        size = self._after_block(self.input_size, 3, "localizer conv1")
        size = self._after_block(size, 3, "localizer conv2")
        return self.loc_channels[2] * size * size

    def rank_flat(self) -> int:
        size = self._after_block(self.patch_size, 3, "ranker conv1")
        size = self._after_block(size, 3, "ranker conv2")
        return self.rank_channels[1] * size * size

    @property
    def score_inputs(self) -> int:
        return self.rank_hidden * (2 if self.use_global else 1)

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter path -> shape; doubles as the dry-run shape audit."""
        c1, c2, c3 = self.loc_channels
        r1, r2 = self.rank_channels
        return {
            "stn.conv1.weights": (c1, self.in_channels, 3, 3),
            "stn.conv1.bias": (c1,),
            "stn.conv2.weights": (c2, c1, 3, 3),
            "stn.conv2.bias": (c2,),
            "stn.conv3.weights": (c3, c2, 1, 1),
            "stn.conv3.bias": (c3,),
            "stn.fc1.weights": (self.loc_hidden, self.loc_flat()),
            "stn.fc1.bias": (self.loc_hidden,),
            "stn.theta.weights": (3, self.loc_hidden),
            "stn.theta.bias": (3,),
            "rn.conv1.weights": (r1, self.in_channels, 3, 3),
            "rn.conv1.bias": (r1,),
            "rn.conv2.weights": (r2, r1, 3, 3),
            "rn.conv2.bias": (r2,),
            "rn.fc1.weights": (self.rank_hidden, self.rank_flat()),
            "rn.fc1.bias": (self.rank_hidden,),
            "rn.score.weights": (1, self.score_inputs),
            "rn.score.bias": (1,),
        }


@dataclass
class ModelParams:
    """Named parameter tensors plus the architecture that shaped them."""

    arch: Architecture
    tensors: dict[str, Tensor]
    scale_grad_factor: float = 1.0

    def __post_init__(self):
        expected = self.arch.layer_shapes()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ConfigurationError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigurationError(f"{name}: shape {self.tensors[name].shape} != expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self.tensors.items()}

    def snapshot(self) -> "ModelParams":
        """Fresh leaf tensors sharing this model's arrays (for an independent graph)."""
        leaves = {}
        for k, t in self.tensors.items():
            leaf = Tensor(0.0, requires_grad=True)
            leaf.data = t.data
            leaves[k] = leaf
        return ModelParams(self.arch, leaves, self.scale_grad_factor)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self.tensors.items()},
            self.scale_grad_factor,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}


def _he(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_params(
    arch: Architecture,
    rng: np.random.Generator,
    s_init: float = 0.5,
    t_init_range: float = 0.3,
    scale_grad_factor: float = 1.0,
) -> ModelParams:
    """He-initialised convnets, with a theta head that starts at ``(s_init, t0)`` for every image."""
    if not S_MIN <= s_init <= S_MAX:
        raise ConfigurationError(f"s_init={s_init} outside [{S_MIN}, {S_MAX}]")
    tensors = {}
    for name, shape in arch.layer_shapes().items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        elif name == "rn.score.weights":
            data = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
        else:
            data = _he(rng, shape)
        tensors[name] = data
    tensors["stn.theta.weights"] = np.zeros(arch.layer_shapes()["stn.theta.weights"])
    t0 = rng.uniform(-t_init_range, t_init_range, size=2)
    tensors["stn.theta.bias"] = np.array([_inv_softplus(s_init), t0[0], t0[1]])
    return ModelParams(arch, {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}, scale_grad_factor)


def promote_to_stage2(stage1: ModelParams, rng: np.random.Generator, keep_ranker: bool = True) -> ModelParams:
    """Widen the score head for the global stream, carrying learned weights over.

    Localizer weights are always copied. With ``keep_ranker`` the ranker
    conv/fc stack is copied too; the score head is re-initialised because
    its input width doubles.
    """
    arch2 = Architecture(**{**stage1.arch.__dict__, "use_global": True})
    fresh = init_params(arch2, rng)
    tensors = {}
    for name, t in fresh.tensors.items():
        carry = name.startswith(STN_PREFIX) or (keep_ranker and not name.startswith("rn.score"))
        tensors[name] = Tensor(stage1[name].data.copy(), requires_grad=True) if carry else t
    return ModelParams(arch2, tensors, stage1.scale_grad_factor)


# -- forward passes ---------------------------------------------------------


def _batch(images) -> tuple[np.ndarray, bool]:
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ConfigurationError(f"images must be [C, H, W] or [N, C, H, W], got shape {x.shape}")


def _check_input(x: np.ndarray, arch: Architecture) -> None:
    if x.shape[1:] != (arch.in_channels, arch.input_size, arch.input_size):
        raise ConfigurationError(
            f"image shape {x.shape[1:]} does not match configured input "
            f"{(arch.in_channels, arch.input_size, arch.input_size)}"
        )


def _theta_from_raw(raw: Tensor, params: ModelParams) -> Tensor:
    """Positive, clamped scale; translation passes through unchanged."""
    s = ad.clip(ad.softplus(raw[:, 0:1]), S_MIN, S_MAX)
    theta = ad.concat(s, raw[:, 1:3])
    if params.scale_grad_factor != 1.0:
        theta = ad.grad_scale(theta, np.array([params.scale_grad_factor, 1.0, 1.0]))
    return theta


def _localize_batch(x: np.ndarray, params: ModelParams) -> Tensor:
    p = params
    h = ad.relu(ad.conv2d(Tensor(x), p["stn.conv1.weights"], p["stn.conv1.bias"]))
    h = ad.maxpool2d(h, 2)
    h = ad.relu(ad.conv2d(h, p["stn.conv2.weights"], p["stn.conv2.bias"]))
    h = ad.maxpool2d(h, 2)
    h = ad.relu(ad.conv2d(h, p["stn.conv3.weights"], p["stn.conv3.bias"]))
    h = ad.reshape(h, (x.shape[0], -1))
    h = ad.relu(ad.linear(h, p["stn.fc1.weights"], p["stn.fc1.bias"]))
    raw = ad.linear(h, p["stn.theta.weights"], p["stn.theta.bias"])
    return _theta_from_raw(raw, params)


def localize(images, params: ModelParams) -> Tensor:
    """Theta ``[3]`` (or ``[N, 3]`` for a batch) regressed by the localizer net."""
    x, batched = _batch(images)
    _check_input(x, params.arch)
    theta = _localize_batch(x, params)
    return theta if batched else theta[0]


def _rank_features(x: Tensor, params: ModelParams) -> Tensor:
    p = params
    h = ad.relu(ad.conv2d(x, p["rn.conv1.weights"], p["rn.conv1.bias"]))
    h = ad.maxpool2d(h, 2)
    h = ad.relu(ad.conv2d(h, p["rn.conv2.weights"], p["rn.conv2.bias"]))
    h = ad.maxpool2d(h, 2)
    h = ad.reshape(h, (x.shape[0], -1))
    return ad.relu(ad.linear(h, p["rn.fc1.weights"], p["rn.fc1.bias"]))


@dataclass
class BranchOutput:
    """Per-image results of one Siamese branch (batched along axis 0)."""

    v: Tensor
    theta: Tensor
    patch: Tensor
    center_px: Tensor
    in_bounds: np.ndarray
    grid: Tensor
    image_size: tuple[int, int] = field(default=(0, 0))

    def __len__(self) -> int:
        return self.v.shape[0]

    def select(self, key) -> "BranchOutput":
        return BranchOutput(
            self.v[key], self.theta[key], self.patch[key], self.center_px[key],
            self.in_bounds[key], self.grid[key], self.image_size,
        )


def score_branch(images, params: ModelParams, use_global: bool | None = None) -> BranchOutput:
    """Run one branch on an image ``[C, H, W]`` or batch ``[N, C, H, W]``.

    The returned fields are always batched; a single image gives ``N = 1``.
    """
    arch = params.arch
    if use_global is None:
        use_global = arch.use_global
    if use_global != arch.use_global:
        raise ConfigurationError(
            f"use_global={use_global} but the score head expects {arch.score_inputs} inputs"
        )
    x, _ = _batch(images)
    _check_input(x, arch)
    n, _, h, w = x.shape
    theta = _localize_batch(x, params)
    grid = generate_grid(theta, arch.patch_size, (w, h))
    patch = bilinear_sample(Tensor(x), grid)
    feat = _rank_features(patch, params)
    if use_global:
        ident = np.tile([1.0, 0.0, 0.0], (n, 1))
        small = bilinear_sample(Tensor(x), generate_grid(ident, arch.patch_size, (w, h)))
        feat = ad.concat(feat, _rank_features(small, params))
    v = ad.linear(feat, params["rn.score.weights"], params["rn.score.bias"])
    v = ad.reshape(v, (n,))
    center = patch_center_px(theta, (w, h))
    return BranchOutput(v, theta, patch, center, in_bounds(center, (w, h)), grid, (w, h))


def siamese_forward(images_1, images_2=None, params: ModelParams | None = None, use_global: bool | None = None):
    """Score both sides of a pair (or of a batch of pairs) with the shared weights.

    ``images_1`` may also be a ``ComparisonPair`` (anything with ``load()``),
    in which case ``images_2`` is omitted. Both sides are stacked into one
    batch so the graph is built once; the two halves are then split back out.
    """
    if hasattr(images_1, "load"):
        if params is None and isinstance(images_2, ModelParams):
            params = images_2
        images_1, images_2 = images_1.load()
    if images_2 is None or params is None:
        raise ConfigurationError("siamese_forward needs two image sets (or a pair) and params")
    x1, _ = _batch(images_1)
    x2, _ = _batch(images_2)
    if x1.shape != x2.shape:
        raise ConfigurationError(f"pair sides differ in shape: {x1.shape} vs {x2.shape}")
    n = x1.shape[0]
    both = score_branch(np.concatenate([x1, x2]), params, use_global)
    return both.select(slice(0, n)), both.select(slice(n, 2 * n))
