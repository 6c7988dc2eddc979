"""Binary checkpoint format.

Layout (all integers u32 little-endian)::

    b"LRK1"  version  len(config) config-utf8  n_tensors
    n_tensors x [ len(name) name-utf8  rank  dims...  float64-LE payload ]

Parameters are stored as ``param/<path>``, optimizer velocities as
``velocity/<path>``. The config block is the ``key = value`` text of the
:class:`~locrank.config.RunConfig` in effect when the file was written.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import RunConfig
from .errors import CheckpointError, ConfigurationError
from .model import Architecture, ModelParams
from .optim import OptimState, make_optim_state

__all__ = ["MAGIC", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint", "architecture_from_shapes"]

MAGIC = b"LRK1"
FORMAT_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, params: ModelParams, state: OptimState | None, config: RunConfig) -> Path:
    path = Path(path)
    tensors = [(f"param/{k}", t.data) for k, t in params.tensors.items()]
    if state is not None:
        tensors += [(f"velocity/{k}", v) for k, v in state.velocity.items()]
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(config.to_text()), struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{self.source}: corrupt string at byte {self.pos}") from None


def architecture_from_shapes(shapes: dict[str, tuple[int, ...]], input_size: int, patch_size: int) -> Architecture:
    try:
        c1, in_ch = shapes["stn.conv1.weights"][:2]
        arch = Architecture(
            in_channels=in_ch,
            input_size=input_size,
            patch_size=patch_size,
            loc_channels=(c1, shapes["stn.conv2.weights"][0], shapes["stn.conv3.weights"][0]),
            loc_hidden=shapes["stn.fc1.weights"][0],
            rank_channels=(shapes["rn.conv1.weights"][0], shapes["rn.conv2.weights"][0]),
            rank_hidden=shapes["rn.fc1.weights"][0],
            use_global=shapes["rn.score.weights"][1] == 2 * shapes["rn.fc1.weights"][0],
        )
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks parameter {exc.args[0]}") from None
    return arch


def load_checkpoint(path, expected_arch: Architecture | None = None):
    """Return ``(params, optim_state, config)`` from a checkpoint file."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    r = _Reader(buf, str(path))
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}; not a version-{FORMAT_VERSION} checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    try:
        config = RunConfig.from_text(r.string(), f"{path}[config]")
    except ConfigurationError as exc:
        raise CheckpointError(f"{path}: invalid embedded config: {exc}") from None
    params, velocity = {}, {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        group, _, key = name.partition("/")
        if group == "param":
            params[key] = arr
        elif group == "velocity":
            velocity[key] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor group in {name!r}")
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after last tensor")

    shapes = {k: v.shape for k, v in params.items()}
    arch = architecture_from_shapes(shapes, config.crop_size, config.patch_size)
    if expected_arch is not None and expected_arch != arch:
        raise CheckpointError(f"{path}: architecture {arch} does not match requested {expected_arch}")
    try:
        model = ModelParams(
            arch, {k: Tensor(v, requires_grad=True) for k, v in params.items()}, config.scale_lr_factor
        )
    except ConfigurationError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    state = make_optim_state(config)
    state.velocity = velocity
    return model, state, config
