"""Multi-scale convolutional embedding network.

The network runs several independent branches over the same image: one at
full resolution and the rest over block-averaged copies (factors 2 and 4 by
default).  Each branch is a conv/relu/pool stack followed by a linear map
to its branch dimension and row-wise L2 normalization.  Branch outputs are
concatenated, passed through a final linear layer, and L2-normalized again
so embeddings always live on the unit sphere, where distances are
comparable.

Default sizing keeps an 8:2:1 ratio between the deep branch and the two
shallow ones (64:16:8 at desk scale with a 64-dim final embedding).
Dropout, when enabled, is applied to the merged branch vector during
training only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, FormatError

Array = np.ndarray

CHECKPOINT_MAGIC = b"MSNETCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    """One convolution layer: ``filters`` output channels, square
    ``kernel``, optional 2x2 max-pool after the activation."""

    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0
    pool_after: bool = False

    def __post_init__(self) -> None:
        if self.filters < 1 or self.kernel < 1 or self.stride < 1:
            raise ConfigError(f"conv spec fields must be positive: {self}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0: {self}")


@dataclass(frozen=True)
class BranchSpec:
    """One branch: a downsample factor (1 = full resolution), a conv stack,
    and the branch embedding width."""

    input_downsample_factor: int
    conv_layers: tuple[ConvSpec, ...]
    branch_embed_dim: int

    def __post_init__(self) -> None:
        if self.input_downsample_factor < 1:
            raise ConfigError(
                f"downsample factor must be >= 1, got "
                f"{self.input_downsample_factor}")
        if not self.conv_layers:
            raise ConfigError("branch needs at least one conv layer")
        if self.branch_embed_dim < 1:
            raise ConfigError(
                f"branch embed dim must be positive, got "
                f"{self.branch_embed_dim}")


@dataclass(frozen=True)
class MultiScaleNetConfig:
    branches: tuple[BranchSpec, ...]
    final_embed_dim: int
    input_shape: tuple[int, int, int]  # (C, H, W)
    dropout_rate: float = 0.25

    def __post_init__(self) -> None:
        if not self.branches:
            raise ConfigError("config needs at least one branch")
        if self.final_embed_dim < 1:
            raise ConfigError(
                f"final embed dim must be positive, got "
                f"{self.final_embed_dim}")
        full_res = [b for b in self.branches
                    if b.input_downsample_factor == 1]
        if len(full_res) != 1:
            raise ConfigError(
                f"exactly one branch must run at full resolution, "
                f"found {len(full_res)}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(
                f"dropout rate must be in [0, 1), got {self.dropout_rate}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"bad input shape {self.input_shape}")


def desk_scale_config(input_shape: tuple[int, int, int] = (1, 28, 28),
                      final_embed_dim: int = 64,
                      dropout_rate: float = 0.25) -> MultiScaleNetConfig:
    """Small three-branch default that trains in minutes on a CPU.

    Requires spatial dims divisible by 4 and at least 20 pixels.  Branch
    widths keep the 8:2:1 deep/shallow ratio of the full-size design.
    """
    c, h, w = input_shape
    if h % 4 or w % 4 or h < 20 or w < 20:
        raise ConfigError(
            f"desk-scale config needs H, W divisible by 4 and >= 20, "
            f"got {h}x{w}")
    deep = BranchSpec(1, (
        ConvSpec(8, 3, padding=1, pool_after=True),
        ConvSpec(16, 3, padding=1, pool_after=True),
        ConvSpec(32, 3),
        ConvSpec(32, 3),
    ), branch_embed_dim=final_embed_dim)
    mid = BranchSpec(2, (
        ConvSpec(8, 3, padding=1, pool_after=True),
        ConvSpec(16, 3),
    ), branch_embed_dim=max(1, final_embed_dim // 4))
    coarse = BranchSpec(4, (
        ConvSpec(8, 3),
        ConvSpec(16, 3),
    ), branch_embed_dim=max(1, final_embed_dim // 8))
    return MultiScaleNetConfig((deep, mid, coarse), final_embed_dim,
                               (c, h, w), dropout_rate)


@dataclass
class Checkpoint:
    """A config plus its learned parameters; the parameter names and shapes
    are exactly those generated from the config."""

    config: MultiScaleNetConfig
    parameters: dict[str, Array]
    rng_seed: int = 0
    epoch: int = 0


def _branch_shapes(branch: BranchSpec,
                   input_shape: tuple[int, int, int],
                   branch_idx: int) -> list[tuple[str, tuple[int, ...]]]:
    """Propagate shapes through one branch, returning (name, shape) pairs
    for its parameters.  Raises ConfigError on spatial underflow."""
    c, h, w = input_shape
    f = branch.input_downsample_factor
    if h % f or w % f:
        raise ConfigError(
            f"branch {branch_idx}: downsample factor {f} does not divide "
            f"input {h}x{w}")
    h, w = h // f, w // f
    names: list[tuple[str, tuple[int, ...]]] = []
    for li, conv in enumerate(branch.conv_layers):
        if conv.kernel > h + 2 * conv.padding or \
                conv.kernel > w + 2 * conv.padding:
            raise ConfigError(
                f"branch {branch_idx} conv {li}: kernel {conv.kernel} "
                f"exceeds padded input {h}x{w}")
        names.append((f"branch{branch_idx}.conv{li}.weight",
                      (conv.filters, c, conv.kernel, conv.kernel)))
        names.append((f"branch{branch_idx}.conv{li}.bias", (conv.filters,)))
        h = (h + 2 * conv.padding - conv.kernel) // conv.stride + 1
        w = (w + 2 * conv.padding - conv.kernel) // conv.stride + 1
        c = conv.filters
        if h < 1 or w < 1:
            raise ConfigError(
                f"branch {branch_idx} conv {li}: spatial size underflows "
                f"to {h}x{w}")
        if conv.pool_after:
            if h % 2 or w % 2:
                raise ConfigError(
                    f"branch {branch_idx} conv {li}: pool needs even dims, "
                    f"got {h}x{w}")
            h, w = h // 2, w // 2
    flat = c * h * w
    names.append((f"branch{branch_idx}.fc.weight",
                  (flat, branch.branch_embed_dim)))
    names.append((f"branch{branch_idx}.fc.bias",
                  (branch.branch_embed_dim,)))
    return names


def parameter_shapes(config: MultiScaleNetConfig,
                     ) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list of every parameter the config implies."""
    names: list[tuple[str, tuple[int, ...]]] = []
    for bi, branch in enumerate(config.branches):
        names.extend(_branch_shapes(branch, config.input_shape, bi))
    merged = sum(b.branch_embed_dim for b in config.branches)
    names.append(("head.weight", (merged, config.final_embed_dim)))
    names.append(("head.bias", (config.final_embed_dim,)))
    return names


def build_network(config: MultiScaleNetConfig, seed: int,
                  dtype: np.dtype = np.float32) -> Checkpoint:
    """Initialize parameters deterministically from ``seed``.

    Weights are He-scaled normals (std ``sqrt(2 / fan_in)``); biases start
    at zero.  ``dtype`` is float32 for training, float64 when the network
    feeds a gradient check.
    """
    shapes = parameter_shapes(config)  # validates the config
    rng = np.random.default_rng(seed)
    params: dict[str, Array] = {}
    for name, shape in shapes:
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) == 2 \
                else int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return Checkpoint(config, params, rng_seed=seed, epoch=0)


BackwardFn = Callable[[Array], dict[str, Array]]


def _run_branch(branch: BranchSpec, bi: int, params: dict[str, Array],
                x: Array, tape: list | None) -> Array:
    """Forward one branch; if ``tape`` is given, append (grad_fn, names)
    entries whose grad_fn maps upstream -> (dinput, *dparams)."""
    h = x
    if branch.input_downsample_factor > 1:
        r = ops.downsample_avg(h, branch.input_downsample_factor)
        if tape is not None:
            tape.append((r.grad, ()))
        h = r.output
    for li, conv in enumerate(branch.conv_layers):
        wname = f"branch{bi}.conv{li}.weight"
        bname = f"branch{bi}.conv{li}.bias"
        r = ops.conv2d(h, params[wname], params[bname], conv.stride,
                       conv.padding)
        if tape is not None:
            tape.append((r.grad, (wname, bname)))
        h = r.output
        r = ops.relu(h)
        if tape is not None:
            tape.append((r.grad, ()))
        h = r.output
        if conv.pool_after:
            r = ops.maxpool2x2(h)
            if tape is not None:
                tape.append((r.grad, ()))
            h = r.output
    spatial_shape = h.shape
    h = h.reshape(h.shape[0], -1)
    if tape is not None:
        tape.append((lambda u, s=spatial_shape: (u.reshape(s),), ()))
    r = ops.affine(h, params[f"branch{bi}.fc.weight"],
                   params[f"branch{bi}.fc.bias"])
    if tape is not None:
        tape.append((r.grad, (f"branch{bi}.fc.weight",
                              f"branch{bi}.fc.bias")))
    h = r.output
    r = ops.l2_normalize(h)
    if tape is not None:
        tape.append((r.grad, ()))
    return r.output


def _backward_chain(tape: list, upstream: Array,
                    grads: dict[str, Array]) -> Array:
    """Walk a branch tape in reverse, accumulating parameter gradients and
    returning the gradient w.r.t. the chain input."""
    for grad_fn, names in reversed(tape):
        results = grad_fn(upstream)
        upstream = results[0]
        for offset, name in enumerate(names, start=1):
            grads[name] = grads.get(name, 0) + results[offset]
    return upstream


def embed_with_grad(checkpoint: Checkpoint, images: Array,
                    training: bool = False,
                    rng: np.random.Generator | None = None,
                    ) -> tuple[Array, BackwardFn]:
    """Embed ``images (N,C,H,W)`` and return a backward closure mapping the
    upstream embedding gradient to gradients per parameter name."""
    config = checkpoint.config
    params = checkpoint.parameters
    if images.ndim != 4 or images.shape[1:] != config.input_shape:
        raise DimensionError(
            f"images of shape {images.shape} do not match configured "
            f"input {config.input_shape}")
    dtype = next(iter(params.values())).dtype
    x = np.ascontiguousarray(images, dtype=dtype)

    branch_tapes: list[list] = []
    branch_outputs: list[Array] = []
    for bi, branch in enumerate(config.branches):
        tape: list = []
        branch_outputs.append(_run_branch(branch, bi, params, x, tape))
        branch_tapes.append(tape)

    head_tape: list = []
    r = ops.concat(branch_outputs)
    concat_grad = r.grad
    merged = r.output
    if training and config.dropout_rate > 0:
        if rng is None:
            rng = np.random.default_rng(checkpoint.rng_seed)
        r = ops.dropout(merged, config.dropout_rate, rng, training=True)
        head_tape.append((r.grad, ()))
        merged = r.output
    r = ops.affine(merged, params["head.weight"], params["head.bias"])
    head_tape.append((r.grad, ("head.weight", "head.bias")))
    r2 = ops.l2_normalize(r.output)
    head_tape.append((r2.grad, ()))
    out = r2.output

    def backward(upstream: Array) -> dict[str, Array]:
        grads: dict[str, Array] = {}
        u = _backward_chain(head_tape, upstream, grads)
        branch_upstreams = concat_grad(u)
        for tape, bu in zip(branch_tapes, branch_upstreams):
            _backward_chain(tape, bu, grads)
        return grads

    return out, backward


def embed(checkpoint: Checkpoint, images: Array, training: bool = False,
          rng: np.random.Generator | None = None,
          chunk_size: int = 256) -> Array:
    """Embed ``images (N,C,H,W)`` into unit-norm rows of the final dim.

    Inference is deterministic: repeated calls with the same checkpoint and
    input agree bitwise.  ``training=True`` additionally applies dropout
    using ``rng``.
    """
    if images.ndim != 4:
        raise DimensionError(f"images must be 4-d, got {images.ndim}-d")
    outputs = []
    for start in range(0, images.shape[0], chunk_size):
        chunk = images[start:start + chunk_size]
        out, _ = embed_with_grad(checkpoint, chunk, training=training,
                                 rng=rng)
        outputs.append(out)
    return np.concatenate(outputs, axis=0)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def _config_to_dict(config: MultiScaleNetConfig) -> dict:
    return {
        "branches": [
            {
                "input_downsample_factor": b.input_downsample_factor,
                "conv_layers": [
                    {"filters": c.filters, "kernel": c.kernel,
                     "stride": c.stride, "padding": c.padding,
                     "pool_after": c.pool_after}
                    for c in b.conv_layers
                ],
                "branch_embed_dim": b.branch_embed_dim,
            }
            for b in config.branches
        ],
        "final_embed_dim": config.final_embed_dim,
        "input_shape": list(config.input_shape),
        "dropout_rate": config.dropout_rate,
    }


def _config_from_dict(doc: dict) -> MultiScaleNetConfig:
    branches = tuple(
        BranchSpec(
            b["input_downsample_factor"],
            tuple(ConvSpec(c["filters"], c["kernel"], c["stride"],
                           c["padding"], c["pool_after"])
                  for c in b["conv_layers"]),
            b["branch_embed_dim"],
        )
        for b in doc["branches"])
    return MultiScaleNetConfig(branches, doc["final_embed_dim"],
                               tuple(doc["input_shape"]),
                               doc["dropout_rate"])


def save_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    """Write the checkpoint; parameters are stored as little-endian
    float32, so a float32 checkpoint round-trips bit-exactly."""
    header = _canonical_json({
        "config": _config_to_dict(checkpoint.config),
        "rng_seed": checkpoint.rng_seed,
        "epoch": checkpoint.epoch,
    })
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", len(checkpoint.parameters)))
        for name, value in checkpoint.parameters.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(
            f"checkpoint truncated while reading {what} "
            f"({len(data)}/{n} bytes)")
    return data


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint and validate it against its own config."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack(
            "<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header"))
            config = _config_from_dict(header["config"])
        except (KeyError, TypeError, ValueError, ConfigError) as exc:
            raise FormatError(f"bad checkpoint header: {exc}") from exc
        (count,) = struct.unpack(
            "<Q", _read_exact(fh, 8, "parameter count"))
        params: dict[str, Array] = {}
        for i in range(count):
            (name_len,) = struct.unpack(
                "<H", _read_exact(fh, 2, f"name length of block {i}"))
            name = _read_exact(fh, name_len, f"name of block {i}").decode(
                "utf-8")
            (rank,) = struct.unpack(
                "<I", _read_exact(fh, 4, f"rank of block {i}"))
            shape = struct.unpack(
                f"<{rank}Q", _read_exact(fh, 8 * rank, f"dims of block {i}"))
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * size, f"data of block {i}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(
                shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after final parameter block")

    expected = dict(parameter_shapes(config))
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise FormatError(
            f"parameter names do not match config (missing {missing}, "
            f"unexpected {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise FormatError(
                f"parameter {name!r} has shape {params[name].shape}, "
                f"config implies {shape}")
    return Checkpoint(config, params, rng_seed=header["rng_seed"],
                      epoch=header["epoch"])
