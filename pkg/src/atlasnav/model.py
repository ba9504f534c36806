"""Residual coordinate regressor: forward pass, manual backprop, serialization.

Architecture: a dense input projection to a fixed processing width (240),
followed by 8 residual blocks of two dense layers each (16 hidden layers
total, ReLU inside each block, identity skip), and a 3-wide linear head.
The head emits either normalized atlas coordinates or a world-mm
displacement, declared by ``output_mode``.

No normalization layers: inputs are window-normalized to [0, 1] already, and
a norm-free network keeps single-query inference deterministic and cheap.

Parameters are stored as float32 (the on-disk representation, making the
save/load round trip bit-exact). Training and gradient checks run on float64
copies obtained via ``RegressorParams.astype``; ``forward``/``backward``
compute in the dtype of the arrays they are given.

Initialization (``init``) draws He-uniform weights from the splitmix64-seeded
xoshiro256** stream in :mod:`atlasnav.rng`, consuming one contiguous span per
matrix in declaration order: input projection, then each block's W1 and W2.
Biases and the whole head start at zero, so an untrained network predicts
exactly (0, 0, 0), the atlas reference point.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .rng import Xoshiro256StarStar

OUTPUT_ATLAS_COORD = "atlas_coord"
OUTPUT_DISPLACEMENT_MM = "displacement_mm"
OUTPUT_MODES = (OUTPUT_ATLAS_COORD, OUTPUT_DISPLACEMENT_MM)

_MAGIC = b"BGPS"
_VERSION = 1

DEFAULT_INPUT_LEN = 7290
WIDTH = 240
N_BLOCKS = 8


class ShapeMismatchError(ValueError):
    """Descriptor length does not match the model's input projection."""


class ModelFormatError(ValueError):
    """Model file has a bad magic, version, or truncated payload."""


class IncompatibleModelError(ValueError):
    """Model was trained for a different descriptor layout or output mode."""


@dataclass(frozen=True)
class BlockParams:
    w1: np.ndarray  # (width, width)
    b1: np.ndarray  # (width,)
    w2: np.ndarray  # (width, width)
    b2: np.ndarray  # (width,)


@dataclass(frozen=True)
class RegressorParams:
    input_w: np.ndarray                 # (width, input_len)
    input_b: np.ndarray                 # (width,)
    blocks: tuple[BlockParams, ...]
    head_w: np.ndarray                  # (3, width)
    head_b: np.ndarray                  # (3,)
    layout_hash: int
    output_mode: str

    @property
    def input_len(self) -> int:
        return self.input_w.shape[1]

    @property
    def width(self) -> int:
        return self.input_w.shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.input_w.dtype

    def arrays(self) -> list[np.ndarray]:
        """All weight arrays in serialization order."""
        out = [self.input_w, self.input_b]
        for blk in self.blocks:
            out += [blk.w1, blk.b1, blk.w2, blk.b2]
        out += [self.head_w, self.head_b]
        return out

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())

    def astype(self, dtype) -> "RegressorParams":
        dt = np.dtype(dtype)
        return replace(
            self,
            input_w=self.input_w.astype(dt), input_b=self.input_b.astype(dt),
            blocks=tuple(BlockParams(b.w1.astype(dt), b.b1.astype(dt),
                                     b.w2.astype(dt), b.b2.astype(dt))
                         for b in self.blocks),
            head_w=self.head_w.astype(dt), head_b=self.head_b.astype(dt))


def param_count(input_len: int = DEFAULT_INPUT_LEN, width: int = WIDTH,
                n_blocks: int = N_BLOCKS) -> int:
    """Closed-form parameter count for the architecture."""
    return (width * input_len + width
            + n_blocks * 2 * (width * width + width)
            + 3 * width + 3)


def init(seed: int, input_len: int = DEFAULT_INPUT_LEN, width: int = WIDTH,
         n_blocks: int = N_BLOCKS, layout_hash: int = 0,
         output_mode: str = OUTPUT_ATLAS_COORD) -> RegressorParams:
    """He-uniform weights, zero biases, zero head; bit-reproducible per seed."""
    if output_mode not in OUTPUT_MODES:
        raise ValueError(f"output_mode must be one of {OUTPUT_MODES}, got {output_mode!r}")
    gen = Xoshiro256StarStar(seed)
    f32 = np.float32
    input_w = gen.he_uniform(input_len, width * input_len).astype(f32).reshape(width, input_len)
    blocks = []
    for _ in range(n_blocks):
        w1 = gen.he_uniform(width, width * width).astype(f32).reshape(width, width)
        w2 = gen.he_uniform(width, width * width).astype(f32).reshape(width, width)
        blocks.append(BlockParams(w1=w1, b1=np.zeros(width, f32),
                                  w2=w2, b2=np.zeros(width, f32)))
    return RegressorParams(
        input_w=input_w, input_b=np.zeros(width, f32),
        blocks=tuple(blocks),
        head_w=np.zeros((3, width), f32), head_b=np.zeros(3, f32),
        layout_hash=layout_hash, output_mode=output_mode)


def _check_input(params: RegressorParams, n_features: int):
    if n_features != params.input_len:
        raise ShapeMismatchError(
            f"descriptor length {n_features} does not match model input "
            f"length {params.input_len}")


def forward(params: RegressorParams, d: np.ndarray) -> np.ndarray:
    """Network output for one descriptor; computes in the params' dtype."""
    d = np.asarray(d, dtype=params.dtype)
    _check_input(params, d.shape[-1])
    h = params.input_w @ d
    h += params.input_b
    np.maximum(h, 0, out=h)
    for blk in params.blocks:
        z = blk.w1 @ h
        z += blk.b1
        np.maximum(z, 0, out=z)
        h = h + blk.w2 @ z + blk.b2
    return params.head_w @ h + params.head_b


def forward_batch(params: RegressorParams, x: np.ndarray) -> np.ndarray:
    """Network outputs for an (n, input_len) batch; returns (n, 3)."""
    x = np.asarray(x, dtype=params.dtype)
    _check_input(params, x.shape[1])
    h = x @ params.input_w.T
    h += params.input_b
    np.maximum(h, 0, out=h)
    for blk in params.blocks:
        z = h @ blk.w1.T
        z += blk.b1
        np.maximum(z, 0, out=z)
        h = h + z @ blk.w2.T + blk.b2
    return h @ params.head_w.T + params.head_b


@dataclass
class ForwardTrace:
    """Intermediate activations cached for reverse-mode accumulation."""

    x: np.ndarray                 # (n, input_len) input batch
    h0: np.ndarray                # (n, width) post-ReLU projection
    block_in: list[np.ndarray]    # input of each block
    block_act: list[np.ndarray]   # post-ReLU inner activation of each block
    h_final: np.ndarray           # (n, width) head input
    pred: np.ndarray              # (n, 3)


def _forward_trace(params: RegressorParams, x: np.ndarray) -> ForwardTrace:
    h = np.maximum(x @ params.input_w.T + params.input_b, 0)
    h0 = h
    block_in, block_act = [], []
    for blk in params.blocks:
        block_in.append(h)
        a = np.maximum(h @ blk.w1.T + blk.b1, 0)
        block_act.append(a)
        h = h + a @ blk.w2.T + blk.b2
    pred = h @ params.head_w.T + params.head_b
    return ForwardTrace(x=x, h0=h0, block_in=block_in, block_act=block_act,
                        h_final=h, pred=pred)


def backward(params: RegressorParams, x: np.ndarray, y: np.ndarray,
             eps: float = 1e-8) -> tuple[RegressorParams, float]:
    """Exact batch-loss gradients via reverse-mode accumulation.

    Loss is log(MSE + eps) with MSE the mean squared coordinate error over
    the batch. Computation is float64 regardless of the params' storage
    dtype. Returns (gradients shaped like params, loss value).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    _check_input(params, x.shape[1])
    p64 = params if params.dtype == np.float64 else params.astype(np.float64)
    n = x.shape[0]

    tr = _forward_trace(p64, x)
    resid = tr.pred - y
    mse = float(np.mean(np.sum(resid * resid, axis=1)))
    loss = float(np.log(mse + eps))

    dpred = (2.0 / (n * (mse + eps))) * resid
    dhead_w = dpred.T @ tr.h_final
    dhead_b = dpred.sum(axis=0)
    dh = dpred @ p64.head_w

    dblocks = [None] * len(p64.blocks)
    for bi in range(len(p64.blocks) - 1, -1, -1):
        blk = p64.blocks[bi]
        h_in, a = tr.block_in[bi], tr.block_act[bi]
        dw2 = dh.T @ a
        db2 = dh.sum(axis=0)
        dz = (dh @ blk.w2) * (a > 0)
        dw1 = dz.T @ h_in
        db1 = dz.sum(axis=0)
        dblocks[bi] = BlockParams(w1=dw1, b1=db1, w2=dw2, b2=db2)
        dh = dh + dz @ blk.w1

    dz0 = dh * (tr.h0 > 0)
    dinput_w = dz0.T @ x
    dinput_b = dz0.sum(axis=0)

    grads = RegressorParams(
        input_w=dinput_w, input_b=dinput_b, blocks=tuple(dblocks),
        head_w=dhead_w, head_b=dhead_b,
        layout_hash=params.layout_hash, output_mode=params.output_mode)
    return grads, loss


_MODE_CODES = {OUTPUT_ATLAS_COORD: 0, OUTPUT_DISPLACEMENT_MM: 1}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}
_HEADER = struct.Struct("<4sIQBIII")


def save_params(params: RegressorParams, path: str) -> None:
    """Write the model file: header + float32 little-endian weights."""
    header = _HEADER.pack(_MAGIC, _VERSION, params.layout_hash,
                          _MODE_CODES[params.output_mode],
                          params.input_len, params.width, len(params.blocks))
    with open(path, "wb") as f:
        f.write(header)
        for arr in params.arrays():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path: str, layout=None, expect_output_mode: str | None = None
                ) -> RegressorParams:
    """Read a model file back as float32 params.

    When a DescriptorLayout is supplied, its fingerprint must match the
    file's layout hash; when expect_output_mode is supplied, the declared
    mode must match. Either mismatch raises IncompatibleModelError.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ModelFormatError(f"{path}: file too short for a model header")
    magic, version, layout_hash, mode_code, input_len, width, n_blocks = \
        _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    if mode_code not in _CODE_MODES:
        raise ModelFormatError(f"{path}: unknown output mode code {mode_code}")
    mode = _CODE_MODES[mode_code]

    n_weights = param_count(input_len, width, n_blocks)
    expected = _HEADER.size + 4 * n_weights
    if len(raw) != expected:
        raise ModelFormatError(
            f"{path}: expected {expected} bytes for declared architecture, "
            f"got {len(raw)}")

    vals = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        arr = vals[pos:pos + size].reshape(shape).astype(np.float32)
        pos += size
        return arr

    input_w = take((width, input_len))
    input_b = take((width,))
    blocks = []
    for _ in range(n_blocks):
        w1 = take((width, width))
        b1 = take((width,))
        w2 = take((width, width))
        b2 = take((width,))
        blocks.append(BlockParams(w1, b1, w2, b2))
    head_w = take((3, width))
    head_b = take((3,))

    params = RegressorParams(
        input_w=input_w, input_b=input_b, blocks=tuple(blocks),
        head_w=head_w, head_b=head_b,
        layout_hash=layout_hash, output_mode=mode)
    if layout is not None and layout.fingerprint() != layout_hash:
        raise IncompatibleModelError(
            f"{path}: model layout hash {layout_hash:#018x} does not match "
            f"the supplied layout {layout.fingerprint():#018x}")
    if expect_output_mode is not None and mode != expect_output_mode:
        raise IncompatibleModelError(
            f"{path}: model output mode is {mode!r}, expected {expect_output_mode!r}")
    return params
