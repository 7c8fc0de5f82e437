"""Dense tensor kernels with reproducible arithmetic.

Tensors are plain numpy arrays restricted to the dtypes below.  The
matrix kernels accumulate in fp32 with a fixed sequential order, so two
executions of the same graph produce bit-identical floats; downstream
pass-correctness checks rely on this.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, RangeError, ShapeError

DTYPES = {
    "fp32": np.float32,
    "i8": np.int8,
    "i16": np.int16,
    "i32": np.int32,
}
DTYPE_CODES = {"fp32": 0, "i8": 1, "i16": 2, "i32": 3}
_CODE_TO_DTYPE = {v: k for k, v in DTYPE_CODES.items()}

PSNR_CAP_DB = 99.0


def dtype_name(arr: np.ndarray) -> str:
    for name, np_dtype in DTYPES.items():
        if arr.dtype == np_dtype:
            return name
    raise ShapeError(f"unsupported dtype {arr.dtype}")


def itemsize(name: str) -> int:
    return np.dtype(DTYPES[name]).itemsize


def _require_fp32(*arrays: np.ndarray) -> None:
    for a in arrays:
        if a.dtype != np.float32:
            raise ShapeError(f"expected fp32 tensor, got {a.dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with sequential fp32 accumulation.

    Each output element accumulates its k products in ascending-k order,
    matching a naive triple loop bit-for-bit.
    """
    _require_fp32(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for kk in range(k):
        out += a[:, kk, None] * b[None, kk, :]
    return out


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    """Per-element add or mul over identically shaped fp32 tensors."""
    _require_fp32(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return a + b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """relu or silu, elementwise."""
    _require_fp32(x)
    if kind == "relu":
        return np.maximum(x, np.float32(0.0))
    if kind == "silu":
        return (x * sigmoid(x)).astype(np.float32)
    raise ValueError(f"unknown activation {kind!r}")


def conv2d(x: np.ndarray, w: np.ndarray, stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    """NCHW convolution, zero padding, no dilation.

    Accumulation order per output element: input channel, then kernel
    row, then kernel column; sequential like the matmul kernel.
    """
    _require_fp32(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D operands, got {x.shape} and {w.shape}")
    n, cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wid + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d output would be empty")
    xp = np.zeros((n, cin, h + 2 * ph, wid + 2 * pw), dtype=np.float32)
    xp[:, :, ph:ph + h, pw:pw + wid] = x
    out = np.zeros((n, cout, oh, ow), dtype=np.float32)
    for ci in range(cin):
        for r in range(kh):
            for c in range(kw):
                patch = xp[:, ci, r:r + sh * oh:sh, c:c + sw * ow:sw]
                out += w[None, :, ci, r, c, None, None] * patch[:, None, :, :]
    return out


@dataclass
class Histogram:
    bin_count: int
    range_lo: float
    range_hi: float
    counts: np.ndarray  # int64, length bin_count

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def histogram(x: np.ndarray, bins: int, lo: float, hi: float) -> Histogram:
    """Clamp values into [lo, hi], then bin; total count is preserved."""
    _require_fp32(x)
    if bins < 2:
        raise RangeError(f"need at least 2 bins, got {bins}")
    if not lo < hi:
        raise RangeError(f"degenerate histogram range [{lo}, {hi}]")
    clipped = np.clip(x.reshape(-1).astype(np.float64), lo, hi)
    counts, _ = np.histogram(clipped, bins=bins, range=(lo, hi))
    return Histogram(bins, float(lo), float(hi), counts.astype(np.int64))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a, b) / (|a| |b|) over flattened tensors."""
    _require_fp32(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    af = a.reshape(-1).astype(np.float64)
    bf = b.reshape(-1).astype(np.float64)
    na = np.linalg.norm(af)
    nb = np.linalg.norm(bf)
    if na == 0.0 or nb == 0.0:
        raise RangeError("cosine similarity undefined for zero-norm input")
    return float(np.clip(np.dot(af, bf) / (na * nb), -1.0, 1.0))


def psnr(ref: np.ndarray, test: np.ndarray, peak: float) -> float:
    """10 log10(peak^2 / MSE) in dB, capped at PSNR_CAP_DB for zero MSE."""
    _require_fp32(ref, test)
    if ref.shape != test.shape:
        raise ShapeError(f"psnr shape mismatch: {ref.shape} vs {test.shape}")
    if peak <= 0:
        raise RangeError(f"peak must be positive, got {peak}")
    diff = ref.astype(np.float64) - test.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


# QTNS tensor file format: magic "QTNS", u16 version, u8 dtype code,
# u8 rank, rank x u32 extents, raw little-endian buffer.

QTNS_MAGIC = b"QTNS"
QTNS_VERSION = 1


def qtns_bytes(arr: np.ndarray) -> bytes:
    name = dtype_name(arr)
    if arr.ndim > 255:
        raise FormatError("rank too large for QTNS")
    head = QTNS_MAGIC + struct.pack("<HBB", QTNS_VERSION, DTYPE_CODES[name], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf = np.ascontiguousarray(arr)
    if buf.dtype.byteorder == ">":
        buf = buf.astype(buf.dtype.newbyteorder("<"))
    return head + dims + buf.tobytes()


def qtns_from_bytes(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one QTNS record; returns (tensor, next offset)."""
    if data[offset:offset + 4] != QTNS_MAGIC:
        raise FormatError("bad QTNS magic")
    version, code, rank = struct.unpack_from("<HBB", data, offset + 4)
    if version != QTNS_VERSION:
        raise FormatError(f"unsupported QTNS version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown QTNS dtype code {code}")
    pos = offset + 8
    if len(data) < pos + 4 * rank:
        raise FormatError("truncated QTNS header")
    shape = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    name = _CODE_TO_DTYPE[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    nbytes = count * itemsize(name)
    if len(data) < pos + nbytes:
        raise FormatError("truncated QTNS payload")
    flat = np.frombuffer(data[pos:pos + nbytes], dtype=np.dtype(DTYPES[name]).newbyteorder("<"))
    arr = flat.astype(DTYPES[name]).reshape(shape)
    return arr, pos + nbytes


def write_qtns(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(qtns_bytes(arr))


def read_qtns(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    arr, end = qtns_from_bytes(data)
    if end != len(data):
        raise FormatError("trailing bytes after QTNS payload")
    return arr
