"""
Deployment side: bit-packed sign matrices, a multiply-free binary GEMV,
the deployed model file and a micro-benchmark.

Packing: row-major 64-bit words, LSB-first within each word, bit 1 means +1,
padding bits zero, ceil(n/64) words per row.

Deployed file layout (little-endian)::

    8s   magic "BCSINET1"
    u32  version (1)
    u8   family (0 CsiNet, 1 BCsiNet), u8 head (0 A, 1 B, 2 C), u8 refinenets, u8 reserved
    u32  eta denominator, u32 na, u32 nt
    f32  norm_min, f32 norm_max
    u32  record count
    per record:
        u8 section (0 encoder, 1 decoder), u8 kind, u8 int count, u8 array count
        i32 ints
        arrays: u8 dtype tag, u8 ndim, u32 dims, payload
    u32  CRC32 of every preceding byte
"""

import statistics
import struct
import time
from dataclasses import dataclass

import numba
import numpy as np

from . import records
from .binarize import binarize
from .models import HEADS, FAMILIES, ModelSpec
from .nn import (
    Conv3x3, Dense, BinaryDense, Flatten, Graph, LeakyReLU, Layer, Reshape, ResidualAdd,
    Sigmoid, ShapeError, BatchNorm, fuse_batchnorm,
)
from .records import FormatError

MAGIC = b"BCSINET1"
VERSION = 1
WORD_BITS = 64


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------

class PackedBinaryMatrix:
    """Read-only m x n sign matrix stored one bit per entry."""

    __slots__ = ("rows", "cols", "words", "_bytes_t")

    def __init__(self, rows, cols, words):
        words = np.ascontiguousarray(words, dtype=np.uint64)
        if words.shape != (rows, words_per_row(cols)):
            raise ValueError(f"expected words of shape {(rows, words_per_row(cols))}, got {words.shape}")
        tail = cols % WORD_BITS
        if tail and np.any(words[:, -1] >> np.uint64(tail)):
            raise ValueError("padding bits must be zero")
        words.flags.writeable = False
        self.rows, self.cols, self.words = rows, cols, words
        # byte g of every row, laid out contiguously: the order the kernel walks
        n_groups = -(-cols // 8)
        as_bytes = words.astype("<u8").view(np.uint8).reshape(rows, -1)[:, :n_groups]
        self._bytes_t = np.ascontiguousarray(as_bytes.T)
        self._bytes_t.flags.writeable = False

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nbytes(self):
        """Storage for the sign bits alone: ceil(m n / 8)."""
        return -(-self.rows * self.cols // 8)

    def __eq__(self, other):
        return (isinstance(other, PackedBinaryMatrix) and self.shape == other.shape
                and np.array_equal(self.words, other.words))

    def __repr__(self):
        return f"PackedBinaryMatrix({self.rows}x{self.cols})"


def words_per_row(n):
    return -(-n // WORD_BITS)


def pack(B):
    """Pack a {-1, +1} matrix."""
    B = np.asarray(B)
    if B.ndim != 2:
        raise ValueError(f"expected a 2-D sign matrix, got shape {B.shape}")
    if not np.all((B == 1) | (B == -1)):
        raise ValueError("sign matrix entries must be -1 or +1")
    m, n = B.shape
    w = words_per_row(n)
    bits = np.zeros((m, w * WORD_BITS), dtype=np.uint8)
    bits[:, :n] = B > 0
    as_bytes = np.packbits(bits, axis=1, bitorder="little")
    words = as_bytes.view("<u8").astype(np.uint64).reshape(m, w)
    return PackedBinaryMatrix(m, n, words)


def unpack(P):
    as_bytes = P.words.astype("<u8").view(np.uint8).reshape(P.rows, -1)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :P.cols]
    return np.where(bits == 1, 1, -1).astype(np.int8)


# ---------------------------------------------------------------------------
# multiply-free product
# ---------------------------------------------------------------------------

def _signed_accumulate_impl(bytes_t, x, table, out):
    """out[r] = sum_j B[r, j] x[j] using additions and subtractions only.

    For each group of 8 inputs a 256-entry table of subset sums is built
    (entry v holds the sum of x over the set bits of v). Every row then adds
    one table entry per group, giving S_r = sum of x over its +1 entries, and
    B x = S - (total - S) = (S + S) - total. ``out`` must be zeroed by the caller.
    """
    n_groups = bytes_t.shape[0]
    m = bytes_t.shape[1]
    total = table[0]
    for g in range(n_groups):
        for b in range(8):
            xv = x[g * 8 + b]
            lo = 1 << b
            for v in range(lo):
                table[lo + v] = table[v] + xv
        total = total + table[255]
        col = bytes_t[g]
        for r in range(m):
            out[r] = out[r] + table[col[r]]
    for r in range(m):
        out[r] = (out[r] + out[r]) - total


_signed_accumulate = numba.njit(cache=True, nogil=True)(_signed_accumulate_impl)


def _padded(x, n, n_groups, dtype=np.float32):
    x = np.asarray(x)
    if x.shape[-1] != n:
        raise ShapeError(f"input length {x.shape[-1]} does not match matrix columns {n}")
    out = np.zeros(x.shape[:-1] + (n_groups * 8,), dtype=dtype)
    out[..., :n] = x
    return out


def signed_sum(P, x):
    """B x for a packed B, computed without multiplications."""
    n_groups = P._bytes_t.shape[0]
    xp = _padded(x, P.cols, n_groups)
    out = np.zeros(P.rows, dtype=np.float32)
    table = np.zeros(256, dtype=np.float32)
    _signed_accumulate(P._bytes_t, xp, table, out)
    return out


def binary_gemv(P, x, alpha, bias, out=None):
    """alpha * (B x) + bias: m multiplications in total, alpha B is never formed."""
    bias = np.asarray(bias, dtype=np.float32)
    if bias.shape != (P.rows,):
        raise ShapeError(f"bias length {bias.shape} does not match matrix rows {P.rows}")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    n_groups = P._bytes_t.shape[0]
    xp = _padded(x, P.cols, n_groups)
    acc = np.zeros(P.rows, dtype=np.float32) if out is None else out
    acc[:] = 0
    _signed_accumulate(P._bytes_t, xp, np.zeros(256, dtype=np.float32), acc)
    acc *= np.float32(alpha)
    acc += bias
    return acc


def binary_gemm(P, X, alpha, bias):
    """Row-wise :func:`binary_gemv` over a batch (N, n) -> (N, m)."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2:
        raise ShapeError(f"expected a (N, n) batch, got shape {X.shape}")
    out = np.empty((X.shape[0], P.rows), dtype=np.float32)
    for i in range(X.shape[0]):
        binary_gemv(P, X[i], alpha, bias, out=out[i])
    return out


class PackedDense(Layer):
    """Inference-only binary fully-connected layer."""

    def __init__(self, packed, alpha, bias, name="fc"):
        super().__init__(name)
        self.packed = packed
        self.alpha = float(np.float32(alpha))
        self.bias = np.asarray(bias, dtype=np.float32)
        self.bias.flags.writeable = False

    def output_shape(self, shape):
        if shape != (self.packed.cols,):
            raise ShapeError(f"{self.name}: expected input ({self.packed.cols},), got {shape}")
        return (self.packed.rows,)

    def forward(self, x, train=False):
        if train:
            raise RuntimeError("deployed layers are inference-only")
        return binary_gemm(self.packed, x, self.alpha, self.bias)

    @property
    def storage_bytes(self):
        return self.packed.nbytes + 4 + 4 * self.packed.rows


# ---------------------------------------------------------------------------
# deployed model
# ---------------------------------------------------------------------------

class DeployedModel:
    """Eval-only model: BN-fused float layers plus a packed binary encoder FC.

    Treat as immutable; concurrent ``encode``/``decode`` calls are safe.
    """

    def __init__(self, spec, encoder, decoder, norm_min=0.0, norm_max=1.0):
        self.spec = spec
        self.encoder = encoder
        self.decoder = decoder
        self.norm_min = float(np.float32(norm_min))
        self.norm_max = float(np.float32(norm_max))

    @property
    def fc(self):
        return self.encoder.layers[-1]

    @property
    def fc_storage_bytes(self):
        fc = self.fc
        if isinstance(fc, PackedDense):
            return fc.storage_bytes
        return 4 * fc.params["W"].size + 4 * fc.params["b"].size

    def encode(self, h):
        h = np.asarray(h, dtype=np.float32)
        expected = (2, self.spec.na, self.spec.nt)
        if h.ndim != 4 or h.shape[1:] != expected:
            raise ShapeError(f"encode: expected batch of shape (N, {expected}), got {h.shape}")
        return self.encoder.forward(h)

    def decode(self, v):
        v = np.asarray(v, dtype=np.float32)
        if v.ndim != 2 or v.shape[1] != self.spec.codeword_length:
            raise ShapeError(f"decode: expected (N, {self.spec.codeword_length}), got {v.shape}")
        return self.decoder.forward(v)

    def reconstruct(self, h):
        return self.decode(self.encode(h))

    def __repr__(self):
        return f"DeployedModel({self.spec.name}, eta=1/{self.spec.eta_denominator})"


def deploy(net, norm_min=0.0, norm_max=1.0):
    """Fold BatchNorm everywhere and replace the binary FC by its packed form."""
    encoder = fuse_batchnorm(net.encoder)
    decoder = fuse_batchnorm(net.decoder)
    layers = list(encoder.layers)
    fc = layers[-1]
    if isinstance(fc, BinaryDense):
        B, alpha = binarize(fc.params["W"])
        layers[-1] = PackedDense(pack(B), alpha, fc.params["b"], name=fc.name)
    encoder = Graph([_eval_copy(l) for l in layers], encoder.input_shape, name="encoder")
    decoder = Graph([_eval_copy(l) for l in decoder.layers], decoder.input_shape, name="decoder")
    return DeployedModel(net.spec, encoder.astype(np.float32), decoder.astype(np.float32),
                         norm_min, norm_max)


def _eval_copy(layer):
    layer.grads = {}
    layer._cache = None
    return layer


# --- serialization ----------------------------------------------------------

KIND_CONV, KIND_LEAKY, KIND_SIGMOID, KIND_DENSE, KIND_PACKED, KIND_FLATTEN, KIND_RESHAPE, KIND_SKIP = range(8)


def _layer_record(layer):
    """(kind, ints, arrays) for one deployed layer."""
    if isinstance(layer, PackedDense):
        return KIND_PACKED, [layer.packed.rows, layer.packed.cols], [
            layer.packed.words, np.array([layer.alpha], np.float32), layer.bias]
    if isinstance(layer, Conv3x3):
        return KIND_CONV, [], [layer.params["weight"], layer.params["bias"]]
    if isinstance(layer, BinaryDense):
        raise TypeError("binary layers must be packed before serialization")
    if isinstance(layer, Dense):
        return KIND_DENSE, [], [layer.params["W"], layer.params["b"]]
    if isinstance(layer, LeakyReLU):
        return KIND_LEAKY, [], [np.array([layer.slope], np.float32)]
    if isinstance(layer, Sigmoid):
        return KIND_SIGMOID, [], []
    if isinstance(layer, Flatten):
        return KIND_FLATTEN, [], []
    if isinstance(layer, Reshape):
        return KIND_RESHAPE, list(layer.target), []
    if isinstance(layer, ResidualAdd):
        return KIND_SKIP, [layer.source], []
    if isinstance(layer, BatchNorm):
        raise TypeError("BatchNorm must be folded before serialization")
    raise TypeError(f"cannot serialize layer {layer!r}")


def _layer_from_record(kind, ints, arrays, name):
    f32 = lambda a: np.asarray(a, dtype=np.float32)
    if kind == KIND_PACKED:
        rows, cols = ints
        words, alpha, bias = arrays
        return PackedDense(PackedBinaryMatrix(rows, cols, words), alpha[0], f32(bias), name=name)
    if kind == KIND_CONV:
        w, b = arrays
        layer = Conv3x3(w.shape[1], w.shape[0], name=name)
        layer.params = {"weight": f32(w), "bias": f32(b)}
        return _eval_copy(layer)
    if kind == KIND_DENSE:
        W, b = arrays
        layer = Dense(W.shape[1], W.shape[0], name=name)
        layer.params = {"W": f32(W), "b": f32(b)}
        return _eval_copy(layer)
    if kind == KIND_LEAKY:
        return LeakyReLU(float(arrays[0][0]), name=name)
    if kind == KIND_SIGMOID:
        return Sigmoid(name=name)
    if kind == KIND_FLATTEN:
        return Flatten(name=name)
    if kind == KIND_RESHAPE:
        return Reshape(tuple(ints), name=name)
    if kind == KIND_SKIP:
        return ResidualAdd(ints[0], name=name)
    raise FormatError(f"unknown layer kind {kind}")


def to_bytes(model):
    w = records.Writer()
    spec = model.spec
    w.raw(MAGIC)
    w.pack("I", VERSION)
    w.pack("BBBB", FAMILIES.index(spec.family), HEADS.index(spec.head), spec.refinenets, 0)
    w.pack("III", spec.eta_denominator, spec.na, spec.nt)
    w.pack("ff", model.norm_min, model.norm_max)
    layers = [(0, l) for l in model.encoder.layers] + [(1, l) for l in model.decoder.layers]
    w.pack("I", len(layers))
    for section, layer in layers:
        kind, ints, arrays = _layer_record(layer)
        w.pack("BBBB", section, kind, len(ints), len(arrays))
        w.pack(f"{len(ints)}i", *ints)
        for a in arrays:
            w.array(a)
    return w.getvalue()


def from_bytes(blob, name="model"):
    r = records.verified_body(blob, MAGIC, VERSION, name)
    family, head, refinenets, _ = r.unpack("BBBB")
    eta_den, na, nt = r.unpack("III")
    norm_min, norm_max = r.unpack("ff")
    try:
        spec = ModelSpec(FAMILIES[family], HEADS[head], refinenets, 1 / eta_den, na, nt)
    except (IndexError, ValueError, ZeroDivisionError) as exc:
        raise FormatError(f"{name}: invalid model header ({exc})") from None
    sections = ([], [])
    for _ in range(r.unpack("I")):
        section, kind, n_ints, n_arrays = r.unpack("BBBB")
        if section > 1:
            raise FormatError(f"{name}: bad section {section}")
        ints = list(struct.unpack(f"<{n_ints}i", r.take(4 * n_ints)))
        arrays = [r.array() for _ in range(n_arrays)]
        sections[section].append(_layer_from_record(kind, ints, arrays, f"layer{len(sections[section])}"))
    r.done()
    try:
        encoder = Graph(sections[0], (2, na, nt), name="encoder")
        decoder = Graph(sections[1], (spec.codeword_length,), name="decoder")
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"{name}: inconsistent layer records ({exc})") from None
    return DeployedModel(spec, encoder, decoder, norm_min, norm_max)


def export(net, path, norm_min=0.0, norm_max=1.0):
    """Write the deployed form of ``net`` (or of an existing DeployedModel)."""
    model = net if isinstance(net, DeployedModel) else deploy(net, norm_min, norm_max)
    blob = to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return model


def import_model(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), str(path))


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    rows: int
    cols: int
    iterations: int
    binary_ns: float          # median over runs of mean ns per product
    dense_ns: float
    binary_runs_ns: tuple
    dense_runs_ns: tuple
    binary_mults: int
    dense_mults: int

    @property
    def speedup(self):
        return self.dense_ns / self.binary_ns

    @property
    def mult_ratio(self):
        return self.dense_mults / self.binary_mults

    @staticmethod
    def _spread(runs):
        med = statistics.median(runs)
        return (max(runs) - min(runs)) / med

    @property
    def binary_spread(self):
        """(max - min) / median across runs."""
        return self._spread(self.binary_runs_ns)

    @property
    def dense_spread(self):
        return self._spread(self.dense_runs_ns)

    def summary(self):
        return (
            f"binary FC {self.rows}x{self.cols}: {self.binary_ns / 1e3:.1f} us/inference "
            f"(spread {100 * self.binary_spread:.1f}%), {self.binary_mults} multiplications\n"
            f"float FC  {self.rows}x{self.cols}: {self.dense_ns / 1e3:.1f} us/inference "
            f"(spread {100 * self.dense_spread:.1f}%), {self.dense_mults} multiplications\n"
            f"wall-clock speedup {self.speedup:.2f}x, multiplication ratio {self.mult_ratio:.0f}x"
        )


def _time_runs(fn, iterations, runs):
    out = []
    for _ in range(runs):
        start = time.perf_counter_ns()
        for _ in range(iterations):
            fn()
        out.append((time.perf_counter_ns() - start) / iterations)
    return out


def bench(model, iterations=2000, runs=5, seed=0):
    """Time the packed FC against a float GEMV with the same shape and values.

    Runs of the two kernels are interleaved so drift in machine load hits both.
    """
    from .complexity import LayerShape, layer_cost

    fc = model.fc if isinstance(model, DeployedModel) else model
    if not isinstance(fc, PackedDense):
        raise TypeError("benchmark needs a model with a binary encoder FC")
    P, alpha, bias = fc.packed, fc.alpha, fc.bias
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(P.cols).astype(np.float32)
    W = (np.float32(alpha) * unpack(P)).astype(np.float32)
    out = np.empty(P.rows, dtype=np.float32)
    scratch = np.empty(P.rows, dtype=np.float32)

    def binary():
        binary_gemv(P, x, alpha, bias, out=out)

    def dense():
        np.matmul(W, x, out=scratch)
        np.add(scratch, bias, out=scratch)

    for fn in (binary, dense):  # warm up, including JIT compilation
        _time_runs(fn, max(1, iterations // 10), 1)
    b_runs, d_runs = [], []
    for _ in range(runs):
        b_runs += _time_runs(binary, iterations, 1)
        d_runs += _time_runs(dense, iterations, 1)
    bin_cost = layer_cost(LayerShape("BinaryDense", "fc", (P.cols,), (P.rows,)))
    flt_cost = layer_cost(LayerShape("Dense", "fc", (P.cols,), (P.rows,)))
    return BenchReport(P.rows, P.cols, iterations,
                       statistics.median(b_runs), statistics.median(d_runs),
                       tuple(b_runs), tuple(d_runs), bin_cost.mults, flt_cost.mults)
