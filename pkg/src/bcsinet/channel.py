"""
Channel data: synthetic CSI, angular-delay transform, truncation,
normalization and the dataset file format.

A spatial-frequency channel is a complex (N_c, N_t) matrix. The angular-delay
form is ``H = F_c H_tilde F_t^H`` with unitary DFT matrices, computed either
with FFTs or with explicit matrix products. Only the first N_a delay rows are
kept; the real and imaginary parts become the two input channels.

Dataset file layout (little-endian)::

    8s   magic "BCSIDATA"
    u32  version (1)
    u32  count
    u32  na
    u32  nt
    f32  norm_min
    f32  norm_max
    u64  seed
    f32  count * 2 * na * nt samples, C order (sample, re/im, delay, angle)
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import FormatError

NC = 1024
NT = 32
NA = 32

SPLIT_SIZES = (100_000, 30_000, 20_000)
SPLIT_NAMES = ("train", "val", "test")
DESK_SCALE = 0.01

MAGIC = b"BCSIDATA"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIffQ")


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def dft_matrix(n):
    """Unitary DFT matrix F with F[k, j] = exp(-2 pi i k j / n) / sqrt(n)."""
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def to_angular_delay(h_tilde, method="fft"):
    """``F_c @ h_tilde @ F_t^H`` for one (N_c, N_t) matrix or a stack of them."""
    h_tilde = np.asarray(h_tilde, dtype=np.complex128)
    if method == "fft":
        return np.fft.ifft(np.fft.fft(h_tilde, axis=-2, norm="ortho"), axis=-1, norm="ortho")
    if method == "direct":
        nc, nt = h_tilde.shape[-2:]
        return dft_matrix(nc) @ h_tilde @ dft_matrix(nt).conj().T
    raise ValueError(f"method must be 'fft' or 'direct', got {method!r}")


def from_angular_delay(h, method="fft"):
    """Inverse of :func:`to_angular_delay`: ``F_c^H @ H @ F_t``."""
    h = np.asarray(h, dtype=np.complex128)
    if method == "fft":
        return np.fft.ifft(np.fft.fft(h, axis=-1, norm="ortho"), axis=-2, norm="ortho")
    if method == "direct":
        nc, nt = h.shape[-2:]
        return dft_matrix(nc).conj().T @ h @ dft_matrix(nt)
    raise ValueError(f"method must be 'fft' or 'direct', got {method!r}")


def truncate(h, na=NA):
    """Keep delay rows [0, na) and split real/imag into a (2, na, N_t) array.

    Works on stacks too: (..., N_c, N_t) -> (..., 2, na, N_t).
    """
    h = np.asarray(h)
    if na > h.shape[-2]:
        raise ValueError(f"na={na} exceeds the {h.shape[-2]} available delay rows")
    rows = h[..., :na, :]
    return np.stack([rows.real, rows.imag], axis=-3)


def zero_fill(h_a, nc=NC):
    """Complex (nc, N_t) angular-delay matrix from a raw (2, na, N_t) sample."""
    h_a = np.asarray(h_a)
    na, nt = h_a.shape[-2:]
    full = np.zeros(h_a.shape[:-3] + (nc, nt), dtype=np.complex128)
    full[..., :na, :] = h_a[..., 0, :, :] + 1j * h_a[..., 1, :, :]
    return full


def reconstruct_full(h_a, nc=NC, method="fft"):
    """Spatial-frequency channel from a raw (de-normalized) truncated sample."""
    return from_angular_delay(zero_fill(h_a, nc), method=method)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(x, lo, hi):
    return (np.asarray(x) - lo) / (hi - lo)


def denormalize(x, lo, hi):
    return np.asarray(x) * (hi - lo) + lo


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelProfile:
    """Multipath scenario parameters.

    Path delays (in taps) are exponential with mean ``delay_mean`` clipped to
    ``[min_delay, max_delay]``; path power decays as exp(-delay / power_decay).
    """

    name: str = "indoor"
    min_paths: int = 3
    max_paths: int = 10
    delay_mean: float = 4.0
    min_delay: float = 1.0
    max_delay: float = 20.0
    power_decay: float = 4.0


PROFILES = {
    "indoor": ChannelProfile(),
    "outdoor": ChannelProfile("outdoor", 3, 10, delay_mean=8.0, max_delay=24.0, power_decay=8.0),
}


def single_path_channel(delay, angle, gain=1.0, nc=NC, nt=NT):
    """One propagation path: delay phase ramp (taps) times a ULA steering vector."""
    k = np.arange(nc)
    t = np.arange(nt)
    ramp = np.exp(2j * np.pi * k * delay / nc)
    steer = np.exp(-1j * np.pi * t * np.sin(angle)) / np.sqrt(nt)
    return gain * np.outer(ramp, steer)


def synthesize_channel(rng, profile=PROFILES["indoor"], nc=NC, nt=NT):
    """Random spatial-frequency channel H_tilde (nc, nt)."""
    n_paths = int(rng.integers(profile.min_paths, profile.max_paths + 1))
    delays = np.clip(
        profile.min_delay + rng.exponential(profile.delay_mean, n_paths),
        profile.min_delay,
        profile.max_delay,
    )
    angles = rng.uniform(-np.pi / 2, np.pi / 2, n_paths)
    power = np.exp(-delays / profile.power_decay)
    power /= power.sum()
    gains = np.sqrt(power / 2) * (rng.standard_normal(n_paths) + 1j * rng.standard_normal(n_paths))
    k = np.arange(nc)
    t = np.arange(nt)
    ramps = np.exp(2j * np.pi * np.outer(k, delays) / nc)  # (nc, L)
    steer = np.exp(-1j * np.pi * np.outer(np.sin(angles), t)) / np.sqrt(nt)  # (L, nt)
    return (ramps * gains) @ steer


def sample_rng(seed, index):
    """Independent stream per (seed, sample index); parallel-safe."""
    return np.random.default_rng([int(seed), int(index)])


def generate_raw(count, seed, profile="indoor", na=NA, nt=NT, nc=NC, start=0):
    """Raw truncated samples (count, 2, na, nt) as float64, indices start..start+count-1."""
    if count <= 0:
        raise ValueError("count must be positive")
    prof = PROFILES[profile] if isinstance(profile, str) else profile
    out = np.empty((count, 2, na, nt), dtype=np.float64)
    for i in range(count):
        h_tilde = synthesize_channel(sample_rng(seed, start + i), prof, nc, nt)
        out[i] = truncate(to_angular_delay(h_tilde), na)
    return out


def split_sizes(scale=DESK_SCALE):
    sizes = tuple(int(round(n * scale)) for n in SPLIT_SIZES)
    if min(sizes) < 1:
        raise ValueError(f"scale {scale} leaves an empty split")
    return sizes


@dataclass
class ChannelDataset:
    """Normalized samples plus the affine bounds that map them back."""

    data: np.ndarray  # (count, 2, na, nt) float32 in [0, 1]
    norm_min: float
    norm_max: float
    seed: int = 0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[1] != 2:
            raise ValueError(f"dataset must have shape (count, 2, na, nt), got {self.data.shape}")
        self.norm_min = float(np.float32(self.norm_min))
        self.norm_max = float(np.float32(self.norm_max))

    def __len__(self):
        return self.data.shape[0]

    @property
    def na(self):
        return self.data.shape[2]

    @property
    def nt(self):
        return self.data.shape[3]

    def physical(self, x=None):
        """De-normalize ``x`` (default: the stored samples) to channel scale."""
        x = self.data if x is None else x
        return denormalize(np.asarray(x, dtype=np.float64), self.norm_min, self.norm_max)

    def subset(self, idx):
        return ChannelDataset(self.data[idx], self.norm_min, self.norm_max, self.seed)


def generate(seed, sizes=None, scale=DESK_SCALE, profile="indoor", na=NA, nt=NT, nc=NC):
    """Synthesize train/val/test splits normalized with shared min-max bounds.

    Sample ``i`` of the concatenated split sequence always comes from stream
    (seed, i), so output does not depend on how generation is parallelized.
    """
    sizes = tuple(sizes) if sizes is not None else split_sizes(scale)
    raw = generate_raw(sum(sizes), seed, profile, na, nt, nc)
    lo = float(np.float32(raw.min()))
    hi = float(np.float32(raw.max()))
    if hi <= lo:
        raise ValueError("degenerate dataset: all values equal")
    norm = np.clip(normalize(raw, lo, hi), 0.0, 1.0).astype(np.float32)
    out = {}
    start = 0
    for name, n in zip(SPLIT_NAMES, sizes):
        out[name] = ChannelDataset(norm[start:start + n], lo, hi, seed)
        start += n
    return out


def energy_in_first_rows(h, na=NA):
    """Fraction of |H|^2 held by delay rows [0, na) of an angular-delay matrix (or stack)."""
    power = np.abs(np.asarray(h)) ** 2
    total = power.sum(axis=(-2, -1))
    return power[..., :na, :].sum(axis=(-2, -1)) / total


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save(dataset, path):
    path = Path(path)
    count, _, na, nt = dataset.data.shape
    header = _HEADER.pack(MAGIC, VERSION, count, na, nt, dataset.norm_min, dataset.norm_max,
                          int(dataset.seed))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dataset.data.astype("<f4", copy=False).tobytes(order="C"))


def load(path):
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a dataset header")
    magic, version, count, na, nt, lo, hi, seed = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if count == 0 or na == 0 or nt == 0:
        raise FormatError(f"{path}: empty dataset header")
    expected = count * 2 * na * nt * 4
    payload = len(blob) - _HEADER.size
    if payload != expected:
        raise FormatError(
            f"{path}: header declares {count} samples ({expected} bytes) but payload has {payload} bytes"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(count, 2, na, nt)
    return ChannelDataset(data.astype(np.float32), lo, hi, seed)


def save_splits(splits, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, ds in splits.items():
        paths[name] = directory / f"{name}.bin"
        save(ds, paths[name])
    return paths


def load_splits(directory):
    directory = Path(directory)
    return {name: load(directory / f"{name}.bin") for name in SPLIT_NAMES
            if (directory / f"{name}.bin").exists()}
