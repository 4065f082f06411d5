import struct

import numpy as np
import pytest

from bcsinet import channel
from bcsinet.channel import (
    ChannelDataset,
    FormatError,
    denormalize,
    energy_in_first_rows,
    from_angular_delay,
    generate,
    load,
    normalize,
    reconstruct_full,
    save,
    single_path_channel,
    split_sizes,
    to_angular_delay,
    truncate,
    zero_fill,
)

from oracles import dft_naive, rel_error


def _random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_dft_matrix_matches_defining_sum():
    np.testing.assert_allclose(channel.dft_matrix(16), dft_naive(16), rtol=0, atol=1e-12)


@pytest.mark.parametrize("shape", [(64, 8), (1024, 32)])
def test_fft_and_direct_transforms_agree(shape):
    h = _random_complex(np.random.default_rng(0), shape)
    fast = to_angular_delay(h, "fft")
    ref = dft_naive(shape[0]) @ h @ dft_naive(shape[1]).conj().T
    assert rel_error(fast, ref) < 1e-6
    assert rel_error(to_angular_delay(h, "direct"), ref) < 1e-6
    assert rel_error(from_angular_delay(fast, "direct"), from_angular_delay(fast, "fft")) < 1e-6


def test_direct_transform_handles_non_power_of_two():
    h = _random_complex(np.random.default_rng(1), (12, 5))
    ref = dft_naive(12) @ h @ dft_naive(5).conj().T
    assert rel_error(to_angular_delay(h, "direct"), ref) < 1e-10


def test_transform_round_trip_and_zero():
    h = _random_complex(np.random.default_rng(2), (1024, 32))
    assert rel_error(from_angular_delay(to_angular_delay(h)), h) < 1e-5
    assert not np.any(to_angular_delay(np.zeros((8, 4))))


def test_unknown_transform_method():
    with pytest.raises(ValueError):
        to_angular_delay(np.zeros((4, 4)), "bogus")


@pytest.mark.parametrize("delay", [0, 3, 17, 31])
def test_single_path_on_integer_tap_concentrates_in_its_row(delay):
    h = to_angular_delay(single_path_channel(delay, angle=0.4))
    power = np.abs(h) ** 2
    assert power[delay].sum() / power.sum() >= 0.99


def test_truncate_shape_and_full_truncation_is_lossless():
    rng = np.random.default_rng(3)
    h = _random_complex(rng, (1024, 32))
    assert truncate(h, 32).shape == (2, 32, 32)
    full = truncate(h, 1024)
    assert np.array_equal(zero_fill(full, 1024), h)
    with pytest.raises(ValueError):
        truncate(h, 1025)


def test_truncate_then_reconstruct_recovers_bandlimited_channel():
    rng = np.random.default_rng(4)
    h = np.zeros((1024, 32), complex)
    h[:32] = _random_complex(rng, (32, 32))
    h_tilde = from_angular_delay(h)
    back = reconstruct_full(truncate(to_angular_delay(h_tilde), 32))
    assert rel_error(back, h_tilde) < 1e-8


def test_normalization_is_invertible():
    x = np.random.default_rng(5).standard_normal(1000) * 7
    assert np.max(np.abs(denormalize(normalize(x, -30.0, 25.0), -30.0, 25.0) - x)) < 1e-6


def test_split_sizes():
    assert split_sizes(1.0) == (100_000, 30_000, 20_000)
    assert split_sizes() == (1000, 300, 200)
    with pytest.raises(ValueError):
        split_sizes(1e-6)


@pytest.fixture(scope="module")
def small_splits():
    return generate(seed=7, sizes=(60, 20, 20))


def test_generated_data_shape_range_and_shared_bounds(small_splits):
    assert [len(small_splits[k]) for k in ("train", "val", "test")] == [60, 20, 20]
    for ds in small_splits.values():
        assert ds.data.shape[1:] == (2, 32, 32) and ds.data.dtype == np.float32
        assert ds.data.min() >= 0 and ds.data.max() <= 1
    bounds = {(ds.norm_min, ds.norm_max) for ds in small_splits.values()}
    assert len(bounds) == 1
    everything = np.concatenate([ds.data for ds in small_splits.values()])
    assert everything.min() == 0.0 and everything.max() == 1.0


def test_generated_energy_is_concentrated_in_first_rows():
    prof = channel.PROFILES["indoor"]
    fractions = []
    for i in range(200):
        h = to_angular_delay(channel.synthesize_channel(channel.sample_rng(11, i), prof))
        fractions.append(energy_in_first_rows(h, 32))
    assert np.mean(fractions) >= 0.95


def test_generation_is_deterministic_and_index_addressed():
    a = channel.generate_raw(6, seed=9)
    b = channel.generate_raw(6, seed=9)
    assert np.array_equal(a, b)
    tail = channel.generate_raw(2, seed=9, start=4)
    assert np.array_equal(a[4:], tail)
    assert not np.array_equal(a, channel.generate_raw(6, seed=10))


def test_same_seed_gives_byte_identical_files(tmp_path):
    for name in ("a", "b"):
        channel.save_splits(generate(seed=3, sizes=(5, 2, 2)), tmp_path / name)
    for split in ("train", "val", "test"):
        assert (tmp_path / "a" / f"{split}.bin").read_bytes() == (tmp_path / "b" / f"{split}.bin").read_bytes()


def test_save_load_round_trip_and_exact_layout(tmp_path, small_splits):
    ds = small_splits["val"]
    path = tmp_path / "val.bin"
    save(ds, path)
    blob = path.read_bytes()
    magic, version, count, na, nt = struct.unpack_from("<8sIIII", blob)
    lo, hi = struct.unpack_from("<ff", blob, 24)
    (seed,) = struct.unpack_from("<Q", blob, 32)
    assert (magic, version, count, na, nt, seed) == (b"BCSIDATA", 1, 20, 32, 32, 7)
    assert (lo, hi) == (ds.norm_min, ds.norm_max)
    assert len(blob) == 40 + 20 * 2 * 32 * 32 * 4
    back = load(path)
    assert back.data.tobytes() == ds.data.tobytes()
    assert (back.norm_min, back.norm_max, back.seed) == (ds.norm_min, ds.norm_max, ds.seed)


def test_load_rejects_bad_files(tmp_path, small_splits):
    path = tmp_path / "d.bin"
    save(small_splits["test"], path)
    good = path.read_bytes()
    cases = {
        "magic": b"NOTADATA" + good[8:],
        "version": good[:8] + struct.pack("<I", 2) + good[12:],
        "count": good[:12] + struct.pack("<I", 21) + good[16:],
        "short": good[:30],
        "truncated": good[:-4],
    }
    for name, blob in cases.items():
        path.write_bytes(blob)
        with pytest.raises(FormatError):
            load(path)


def test_dataset_physical_inverts_normalization():
    raw = np.random.default_rng(6).uniform(-3, 5, (4, 2, 3, 3))
    ds = ChannelDataset(normalize(raw, -3.0, 5.0), -3.0, 5.0)
    np.testing.assert_allclose(ds.physical(), raw, atol=1e-5)


def test_dataset_shape_validation():
    with pytest.raises(ValueError):
        ChannelDataset(np.zeros((3, 1, 4, 4)), 0, 1)
