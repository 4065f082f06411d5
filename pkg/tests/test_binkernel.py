import numpy as np
import pytest

from bcsinet import binkernel, channel, models, trainer
from bcsinet.binkernel import (
    PackedBinaryMatrix,
    binary_gemm,
    binary_gemv,
    deploy,
    export,
    from_bytes,
    import_model,
    pack,
    signed_sum,
    to_bytes,
    unpack,
)
from bcsinet.records import FormatError

from oracles import CountingFloat, binary_dense_reference, pack_naive, rel_error


def _random_signs(rng, m, n):
    return np.where(rng.random((m, n)) < 0.5, -1, 1).astype(np.int8)


# --- packing ----------------------------------------------------------------

def test_pack_worked_example():
    P = pack(np.array([[1, -1], [1, 1]]))
    assert P.words.tolist() == [[0b01], [0b11]]


def test_pack_65_columns_uses_two_words_and_zero_padding():
    B = -np.ones((3, 65), np.int8)
    B[:, 64] = 1
    B[1, 0] = 1
    P = pack(B)
    assert P.words.shape == (3, 2)
    assert P.words[:, 1].tolist() == [1, 1, 1]
    assert P.words[:, 0].tolist() == [0, 1, 0]
    assert np.array_equal(unpack(P), B)


@pytest.mark.parametrize("shape", [(1, 1), (3, 7), (5, 64), (4, 129), (512, 2048)])
def test_pack_matches_bitwise_oracle_and_round_trips(shape):
    B = _random_signs(np.random.default_rng(sum(shape)), *shape)
    P = pack(B)
    assert np.array_equal(P.words, pack_naive(B)) if shape != (512, 2048) else True
    assert np.array_equal(unpack(P), B)
    assert P.nbytes == -(-shape[0] * shape[1] // 8)


def test_production_pack_matches_bitwise_oracle_on_sampled_rows():
    B = _random_signs(np.random.default_rng(3), 512, 2048)
    P = pack(B)
    rows = [0, 1, 255, 511]
    assert np.array_equal(P.words[rows], pack_naive(B[rows]))


def test_pack_rejects_non_sign_entries():
    with pytest.raises(ValueError):
        pack(np.array([[1, 0]]))
    with pytest.raises(ValueError):
        pack(np.array([1, -1]))


def test_packed_matrix_rejects_dirty_padding_and_is_read_only():
    with pytest.raises(ValueError):
        PackedBinaryMatrix(1, 3, np.array([[0b1000]], np.uint64))
    P = pack(np.ones((2, 3)))
    with pytest.raises(ValueError):
        P.words[0, 0] = 0


# --- multiply-free product ----------------------------------------------------

def test_gemv_worked_example():
    b1, b2 = 0.75, -2.5
    out = binary_gemv(pack(np.array([[1, -1], [1, 1]])), np.array([b1, b2]), 1.0, np.zeros(2))
    assert out.tolist() == [b1 - b2, b1 + b2]


def test_gemv_alpha_zero_returns_bias():
    rng = np.random.default_rng(0)
    bias = rng.standard_normal(5).astype(np.float32)
    out = binary_gemv(pack(_random_signs(rng, 5, 9)), rng.standard_normal(9), 0.0, bias)
    assert np.array_equal(out, bias)


def test_gemv_matches_dense_oracle_on_1000_instances():
    rng = np.random.default_rng(1234)
    worst = 0.0
    for i in range(1000):
        if i % 50 == 0:
            m, n = 512, 2048
        else:
            m, n = int(rng.integers(1, 70)), int(rng.integers(1, 300))
        B = _random_signs(rng, m, n)
        x = rng.standard_normal(n).astype(np.float32)
        alpha = float(np.float32(rng.uniform(0.01, 2)))
        bias = rng.standard_normal(m).astype(np.float32)
        got = binary_gemv(pack(B), x, alpha, bias)
        worst = max(worst, rel_error(got, binary_dense_reference(B, x, alpha, bias)))
    assert worst < 1e-5, worst


def test_gemm_matches_rowwise_gemv():
    rng = np.random.default_rng(5)
    B = _random_signs(rng, 16, 40)
    P = pack(B)
    X = rng.standard_normal((6, 40)).astype(np.float32)
    bias = rng.standard_normal(16).astype(np.float32)
    Y = binary_gemm(P, X, 0.5, bias)
    for i in range(6):
        assert np.array_equal(Y[i], binary_gemv(P, X[i], 0.5, bias))


def test_signed_sum_uses_no_multiplications():
    rng = np.random.default_rng(6)
    m, n = 7, 21
    B = _random_signs(rng, m, n)
    P = pack(B)
    n_groups = P._bytes_t.shape[0]
    values = rng.standard_normal(n)
    x = np.array([CountingFloat(v) for v in values] + [CountingFloat(0)] * (8 * n_groups - n), dtype=object)
    table = np.array([CountingFloat(0) for _ in range(256)], dtype=object)
    out = np.array([CountingFloat(0) for _ in range(m)], dtype=object)
    CountingFloat.reset()
    binkernel._signed_accumulate_impl(P._bytes_t, x, table, out)
    assert CountingFloat.counts["mul"] == 0 and CountingFloat.counts["div"] == 0
    assert CountingFloat.counts["add"] > 0
    got = np.array([float(v) for v in out])
    np.testing.assert_allclose(got, B.astype(np.float64) @ values, rtol=1e-12, atol=1e-12)


def test_signed_sum_compiled_matches_reference():
    rng = np.random.default_rng(7)
    B = _random_signs(rng, 9, 33)
    x = rng.standard_normal(33).astype(np.float32)
    np.testing.assert_allclose(signed_sum(pack(B), x), B @ x.astype(np.float64), rtol=1e-5, atol=1e-5)


# --- deployment ---------------------------------------------------------------

def _trained_like(spec, seed):
    """A network with non-trivial BN statistics and affine parameters."""
    rng = np.random.default_rng(seed)
    net = models.build(spec, seed=seed)
    for _ in range(3):
        net.forward(rng.random((16, 2, spec.na, spec.nt)).astype(np.float32), train=True)
    for graph in net.graphs():
        for layer in graph.layers:
            if "gamma" in layer.params:
                c = layer.params["gamma"].size
                layer.params["gamma"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
                layer.params["beta"] = rng.normal(0, 0.2, c).astype(np.float32)
    return net


@pytest.fixture(scope="module")
def b3_net():
    return _trained_like(models.ModelSpec("BCsiNet", "B", 3, 0.25), seed=21)


def test_deployed_encoder_matches_eval_network(b3_net):
    model = deploy(b3_net)
    x = np.random.default_rng(8).random((100, 2, 32, 32)).astype(np.float32)
    assert rel_error(model.encode(x), b3_net.encode(x)) < 1e-4
    assert rel_error(model.reconstruct(x), b3_net.reconstruct(x)) < 1e-4


def test_deployed_nmse_matches_within_hundredth_db(b3_net):
    data = channel.generate(seed=4, sizes=(1, 1, 40))["test"]
    _, _, db_net = trainer.evaluate(b3_net, data)
    _, _, db_dep = trainer.evaluate(deploy(b3_net, data.norm_min, data.norm_max), data)
    assert abs(db_net - db_dep) < 0.01


def test_deployed_fc_storage_is_bits_plus_alpha_and_bias(b3_net):
    model = deploy(b3_net)
    assert model.fc_storage_bytes == 512 * 2048 // 8 + 4 + 4 * 512


@pytest.mark.parametrize("spec", [
    models.ModelSpec("BCsiNet", "A", 2, 0.25),
    models.ModelSpec("BCsiNet", "C", 3, 1 / 16),
    models.ModelSpec("CsiNet", "A", 2, 1 / 8),
])
def test_export_import_round_trip_is_byte_identical(tmp_path, spec):
    net = _trained_like(spec, seed=3)
    path = tmp_path / "m.bcsinet"
    model = export(net, path, -1.5, 2.5)
    blob = path.read_bytes()
    again = import_model(path)
    assert to_bytes(again) == blob
    assert again.spec == spec and (again.norm_min, again.norm_max) == (-1.5, 2.5)
    x = np.random.default_rng(0).random((4, 2, 32, 32)).astype(np.float32)
    assert np.array_equal(again.reconstruct(x), model.reconstruct(x))
    assert to_bytes(deploy(net, -1.5, 2.5)) == blob


def test_import_rejects_corruption(b3_net):
    blob = to_bytes(deploy(b3_net))
    with pytest.raises(FormatError):
        from_bytes(b"XXXXXXXX" + blob[8:])
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0x10
    with pytest.raises(FormatError):
        from_bytes(bytes(flipped))
    with pytest.raises(FormatError):
        from_bytes(blob[:-9])


def test_bench_reports_exact_multiplication_counts(b3_net):
    report = binkernel.bench(deploy(b3_net), iterations=50, runs=3)
    assert (report.rows, report.cols) == (512, 2048)
    assert report.binary_mults == 512
    assert report.dense_mults == 1_048_576
    assert report.speedup > 0 and len(report.binary_runs_ns) == 3
    assert "multiplication ratio 2048x" in report.summary()
