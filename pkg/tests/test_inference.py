import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sigquant.core import PRESETS, QuantParams, ideal_quantize
from sigquant.exceptions import ContractError, EncodingError, ParseError
from sigquant.inference import (
    MAGIC,
    InferenceModel,
    benchmark,
    load_packed,
    pack,
    pack_codes,
    packed_dot,
    packed_gemv,
    save_packed,
)
from sigquant.nn import Network, Quantizer


def code_matrix(values, max_rows=9, max_cols=150):
    return st.tuples(st.integers(1, max_rows), st.integers(1, max_cols), st.integers(0, 2**31)).map(
        lambda t: np.random.default_rng(t[2]).choice(values, size=(t[0], t[1])))


def quantized_net(levels_w="ternary", act=None, seed=0):
    net = Network.from_arch("conv:4:3:1,relu,pool:2,flatten,linear:12,relu,linear:3", (1, 6, 6), seed=seed)
    for name in ("conv1", "fc1"):
        w = net.layer(name).weight
        beta = 1.25 / np.abs(w).max()
        lv = PRESETS[levels_w]
        biases = [0.0] if lv.n == 1 else list(np.linspace(-0.4, 0.4, lv.n))
        net.attach_weight_quantizer(name, Quantizer(lv, QuantParams(1 / beta, beta, biases), f"{name}.wq"))
    if act:
        net.attach_activation_quantizer("pool1", Quantizer(act, QuantParams(0.3, 2.0, [0.5, 1.5, 2.5]), "pool1.aq"))
    return net


class TestPacking:
    def test_ternary_roundtrip_64(self, rng):
        m = rng.choice([-1, 0, 1], size=(64, 64))
        np.testing.assert_array_equal(pack(m, "ternary").unpack(), m)

    @given(code_matrix([-1, 1]))
    def test_binary_roundtrip(self, m):
        p = pack(m, "binary")
        assert p.planes.is_binary
        np.testing.assert_array_equal(p.unpack(), m)

    def test_value_outside_codebook(self):
        with pytest.raises(EncodingError, match="code 2"):
            pack(np.array([[0, 1], [2, -1]]), "ternary")

    def test_non_packable_levels(self):
        with pytest.raises(EncodingError):
            pack(np.zeros((2, 2)), "3bit±4")

    def test_all_zero_ternary(self):
        p = pack(np.zeros((3, 70)), "ternary")
        assert not np.any(p.planes.mags[0])
        np.testing.assert_array_equal(p.unpack(), 0)

    def test_memory_ratios(self):
        assert 32 * 32 * 4 / pack(np.ones((32, 32)), "binary").payload_bytes == 32
        assert 32 * 32 * 4 / pack(np.zeros((32, 32)), "ternary").payload_bytes == 16


class TestKernels:
    def test_xnor_hand_value(self):
        a, b = pack_codes([1, -1, 1]), pack_codes([1, 1, -1])
        assert packed_dot(a, b)[0, 0] == -1

    @pytest.mark.parametrize("length", [1, 63, 64, 65, 300])
    def test_all_ones(self, length):
        v = pack_codes(np.ones(length))
        assert packed_dot(v, v)[0, 0] == length

    @given(code_matrix([-1, 0, 1]), st.integers(0, 2**31))
    def test_ternary_gemv_matches_float(self, m, seed):
        x = np.random.default_rng(seed).choice([-1, 0, 1], size=m.shape[1])
        got = packed_gemv(pack(m, "ternary", alpha=0.5), x, 2.0)
        np.testing.assert_array_equal(got, (m.astype(float) @ x.astype(float)) * 1.0)

    @given(code_matrix([-4, -2, -1, 0, 1, 2, 4]), code_matrix([-3, -1, 0, 1, 2, 3]))
    def test_multibit_planes(self, a, b):
        b = np.resize(b, (b.shape[0], a.shape[1]))
        got = packed_dot(pack_codes(a, binary=False), pack_codes(b, binary=False))
        np.testing.assert_array_equal(got, a.astype(np.int64) @ b.T.astype(np.int64))

    def test_shape_errors(self):
        with pytest.raises(ContractError):
            packed_gemv(pack(np.ones((2, 3)), "binary"), np.ones(4))
        with pytest.raises(EncodingError):
            pack_codes([0.5, 1.0])


class TestInferenceModel:
    @pytest.mark.parametrize("levels,act", [("ternary", None), ("binary", None), ("ternary", "act2bit")])
    def test_packed_equals_hard_bitwise(self, rng, levels, act):
        net = quantized_net(levels, act)
        model = net.to_inference()
        x = rng.normal(size=(20, 1, 6, 6))
        hard = model.forward(x)
        np.testing.assert_array_equal(model.packed().forward(x, use_packed=True), hard)
        np.testing.assert_array_equal(net.forward(x, "hard")[0], hard)

    def test_hard_matches_float_on_quantized_weights(self, rng):
        net = quantized_net("ternary")
        ref = net.copy()
        for name in ("conv1", "fc1"):
            q = net.layer(name).weight_quantizer
            ref.layer(name).weight[...] = ideal_quantize(ref.layer(name).weight, q.levels, q.params)
            ref.layer(name).weight_quantizer = None
        x = rng.normal(size=(6, 1, 6, 6))
        np.testing.assert_allclose(net.to_inference().forward(x), ref.forward(x, "float")[0], rtol=1e-12, atol=1e-12)

    def test_codes_in_codebook(self):
        model = quantized_net("ternary").to_inference()
        for op in model.dense_ops():
            if op.quantized:
                assert set(np.unique(op.codes)) <= {-1.0, 0.0, 1.0}

    def test_float_model_has_no_quantizers(self):
        assert not Network.from_arch("linear:2", (3,)).to_inference().has_quantizers


class TestSQNT:
    @pytest.mark.parametrize("levels,act", [("ternary", None), ("binary", "act2bit"), ("3bit±4", None)])
    def test_roundtrip(self, tmp_path, rng, levels, act):
        model = quantized_net(levels, act).to_inference()
        path = tmp_path / "m.sqnt"
        size = save_packed(model, path)
        assert size == path.stat().st_size
        back = load_packed(path)
        x = rng.normal(size=(10, 1, 6, 6))
        np.testing.assert_array_equal(back.forward(x), model.forward(x))
        np.testing.assert_array_equal(back.forward(x, use_packed=True), model.forward(x))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sqnt"
        path.write_bytes(b"NOPE" + bytes(10))
        with pytest.raises(ParseError, match="byte 0"):
            load_packed(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.sqnt"
        save_packed(quantized_net().to_inference(), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ParseError, match="byte"):
            load_packed(path)

    def test_unknown_tag(self, tmp_path):
        path = tmp_path / "m.sqnt"
        path.write_bytes(MAGIC + struct.pack("<HHBI", 1, 1, 1, 3) + bytes([99]))
        with pytest.raises(ParseError, match="tag 99 at byte 13"):
            load_packed(path)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.sqnt"
        save_packed(quantized_net().to_inference(), path)
        data = path.read_bytes()
        assert data[:4] == b"SQNT"
        assert struct.unpack("<HHB", data[4:9]) == (1, 7, 3)


def test_benchmark_rows():
    rows = benchmark(sizes=(64,), repeats=1)
    assert {r["codebook"] for r in rows} == {"binary", "ternary"}
    ratios = {r["codebook"]: r["memory_ratio"] for r in rows}
    assert ratios == {"binary": 32.0, "ternary": 16.0}
