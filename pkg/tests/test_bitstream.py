import numpy as np
import pytest

from tricodec.bitstream import (CodecLayout, pack_bitstream, size_report,
                                size_report_markdown, unpack_bitstream)
from tricodec.density import FactorizedDensity, make_stream_densities
from tricodec.errors import BitstreamError, ContractViolation
from tricodec.peft import init_delta, wrap_mlp
from tricodec.renderer import RadianceMlp
from tricodec.triplane import MultiResTriplanes, PLANE_KEYS

DESK = CodecLayout(channels=4, resolutions=(8, 16, 32), code_dim=4,
                   code_res=2, codebook_size=16, delta_rank=1,
                   adapter_rank=2, mlp_profile="desk", pe_freqs=2)


def random_indices(layout, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, layout.codebook_size,
                        (3, layout.code_res, layout.code_res))


def peft_payload(layout, seed=0, quantized_scale=None):
    rng = np.random.default_rng(seed)
    delta = init_delta(layout.tri_config, layout.delta_rank, seed=seed)
    for key in delta.stream_keys():
        m = rng.standard_normal(delta.matrix(*key).shape).astype(np.float32)
        if quantized_scale is not None:
            m = np.rint(m * quantized_scale).astype(np.float32)
        delta.set_matrix(*key, m)
    for s, r in layout.v_keys():
        delta.bundle[f"v.s{s}.r{r}"] = rng.standard_normal(
            layout.channels).astype(np.float32)
    mlp = layout.mlp_spec().init_random(rng)
    coarse = wrap_mlp(mlp, layout.adapter_rank, seed=seed)
    fine = wrap_mlp(mlp, layout.adapter_rank, seed=seed + 1)
    for w in (coarse, fine):
        for name in list(w.adapters.arrays):
            w.adapters[name] = rng.standard_normal(w.adapters[name].shape
                                                   ).astype(np.float32)
    return delta, coarse, fine


def test_wo_ft_container_only_indices():
    idx = random_indices(DESK)
    data = pack_bitstream("wo-ft", DESK, idx)
    parsed = unpack_bitstream(data)
    assert parsed.mode == "wo-ft"
    np.testing.assert_array_equal(parsed.indices, idx)
    la, lb, lc, ld = parsed.section_lengths
    assert la > 0 and lb == lc == ld == 0
    report = size_report(data)
    assert report["total"]["bytes"] == len(data)
    assert report["feature"]["bytes"] == 0
    assert report["mlp"]["bytes"] == 0


def test_peft_container_roundtrip_bit_exact():
    delta, coarse, fine = peft_payload(DESK, seed=1)
    idx = random_indices(DESK, 1)
    data = pack_bitstream("peft", DESK, idx, delta=delta,
                          adapters_coarse=coarse.adapters,
                          adapters_fine=fine.adapters)
    parsed = unpack_bitstream(data)
    assert parsed.mode == "peft"
    np.testing.assert_array_equal(parsed.indices, idx)
    for key in DESK.stream_keys():
        assert parsed.m_raw[key].tobytes() == delta.matrix(*key).tobytes()
    for s, r in DESK.v_keys():
        assert parsed.v[(s, r)].tobytes() == delta.vector(s, r).tobytes()
    spec = DESK.mlp_spec()
    for which, src in (("coarse", coarse), ("fine", fine)):
        for name, _, _ in spec.layer_dims:
            for fac in ("wa", "wb"):
                assert (parsed.adapters[which][f"{name}.{fac}"].tobytes()
                        == src.adapters[f"{name}.{fac}"].tobytes())


def test_peft_pp_container_roundtrips_integers():
    delta, coarse, fine = peft_payload(DESK, seed=2, quantized_scale=3.0)
    densities = make_stream_densities(DESK.stream_keys())
    idx = random_indices(DESK, 2)
    data = pack_bitstream("peft++", DESK, idx, delta=delta,
                          densities=densities,
                          adapters_coarse=coarse.adapters,
                          adapters_fine=fine.adapters)
    parsed = unpack_bitstream(data)
    assert parsed.mode == "peft++"
    for key in DESK.stream_keys():
        expect = np.rint(delta.matrix(*key)).astype(np.int32)
        np.testing.assert_array_equal(parsed.m_int[key], expect)
        np.testing.assert_array_equal(parsed.m_dequantized()[key],
                                      expect.astype(np.float32))
    # density parameters travel bit-exactly
    for key in DESK.stream_keys():
        np.testing.assert_array_equal(parsed.densities[key].to_array(),
                                      densities[key].to_array())


def test_full_ft_container_roundtrip():
    rng = np.random.default_rng(3)
    tri = MultiResTriplanes.random(DESK.tri_config, rng)
    mlp_c = DESK.mlp_spec().init_random(rng)
    mlp_f = DESK.mlp_spec().init_random(rng)
    idx = random_indices(DESK, 3)
    data = pack_bitstream("full-ft", DESK, idx, planes=tri,
                          mlp_coarse=mlp_c.params, mlp_fine=mlp_f.params)
    parsed = unpack_bitstream(data)
    for ks in DESK.tri_config.keys():
        assert parsed.planes.data(ks).tobytes() == tri.data(ks).tobytes()
    for name in sorted(mlp_c.params):
        assert parsed.mlp_dense["coarse"][name].tobytes() == \
            mlp_c.params[name].tobytes()
        assert parsed.mlp_dense["fine"][name].tobytes() == \
            mlp_f.params[name].tobytes()


def test_corruption_detected():
    idx = random_indices(DESK, 4)
    data = bytearray(pack_bitstream("wo-ft", DESK, idx))
    with pytest.raises(BitstreamError):
        unpack_bitstream(b"XXXX" + bytes(data[4:]))
    flipped = data.copy()
    flipped[-1] ^= 0xFF
    with pytest.raises(BitstreamError):
        unpack_bitstream(bytes(flipped))
    with pytest.raises(BitstreamError):
        unpack_bitstream(bytes(data[:-3]))
    bad_version = data.copy()
    bad_version[4] = 9
    with pytest.raises(BitstreamError):
        unpack_bitstream(bytes(bad_version))


def test_pack_validates_inputs():
    idx = random_indices(DESK)
    with pytest.raises(ContractViolation):
        pack_bitstream("peft", DESK, idx)           # missing components
    with pytest.raises(ContractViolation):
        pack_bitstream("warp", DESK, idx)
    with pytest.raises(ContractViolation):
        pack_bitstream("wo-ft", DESK, idx.reshape(3, -1))
    bad = idx.copy()
    bad[0, 0, 0] = DESK.codebook_size
    with pytest.raises(ContractViolation):
        pack_bitstream("wo-ft", DESK, bad)


def test_size_report_totals_match_file_size():
    delta, coarse, fine = peft_payload(DESK, seed=5)
    idx = random_indices(DESK, 5)
    data = pack_bitstream("peft", DESK, idx, delta=delta,
                          adapters_coarse=coarse.adapters,
                          adapters_fine=fine.adapters)
    report = size_report(data)
    assert report["total"]["bytes"] == len(data)
    parts = sum(report[k]["bytes"] for k in ("codes", "feature", "mlp",
                                             "overhead"))
    assert parts == len(data)
    md = size_report_markdown(report, "peft")
    assert "| total |" in md


def test_paper_scale_feature_row():
    layout = CodecLayout(channels=32, resolutions=(64, 128, 256), code_dim=16,
                         code_res=16, codebook_size=1024, delta_rank=1,
                         adapter_rank=4, mlp_profile="objaverse", pe_freqs=4)
    delta = init_delta(layout.tri_config, 1, seed=0)
    mlp = layout.mlp_spec()
    coarse = wrap_mlp(mlp, 4, seed=0)
    fine = wrap_mlp(mlp, 4, seed=1)
    idx = np.zeros((3, 16, 16), dtype=np.int64)
    data = pack_bitstream("peft", layout, idx, delta=delta,
                          adapters_coarse=coarse.adapters,
                          adapters_fine=fine.adapters)
    report = size_report(data)
    # raw matrices (1,032,192 B) + vectors (384 B) -> 1.033 MB at 3 decimals
    assert round(report["feature"]["mb"], 3) == 1.033
    assert abs(report["mlp"]["mb"] - 0.233) / 0.233 < 0.15
    # index payload: 768 symbols at 10 bits
    assert report["codes"]["bytes"] == 960


def test_index_bits_scale_with_codebook():
    small = CodecLayout(channels=4, resolutions=(8, 16, 32), code_dim=4,
                        code_res=2, codebook_size=4096)
    assert small.index_bits == 12
    assert DESK.index_bits == 4
