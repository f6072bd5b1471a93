import json
import struct

import numpy as np
import pytest

from edgebayes import archive
from edgebayes.distill import END2, Student
from edgebayes.ensemble import PosteriorEnsemble, posterior_predictive
from edgebayes.errors import CorruptionError, FormatError, ParameterError, VersionError
from edgebayes.nn import MlpSpec, Tensor, dequantize, init_params, quantize
from edgebayes.pruning import PER_MEMBER, SHARED, prune_ensemble
from edgebayes.sparse import (COO_PER_MEMBER, SIE, SparseEnsemble, dense_to_coo, measure_serialized, pack_shared,
                              storage_words)


def _ens(spec=MlpSpec((3, 8, 4, 2)), S=3):
    return PosteriorEnsemble(spec, [init_params(spec, s) for s in range(S)], {"sampler": "test", "seeds": [0]})


def test_magic_bytes():
    for obj in (_ens(), prune_ensemble(_ens(), 50, SHARED)):
        assert archive.encode(obj)[:4] == bytes([0x42, 0x45, 0x41, 0x31])


def test_save_load_save_identical(tmp_path):
    e = _ens()
    a, b = tmp_path / "a.bea", tmp_path / "b.bea"
    archive.save_archive(e, a)
    archive.save_archive(archive.load_archive(a), b)
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("fmt", ["dense", "coo", "sie"])
@pytest.mark.parametrize("dtype", ["f32", "f16", "q8"])
def test_round_trip_formats(fmt, dtype):
    e = _ens()
    se = prune_ensemble(e, 40, SHARED)
    loaded, timings = archive.decode(archive.encode(se, fmt=fmt, dtype=dtype))
    got = loaded.to_ensemble() if isinstance(loaded, SparseEnsemble) else loaded
    ref = se.to_thetas()
    # per-blob error bound of the storage dtype
    if dtype == "f32":
        np.testing.assert_array_equal(got.members, ref.astype(np.float32).astype(np.float64))
    elif dtype == "f16":
        np.testing.assert_allclose(got.members, ref, rtol=2 ** -10, atol=1e-7)
    else:
        assert np.abs(got.members - ref).max() <= np.abs(ref).max() / 127 / 2 * (1 + 1e-9)
    assert got.meta["sampler"] == "test"
    assert timings.structure_s >= 0 and timings.stream_s >= 0
    if fmt != "dense":
        assert loaded.fmt == fmt


def test_q8_blob_matches_tensor_quantization():
    e = _ens(MlpSpec((2, 5, 2)), 2)
    loaded = archive.decode(archive.encode(e, dtype="q8"))[0]
    ls = e.spec.layout[0]
    w = e.members[1, ls.w_off:ls.b_off]
    ref = dequantize(quantize(Tensor.from_array(w), "q8")).data
    np.testing.assert_array_equal(loaded.members[1, ls.w_off:ls.b_off], ref)


def test_sie_cross_module_accounting():
    # N = 10000 non-zeros shared by S = 30 members
    spec = MlpSpec((200, 100))
    rng = np.random.default_rng(0)
    keep = np.zeros(spec.n_params, dtype=bool)
    keep[rng.choice(20000, 10000, replace=False)] = True
    thetas = rng.normal(size=(30, spec.n_params)) + 5.0
    from edgebayes.sparse import sparsify_ensemble
    keep[20000:] = True
    se = sparsify_ensemble(PosteriorEnsemble(spec, thetas), keep, SIE)
    acct = archive.account(archive.encode(se))
    assert acct.payload_bytes == 4 * storage_words(SIE, 10000, 30)
    assert acct.index_words == 20000 and acct.value_words == 300000
    assert acct.dense_bytes == 30 * 100 * 4


def test_coo_to_sie_uses_union_support():
    e = _ens(MlpSpec((4, 6, 2)), 3)
    pm = prune_ensemble(e, 60, PER_MEMBER)
    loaded = archive.decode(archive.encode(pm, fmt=SIE))[0]
    assert loaded.fmt == SIE
    np.testing.assert_allclose(loaded.to_thetas(), pm.to_thetas(), rtol=1e-7)


def test_bare_matrices_round_trip():
    rng = np.random.default_rng(1)
    keep = rng.random((6, 7)) < 0.4
    mats = [dense_to_coo(np.where(keep, rng.normal(size=keep.shape) + 3, 0.0)) for _ in range(3)]
    sie = pack_shared(mats)
    got = archive.decode(archive.encode(sie))[0]
    np.testing.assert_allclose(got.member_vals, sie.member_vals, rtol=1e-7)
    got_list = archive.decode(archive.encode(mats))[0]
    assert len(got_list) == 3 and got_list[2].same_support(mats[2])
    assert measure_serialized(mats).payload_bytes == 4 * storage_words(COO_PER_MEMBER, mats[0].nnz, 3)


def test_student_round_trip():
    spec = MlpSpec((2, 4, 3))
    st = Student(spec, init_params(spec, 0), END2, {"method": END2, "loss_history": [1.0, 0.5]})
    got = archive.decode(archive.encode(st))[0]
    assert got.method == END2 and got.provenance["loss_history"] == [1.0, 0.5]
    np.testing.assert_allclose(got.alpha(np.ones(2)), st.alpha(np.ones(2)), rtol=1e-6)


def test_structure_blobs_come_first():
    se = prune_ensemble(_ens(), 50, SHARED)
    header, _ = archive.read_header(archive.encode(se))
    blobs = header["blobs"]
    n_struct = 2 * se.spec.n_layers
    assert all("member" not in b for b in blobs[:n_struct])
    members = [b["member"] for b in blobs[n_struct:]]
    assert members == sorted(members)


def test_header_is_sorted_compact_json():
    buf = archive.encode(_ens())
    _, _, hlen = struct.unpack_from("<4sII", buf)
    raw = buf[12:12 + hlen].decode()
    assert raw == json.dumps(json.loads(raw), sort_keys=True, separators=(",", ":"))


def test_bad_magic():
    buf = bytearray(archive.encode(_ens()))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError):
        archive.decode(bytes(buf))
    with pytest.raises(FormatError):
        archive.decode(b"BE")


def test_newer_version():
    buf = bytearray(archive.encode(_ens()))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError):
        archive.decode(bytes(buf))


def test_truncated_payload_names_blob():
    buf = archive.encode(_ens())
    header, _ = archive.read_header(buf)
    last = len(header["blobs"]) - 1
    with pytest.raises(CorruptionError) as info:
        archive.decode(buf[:-3])
    assert info.value.blob_index == last
    assert f"blob {last}" in str(info.value)


def test_garbled_header():
    buf = bytearray(archive.encode(_ens()))
    buf[12] = 0xFF
    with pytest.raises(FormatError):
        archive.decode(bytes(buf))


def test_missing_header_fields():
    h = json.dumps({"blobs": [], "kind": "ensemble"}).encode()
    with pytest.raises(FormatError):
        archive.decode(struct.pack("<4sII", b"BEA1", 1, len(h)) + h)


def test_unknown_format_and_dtype():
    with pytest.raises(ParameterError):
        archive.encode(_ens(), fmt="csr")
    with pytest.raises(ParameterError):
        archive.encode(_ens(), dtype="bf16")


def test_pack_timed_member_times():
    buf, total, per_member = archive.pack_timed(_ens(S=5))
    assert len(per_member) == 5 and total >= sum(per_member) * 0.5
    assert archive.decode(buf)[0].size == 5


def test_loaded_predictions_match(tmp_path):
    e = _ens()
    path = tmp_path / "e.bea"
    archive.save_archive(e, path)
    x = np.array([0.1, -0.3, 0.7])
    np.testing.assert_allclose(posterior_predictive(archive.load_archive(path), x).probs,
                               posterior_predictive(e, x).probs, rtol=1e-6)
