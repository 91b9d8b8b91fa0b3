import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mdnkit import persist
from mdnkit.dynamics import Dataset, gen_gravity, gen_inverse_sine
from mdnkit.mdn import build_model
from mdnkit.persist import FormatVersionError, PersistError


@pytest.fixture
def ckpt(tmp_path):
    m = build_model("mdn", 2, 3, K=4, width=8, layers=2, seed=11)
    path = tmp_path / "m.ckpt"
    persist.save_checkpoint(path, m, seed=11, step=7, extra={"note": "x"})
    return m, path


def test_checkpoint_round_trip_bit_exact(ckpt, rng):
    m, path = ckpt
    back, head = persist.load_checkpoint(path, with_header=True)
    assert head["seed"] == 11 and head["step"] == 7 and head["extra"] == {"note": "x"}
    assert back.descriptor() == m.descriptor()
    for k, v in m.params.arrays().items():
        assert np.array_equal(back.params[k].data, v)
    x = rng.normal(size=(5, 2))
    assert np.array_equal(back.predict_raw(x), m.predict_raw(x))


def test_save_is_byte_deterministic(ckpt, tmp_path):
    m, path = ckpt
    persist.save_checkpoint(tmp_path / "again.ckpt", m, seed=11, step=7, extra={"note": "x"})
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_rnn_checkpoint(tmp_path):
    m = build_model("rnn_mdn", 3, 3, K=2, width=5, layers=1, seed=2)
    persist.save_checkpoint(tmp_path / "r.ckpt", m)
    assert persist.load_checkpoint(tmp_path / "r.ckpt").n_params() == m.n_params()


def test_corrupted_byte_rejected(ckpt):
    _, path = ckpt
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(PersistError, match="checksum"):
        persist.load_checkpoint(path)


def test_truncation_rejected(ckpt):
    _, path = ckpt
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(PersistError):
        persist.load_checkpoint(path)
    path.write_bytes(blob[:10])
    with pytest.raises(PersistError):
        persist.load_checkpoint(path)


def test_newer_major_version_rejected(ckpt):
    _, path = ckpt
    blob = path.read_bytes().replace(b"MDNKIT-CKPT 1.0", b"MDNKIT-CKPT 2.0", 1)
    path.write_bytes(blob)
    with pytest.raises(FormatVersionError):
        persist.load_checkpoint(path)


def test_newer_minor_version_accepted(ckpt):
    _, path = ckpt
    path.write_bytes(path.read_bytes().replace(b"MDNKIT-CKPT 1.0", b"MDNKIT-CKPT 1.7", 1))
    persist.load_checkpoint(path)


def test_wrong_kind_rejected(ckpt):
    _, path = ckpt
    with pytest.raises(PersistError, match="dataset"):
        persist.load_dataset(path)


def _rewrite_header(path, fn):
    blob = path.read_bytes()
    a = blob.index(b"\n")
    b = blob.index(b"\n", a + 1)
    head = fn(json.loads(blob[a + 1:b]))
    path.write_bytes(blob[:a + 1] + json.dumps(head, sort_keys=True, separators=(",", ":")).encode() + blob[b:])


def test_unknown_architecture_rejected(ckpt):
    _, path = ckpt

    def edit(h):
        h["architecture"]["kind"] = "transformer"
        return h
    _rewrite_header(path, edit)
    with pytest.raises(PersistError, match="architecture"):
        persist.load_checkpoint(path)


def test_architecture_shape_mismatch_rejected(ckpt):
    _, path = ckpt

    def edit(h):
        h["architecture"]["K"] = 5
        return h
    _rewrite_header(path, edit)
    with pytest.raises(PersistError, match="do not match"):
        persist.load_checkpoint(path)


def test_dataset_round_trip_and_regenerate(tmp_path):
    ds = gen_gravity(25, case=1, seed=3)
    persist.save_dataset(tmp_path / "g.data", ds)
    back, head = persist.load_dataset(tmp_path / "g.data", with_header=True)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.Y, ds.Y) and back.meta == ds.meta
    assert head["N"] == 25
    re = persist.regenerate_from_file(tmp_path / "g.data")
    assert np.array_equal(re.Y, ds.Y)


def test_empty_dataset_refused(tmp_path):
    with pytest.raises(PersistError):
        persist.save_dataset(tmp_path / "e.data", Dataset(np.zeros((0, 1)), np.zeros((0, 1))))
    assert not (tmp_path / "e.data").exists()


def test_dataset_header_mismatch(tmp_path):
    path = tmp_path / "s.data"
    persist.save_dataset(path, gen_inverse_sine(10, seed=0))

    def edit(h):
        h["N"] = 11
        return h
    _rewrite_header(path, edit)
    with pytest.raises(PersistError, match="disagree"):
        persist.load_dataset(path)


def test_payload_little_endian(tmp_path):
    ds = Dataset(np.array([[1.5]]), np.array([[-2.0]]))
    persist.save_dataset(tmp_path / "t.data", ds)
    blob = (tmp_path / "t.data").read_bytes()
    assert blob.endswith(np.array([1.5, -2.0], dtype="<f8").tobytes())
    assert blob.startswith(b"MDNKIT-DATA 1.0\n")


def test_no_temporary_files_left(ckpt):
    _, path = ckpt
    assert [p.name for p in path.parent.iterdir()] == ["m.ckpt"]


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 3)),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_property_dataset_bytes_round_trip(tmp_path_factory, X):
    path = tmp_path_factory.mktemp("p") / "x.data"
    ds = Dataset(X, -X, {"generator": "custom"})
    persist.save_dataset(path, ds)
    back = persist.load_dataset(path)
    assert back.X.tobytes() == ds.X.tobytes() and back.Y.tobytes() == ds.Y.tobytes()
