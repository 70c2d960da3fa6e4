import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lsed import io as lio
from lsed.descriptors import FaceDescriptor
from lsed.dictionary import AtomDictionary, AutoencoderModel, MixtureModel

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_pgm_round_trip(tmp_path, rng):
    img = np.round(rng.random((13, 17)) * 255) / 255
    lio.write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(lio.read_pgm(tmp_path / "a.pgm"), img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n17 13\n255\n")


def test_pgm_16_bit_and_comments(tmp_path):
    raster = np.array([[0, 1000], [65535, 7]], dtype=">u2")
    (tmp_path / "b.pgm").write_bytes(b"P5\n# made by hand\n2 2\n65535\n" + raster.tobytes())
    np.testing.assert_array_equal(lio.read_pgm(tmp_path / "b.pgm"), raster.astype(float) / 65535)


def test_pgm_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(lio.FormatError):
        lio.read_pgm(tmp_path / "c.pgm")
    (tmp_path / "d.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(lio.FormatError):
        lio.read_pgm(tmp_path / "d.pgm")
    with pytest.raises(FileNotFoundError):
        lio.read_pgm(tmp_path / "missing.pgm")


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_raw_image_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("img") / "x.lsk1"
    lio.write_raw_image(path, img)
    back = lio.read_raw_image(path)
    assert back.tobytes() == img.tobytes() and back.shape == img.shape
    assert lio.read_image(path).tobytes() == img.tobytes()


def test_raw_image_header(tmp_path):
    lio.write_raw_image(tmp_path / "h.lsk1", np.zeros((2, 3)))
    buf = (tmp_path / "h.lsk1").read_bytes()
    assert buf[:4] == b"LSK1"
    assert struct.unpack("<II", buf[4:12]) == (3, 2)
    assert len(buf) == 12 + 6 * 8


def unit_columns(rng, d, n):
    D = rng.standard_normal((d, n))
    return D / np.linalg.norm(D, axis=0)


def test_model_round_trips(tmp_path, rng):
    models = [
        AtomDictionary(unit_columns(rng, 5, 9)),
        AutoencoderModel(rng.standard_normal((5, 3)), rng.standard_normal(3), rng.standard_normal((3, 5)), rng.standard_normal(5)),
        MixtureModel(np.array([0.25, 0.75]), rng.standard_normal((2, 5)), rng.uniform(0.1, 1, (2, 5))),
    ]
    for k, m in enumerate(models, 1):
        path = tmp_path / f"m{k}.lskm"
        lio.save_model(path, m)
        buf = path.read_bytes()
        assert buf[:4] == b"LSKM" and buf[4] == k
        back = lio.load_model(path)
        assert type(back) is type(m)
        assert lio.model_to_bytes(back) == buf
        for name in m.__dataclass_fields__:
            assert getattr(back, name).tobytes() == getattr(m, name).tobytes()


def test_dictionary_written_column_major(rng):
    D = AtomDictionary(unit_columns(rng, 3, 4))
    buf = lio.model_to_bytes(D)
    assert struct.unpack("<BII", buf[4:13]) == (1, 3, 4)
    first_atom = np.frombuffer(buf[13 : 13 + 24], dtype="<f8")
    np.testing.assert_array_equal(first_atom, D.atoms[:, 0])


def test_model_errors(rng):
    buf = lio.model_to_bytes(AtomDictionary(unit_columns(rng, 3, 4)))
    with pytest.raises(lio.FormatError):
        lio.model_from_bytes(buf[:-1])
    with pytest.raises(lio.FormatError):
        lio.model_from_bytes(buf + b"\x00")
    with pytest.raises(lio.FormatError):
        lio.model_from_bytes(b"LSKM\x09" + buf[5:])
    with pytest.raises(TypeError):
        lio.model_to_bytes("not a model")


@given(
    arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=finite),
    st.sampled_from(["l1", "sann", "gmm", "holistic"]),
    st.binary(min_size=8, max_size=8),
)
def test_descriptor_round_trip(regions, kind, digest):
    d = FaceDescriptor(regions, kind, digest)
    buf = lio.descriptor_to_bytes(d)
    assert buf[:4] == b"LSKD"
    back = lio.descriptor_from_bytes(buf)
    assert back.regions.tobytes() == d.regions.tobytes()
    assert (back.encoder_kind, back.config_hash) == (kind, digest)
    assert lio.descriptor_to_bytes(back) == buf
