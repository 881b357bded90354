import struct

import numpy as np
import pytest

from graphemelab.checkpoint import (
    MAGIC,
    checkpoint_io,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from graphemelab.errors import BadMagic, IoFailure, TruncatedFile, UnsupportedVersion
from graphemelab.numerics import Prng


def sample_tensors() -> dict[str, np.ndarray]:
    prng = Prng(0)
    return {
        "encoder.embedding": prng.gaussian_array((5, 3)),
        "encoder.bank1.w": prng.gaussian_array((1, 3, 2)),
        "decoder.out.b": prng.gaussian_array((4,)),
        "config.conv_k": np.array(8.0),
    }


def test_round_trip_is_exact():
    tensors = sample_tensors()
    restored = decode_checkpoint(encode_checkpoint(tensors))
    assert sorted(restored) == sorted(tensors)
    for name, value in tensors.items():
        assert restored[name].shape == value.shape
        np.testing.assert_array_equal(restored[name], value)


def test_insertion_order_does_not_change_bytes():
    tensors = sample_tensors()
    reversed_order = dict(reversed(list(tensors.items())))
    assert encode_checkpoint(tensors) == encode_checkpoint(reversed_order)


def test_header_layout():
    payload = encode_checkpoint({"x": np.array([1.0])})
    assert payload[:4] == MAGIC
    assert struct.unpack("<II", payload[4:12]) == (1, 1)


def test_bad_magic():
    with pytest.raises(BadMagic):
        decode_checkpoint(b"NOPE" + bytes(8))


def test_unsupported_version():
    with pytest.raises(UnsupportedVersion) as info:
        decode_checkpoint(MAGIC + struct.pack("<II", 7, 0))
    assert info.value.version == 7


def test_truncated_data_names_the_tensor():
    payload = encode_checkpoint({"alpha": np.arange(4.0)})
    with pytest.raises(TruncatedFile) as info:
        decode_checkpoint(payload[:-8])
    assert info.value.tensor_name == "alpha"


def test_truncated_header():
    with pytest.raises(TruncatedFile) as info:
        decode_checkpoint(MAGIC + b"\x01\x00")
    assert info.value.tensor_name == "<header>"


def test_save_and_load(tmp_path):
    path = tmp_path / "nested" / "model.gel"
    save_checkpoint(sample_tensors(), path)
    assert not path.with_name("model.gel.tmp").exists()
    np.testing.assert_array_equal(load_checkpoint(path)["encoder.embedding"],
                                  sample_tensors()["encoder.embedding"])


def test_checkpoint_io_dispatch(tmp_path):
    path = tmp_path / "probe.gel"
    assert checkpoint_io(path, {"w": np.ones((2, 2))}) is None
    np.testing.assert_array_equal(checkpoint_io(path)["w"], np.ones((2, 2)))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(IoFailure):
        load_checkpoint(tmp_path / "absent.gel")
