"""
Tests for the .etf container.
"""
import struct

import pytest

from bitstream import Bitstream, BitstreamError, lambda_id


@pytest.fixture
def stream():
    return Bitstream(mode="parallel", variant="joint", image_size=(50, 70), model_hash=b"abcdefgh",
                     lambda_id=lambda_id(0.02), latent_shape=(4, 4, 8), hyper_shape=(4, 1, 2),
                     y_range=(-12, 9), z_range=(-3, 3), segments=[b"\x01\x02", b"", b"xyz"])


class TestBitstream:

    def test_round_trip(self, stream):
        assert Bitstream.from_bytes(stream.to_bytes()) == stream

    def test_length_accounting(self, stream):
        data = stream.to_bytes()
        assert len(data) == len(stream)
        assert stream.payload_bytes == 5

    def test_save_and_load(self, stream, tmp_path):
        path = stream.save(tmp_path / "image.etf")
        assert Bitstream.load(path) == stream

    def test_bad_magic(self, stream):
        data = b"XXXX" + stream.to_bytes()[4:]
        with pytest.raises(BitstreamError, match="magic"):
            Bitstream.from_bytes(data)

    def test_bad_version(self, stream):
        data = stream.to_bytes()
        data = data[:4] + struct.pack("<H", 99) + data[6:]
        with pytest.raises(BitstreamError, match="version"):
            Bitstream.from_bytes(data)

    @pytest.mark.parametrize("cut", [-1, 10])
    def test_truncated(self, stream, cut):
        data = stream.to_bytes()
        with pytest.raises(BitstreamError):
            Bitstream.from_bytes(data[:cut])

    def test_trailing_bytes(self, stream):
        with pytest.raises(BitstreamError, match="segment lengths"):
            Bitstream.from_bytes(stream.to_bytes() + b"\x00")

    def test_unknown_mode(self):
        with pytest.raises(BitstreamError):
            Bitstream("diagonal", "joint", (1, 1), b"12345678", 0, (1, 1, 1), (1, 1, 1),
                      (0, 0), (0, 0))

    def test_hash_length(self):
        with pytest.raises(BitstreamError):
            Bitstream("serial", "joint", (1, 1), b"short", 0, (1, 1, 1), (1, 1, 1), (0, 0), (0, 0))

    def test_lambda_id(self):
        assert lambda_id(0.02) == 20000
        assert lambda_id(0.0067) == 6700
