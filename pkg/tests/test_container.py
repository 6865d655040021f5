import struct

import numpy as np
import pytest

from mergcn import container


def test_header_and_entry_layout():
    buf = container.encode({"ab": np.array([[1.0, 2.0]])})
    assert buf[:4] == b"MERT"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<H", buf, 12) == (2,)
    assert buf[14:16] == b"ab"
    assert struct.unpack_from("<I", buf, 16) == (2,)
    assert struct.unpack_from("<2Q", buf, 20) == (1, 2)
    assert struct.unpack_from("<2d", buf, 36) == (1.0, 2.0)
    assert len(buf) == 36 + 16


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    entries = {"backbone.stem.weight": rng.standard_normal((2, 1, 3, 7, 7)), "µ": np.arange(3.0)}
    path = tmp_path / "x.mert"
    container.save(path, entries)
    back = container.load(path)
    assert list(back) == list(entries)
    for k in entries:
        assert np.array_equal(back[k], entries[k])


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XERT" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
        lambda b: b[:-3],
        lambda b: b + b"\x00",
    ],
)
def test_corrupt_files_rejected(mutate):
    good = container.encode({"a": np.ones(3)})
    with pytest.raises(container.ContainerError):
        container.decode(mutate(good))
