import struct

import numpy as np
import pytest

from evonas import weights
from evonas.compiler import compile_genome, init_parameters
from evonas.genome import load_fixture


def _params(dtype=np.float32):
    plan = compile_genome(load_fixture("checkerboard"), (3, 16, 16), 10**9)
    p = init_parameters(plan, np.random.default_rng(0), dtype)
    p.buffers["n5.bn.mean"][:] = [0.1, 0.2, 0.3]
    return p


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip(dtype, tmp_path):
    p = _params(dtype)
    weights.save(p, tmp_path / "w.bin")
    q = weights.load(tmp_path / "w.bin")
    assert set(q.tensors) == set(p.tensors) and set(q.buffers) == set(p.buffers)
    for k in p.tensors:
        assert q.tensors[k].data.dtype == dtype
        assert q.tensors[k].data.tobytes() == p.tensors[k].data.tobytes()
    for k in p.buffers:
        np.testing.assert_array_equal(q.buffers[k], p.buffers[k])


def test_header_layout():
    blob = weights.dumps(_params())
    assert blob[:4] == b"EVNW"
    version, count = struct.unpack_from("<HI", blob, 4)
    assert version == 1 and count == len(_params().tensors) + len(_params().buffers)
    role, nlen = struct.unpack_from("<BH", blob, 10)
    assert role == 0 and blob[13:13 + nlen].decode().startswith("n1.")


def test_dumps_deterministic():
    assert weights.dumps(_params()) == weights.dumps(_params())


@pytest.mark.parametrize("blob", [b"", b"XXXX", b"EVNW\x02\x00\x00\x00\x00\x00", b"EVNW\x01\x00\x05\x00\x00\x00"])
def test_corrupt_blobs(blob):
    with pytest.raises(weights.WeightsFormatError):
        weights.loads(blob)


def test_truncated_blob():
    blob = weights.dumps(_params())
    with pytest.raises(weights.WeightsFormatError):
        weights.loads(blob[:-5])
