import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.errors import (
    BadMagicError,
    EmptyInputError,
    IncompatibleShapesError,
    LengthMismatchError,
    NonFiniteValueError,
    NumericOverflowError,
    VersionMismatchError,
)
from fedsim.params import ParamVector, deserialize, linear_combine, serialize, sq_l2_distance


def pv(*values):
    return ParamVector(values, [("w", (len(values),))])


def test_construction_rejects_bad_length_and_nonfinite():
    with pytest.raises(IncompatibleShapesError):
        ParamVector([1.0, 2.0, 3.0], [("w", (2,))])
    with pytest.raises(NonFiniteValueError):
        ParamVector([1.0, np.nan], [("w", (2,))])


def test_values_are_read_only_copies():
    src = np.array([1.0, 2.0])
    p = ParamVector(src, [("w", (2,))])
    src[0] = 99.0
    assert p.values[0] == 1.0
    with pytest.raises(ValueError):
        p.values[0] = 5.0


def test_tensors_follow_manifest():
    p = ParamVector(np.arange(7.0), [("a", (2, 3)), ("b", (1,))])
    t = p.tensors()
    assert t["a"].shape == (2, 3)
    assert t["b"].tolist() == [6.0]


@pytest.mark.parametrize(
    "terms, expected",
    [
        ([(1.0, (1, 2))], [1, 2]),
        ([(0.5, (1, 3)), (0.5, (3, 5))], [2, 4]),
        ([(0.25, (4, 0)), (0.75, (0, 4))], [1, 3]),
    ],
)
def test_linear_combine_examples(terms, expected):
    out = linear_combine([(c, pv(*v)) for c, v in terms])
    assert out.values.tolist() == expected


def test_linear_combine_errors():
    with pytest.raises(EmptyInputError):
        linear_combine([])
    with pytest.raises(IncompatibleShapesError):
        linear_combine([(1.0, pv(1, 2)), (1.0, pv(1, 2, 3))])
    with pytest.raises(NumericOverflowError):
        linear_combine([(1e308, pv(1e308)), (1e308, pv(1e308))])


def test_linear_combine_is_linear():
    rng = np.random.default_rng(3)
    a, b = pv(*rng.normal(size=50)), pv(*rng.normal(size=50))
    s = 2.5
    lhs = linear_combine([(s, linear_combine([(0.3, a), (0.7, b)]))]).values
    rhs = linear_combine([(0.3, linear_combine([(s, a)])), (0.7, linear_combine([(s, b)]))]).values
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * np.abs(rhs).max())


def test_sq_l2_distance_examples():
    assert sq_l2_distance(pv(1, 2), pv(1, 2)) == 0.0
    assert sq_l2_distance(pv(0, 0), pv(3, 4)) == 25.0
    with pytest.raises(IncompatibleShapesError):
        sq_l2_distance(pv(0, 0), pv(0, 0, 0))


def test_sq_l2_distance_matches_naive_loop():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=100), rng.normal(size=100)
    naive = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        naive += (x - y) * (x - y)
    got = sq_l2_distance(pv(*a), pv(*b))
    assert got == pytest.approx(naive, rel=1e-12)
    assert got == sq_l2_distance(pv(*b), pv(*a))


manifests = st.lists(
    st.tuples(
        st.text(min_size=0, max_size=8),
        st.lists(st.integers(min_value=0, max_value=4), min_size=0, max_size=3),
    ),
    max_size=4,
)


@settings(max_examples=100, deadline=None)
@given(manifests, st.integers(min_value=0, max_value=2**32 - 1))
def test_serialize_round_trip_is_bit_exact(manifest, seed):
    size = sum(int(np.prod(d)) if d else 1 for _, d in manifest)
    values = np.random.default_rng(seed).normal(size=size) * 1e3
    p = ParamVector(values, manifest)
    q = deserialize(serialize(p))
    assert q == p
    assert q.values.tobytes() == p.values.tobytes()


def test_serialize_layout():
    p = ParamVector([1.5, -2.0], [("ab", (2,))])
    data = serialize(p)
    expected = (
        b"FPV1" + struct.pack("<HI", 1, 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<BI", 1, 2)
        + struct.pack("<Q", 2) + struct.pack("<2d", 1.5, -2.0)
    )
    assert data == expected


def test_empty_vector_round_trips():
    p = ParamVector([], [])
    assert len(p) == 0
    assert deserialize(serialize(p)) == p


def test_decode_errors_are_distinct():
    data = serialize(pv(1.0, 2.0))
    with pytest.raises(BadMagicError):
        deserialize(b"XXXX" + data[4:])
    with pytest.raises(VersionMismatchError):
        deserialize(data[:4] + struct.pack("<H", 2) + data[6:])
    with pytest.raises(LengthMismatchError):
        deserialize(data[:-3])
    with pytest.raises(LengthMismatchError):
        deserialize(data + b"\x00")
    bad = bytearray(data)
    bad[-8:] = struct.pack("<d", float("inf"))
    with pytest.raises(NonFiniteValueError):
        deserialize(bytes(bad))
