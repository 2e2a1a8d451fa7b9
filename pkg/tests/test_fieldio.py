import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdrkit.fieldio import (BadMagicError, ComponentMismatchError, FieldFormatError, TruncatedPayloadError,
                            decode_field, encode_field, read_field, read_keyvalue, write_field, write_keyvalue)
from pdrkit.fields import Grid2D, ScalarField, SymMatrixField, VectorField


def test_zero_scalar_roundtrip_bytes(tmp_path):
    f = ScalarField.zeros(Grid2D.unit_square(3))
    p = tmp_path / "z.pdf1"
    write_field(f, p)
    raw = p.read_bytes()
    g = read_field(p)
    assert isinstance(g, ScalarField) and g.grid == f.grid
    assert encode_field(g) == raw


def test_random_symmat_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(7)
    grid = Grid2D.unit_square(65)
    f = SymMatrixField(grid, rng.standard_normal(grid.shape + (3,)))
    p = tmp_path / "s.pdf1"
    write_field(f, p)
    g = read_field(p)
    assert isinstance(g, SymMatrixField)
    assert g.values.tobytes() == f.values.tobytes()


@given(st.sampled_from([ScalarField, VectorField, SymMatrixField]), st.integers(3, 6), st.integers(3, 6),
       st.floats(-2, 2), st.floats(0.1, 3), st.data())
def test_roundtrip_all_kinds(cls, nx, ny, x0, L, data):
    grid = Grid2D(nx, ny, x0, -x0, L, 2 * L)
    shape = grid.shape + ((cls.ncomp,) if cls.ncomp > 1 else ())
    vals = data.draw(arrays(float, shape, elements=st.floats(-1e6, 1e6, allow_nan=False)))
    f = cls(grid, vals)
    blob = encode_field(f)
    g = decode_field(blob)
    assert type(g) is cls and g.grid == grid
    assert encode_field(g) == blob


def test_bad_magic():
    blob = encode_field(ScalarField.zeros(Grid2D.unit_square(3)))
    with pytest.raises(BadMagicError):
        decode_field(b"XXXX" + blob[4:])


def test_truncated_payload():
    blob = encode_field(ScalarField.zeros(Grid2D.unit_square(3)))
    with pytest.raises(TruncatedPayloadError):
        decode_field(blob[:-8])


def test_trailing_bytes():
    blob = encode_field(ScalarField.zeros(Grid2D.unit_square(3)))
    with pytest.raises(FieldFormatError):
        decode_field(blob + b"\0" * 8)


def test_component_mismatch():
    blob = encode_field(VectorField.zeros(Grid2D.unit_square(3)))
    with pytest.raises(ComponentMismatchError):
        decode_field(blob.replace(b" 2\n", b" 3\n", 1))


def test_error_types_are_distinct():
    assert len({BadMagicError, TruncatedPayloadError, ComponentMismatchError}) == 3
    for e in (BadMagicError, TruncatedPayloadError, ComponentMismatchError):
        assert issubclass(e, FieldFormatError)


def test_keyvalue_roundtrip(tmp_path):
    p = tmp_path / "m.txt"
    write_keyvalue(p, {"a": 1.5, "b": True, "c": (1.0, 2.0), "d": "text"})
    assert read_keyvalue(p) == {"a": "1.5", "b": "true", "c": "1.0, 2.0", "d": "text"}


def test_keyvalue_rejects_malformed(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("novalue\n")
    with pytest.raises(FieldFormatError):
        read_keyvalue(p)
