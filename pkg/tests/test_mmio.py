import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mlest import mmio

finite = st.floats(allow_nan=False, allow_infinity=False, min_value=-1e300, max_value=1e300)


def test_symmetric_round_trip(tmp_path, rng):
    B = sp.random(30, 30, density=0.2, random_state=1, format="csr")
    A = (B + B.T + sp.identity(30)).tocsr()
    A.data *= np.exp(rng.uniform(-30, 30, A.nnz))
    A = ((A + A.T) * 0.5).tocsr()
    path = mmio.write_matrix(tmp_path / "A.mtx", A)
    text = path.read_text().splitlines()
    assert text[0] == "%%MatrixMarket matrix coordinate real symmetric"
    assert int(text[1].split()[2]) == sp.tril(A).nnz
    back = mmio.read_matrix(path)
    assert (back != A).nnz == 0


def test_general_round_trip(tmp_path):
    P = sp.random(12, 5, density=0.4, random_state=2, format="csr")
    path = mmio.write_matrix(tmp_path / "P.mtx", P)
    assert "general" in path.read_text().splitlines()[0]
    assert (mmio.read_matrix(path) != P).nnz == 0
    with pytest.raises(ValueError):
        mmio.write_matrix(tmp_path / "bad.mtx", P[:5], symmetric=True)


@settings(max_examples=30, deadline=None)
@given(values=st.lists(finite, min_size=1, max_size=20))
def test_vector_round_trip_lossless(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("v") / "x.mtx"
    x = np.array(values)
    mmio.write_vector(path, x, comment="test vector")
    assert path.read_text().startswith("%%MatrixMarket matrix array real general\n%test vector\n")
    np.testing.assert_array_equal(mmio.read_vector(path), x)


def _write(tmp_path, text, name="m.mtx"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_truncated_file_names_file_and_line(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real general\n% c\n3 3 3\n1 1 1.0\n2 2 2.0\n")
    with pytest.raises(mmio.MatrixMarketError) as info:
        mmio.read_matrix(p)
    assert str(p) in str(info.value) and ":6:" in str(info.value)
    assert info.value.line == 6


@pytest.mark.parametrize("text,line", [
    ("%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 1.0\n", 1),
    ("%%MatrixMarket tensor coordinate real general\n1 1 1\n1 1 1.0\n", 1),
    ("%%MatrixMarket matrix coordinate real general\n2 x 1\n1 1 1.0\n", 2),
    ("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n", 3),
    ("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 abc\n", 3),
    ("%%MatrixMarket matrix coordinate real symmetric\n2 2 1\n1 2 1.0\n", 3),
    ("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 1.0\n2 2 1.0\n", 4),
    ("%%MatrixMarket matrix array real general\n2 1\n1.0\n", 4),
    ("", 1),
])
def test_parse_errors(tmp_path, text, line):
    p = _write(tmp_path, text)
    with pytest.raises(mmio.MatrixMarketError) as info:
        mmio.read(p)
    assert info.value.line == line
    assert str(p) in str(info.value)


def test_kind_mismatch(tmp_path):
    v = mmio.write_vector(tmp_path / "v.mtx", np.ones(3))
    m = mmio.write_matrix(tmp_path / "m.mtx", sp.identity(3))
    with pytest.raises(mmio.MatrixMarketError):
        mmio.read_matrix(v)
    with pytest.raises(mmio.MatrixMarketError):
        mmio.read_vector(m)
    with pytest.raises(mmio.MatrixMarketError):
        mmio.read(tmp_path / "missing.mtx")


def test_is_symmetric():
    A = sp.csr_matrix([[1.0, 2.0], [2.0 + 1e-14, 1.0]])
    assert not mmio.is_symmetric(A)
    assert mmio.is_symmetric(A, 1e-12)
    assert not mmio.is_symmetric(sp.csr_matrix([[1.0, 2.0], [2.1, 1.0]]), 1e-12)
    assert not mmio.is_symmetric(sp.csr_matrix(np.ones((2, 3))))
