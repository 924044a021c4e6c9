import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fblab.fieldio import (
    DumpError,
    field_bytes,
    field_from_bytes,
    load_media,
    load_solution,
    read_field,
    save_media,
    save_solution,
    write_field,
)
from fblab.grid import Grid, MatrixField, ScalarField, VectorField
from fblab.instances import get_problem
from fblab.media import make_test_family
from fblab.solver import solve_problem_P


def test_header_layout_is_exact():
    g = Grid((4, 5), 0.25)
    f = ScalarField(g, np.arange(20, dtype=float).reshape(4, 5))
    buf = field_bytes(f)
    expected = (b"FBL1" + struct.pack("<qqq", 2, 4, 5) + struct.pack("<ddd", 0.25, 1.0, 1.25)
                + struct.pack("<20d", *range(20)))
    assert buf == expected


def test_vector_payload_keeps_components_together():
    g = Grid((4, 4), 0.25)
    vals = np.random.default_rng(0).random((4, 4, 2))
    buf = field_bytes(VectorField(g, vals))
    payload = np.frombuffer(buf[4 + 8 * 3 + 8 * 3:], dtype="<f8")
    assert payload[0] == vals[0, 0, 0] and payload[1] == vals[0, 0, 1] and payload[2] == vals[0, 1, 0]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([0, 1, 2]), st.sampled_from([(4, 6), (5, 4, 4)]))
def test_roundtrip_is_bit_exact(seed, rank, dims):
    g = Grid(dims, 0.125)
    cls = (ScalarField, VectorField, MatrixField)[rank]
    vals = np.random.default_rng(seed).normal(size=dims + (g.n,) * rank)
    back = field_from_bytes(field_bytes(cls(g, vals)))
    assert type(back) is cls and back.grid == g
    assert back.values.tobytes() == vals.tobytes()


def test_bad_dumps():
    g = Grid((4, 4), 0.25)
    good = field_bytes(ScalarField.constant(g, 1.0))
    with pytest.raises(DumpError):
        field_from_bytes(b"XXXX" + good[4:])
    with pytest.raises(DumpError):
        field_from_bytes(good[:-8])
    with pytest.raises(DumpError):
        field_from_bytes(good[:10])


def test_file_roundtrip(tmp_path):
    g = Grid.unit_square(8)
    f = g.sample(lambda x, y: x * y)
    write_field(tmp_path / "f.fbl", f)
    assert np.array_equal(read_field(tmp_path / "f.fbl").values, f.values)


def test_media_and_solution_roundtrip(tmp_path):
    g = Grid.unit_square(32)
    m = make_test_family(g, "holder_xprime")
    save_media(tmp_path / "media", m)
    back = load_media(tmp_path / "media")
    assert back.lam == m.lam and back.f_bar == m.f_bar
    assert np.array_equal(back.A.values, m.A.values) and np.array_equal(back.f.values, m.f.values)
    assert back.provenance["generator"] == "holder_xprime"
    p = get_problem("dam_exact")
    mm, bc, cfg = p.setup(1 / 32)
    sol = solve_problem_P(mm, bc, cfg)
    save_solution(tmp_path / "sol", sol, {"eps_factor": 0.5})
    s2 = load_solution(tmp_path / "sol")
    assert np.array_equal(s2.u.values, sol.u.values) and np.array_equal(s2.chi.values, sol.chi.values)
    assert s2.eps_penal == sol.eps_penal and s2.residual_comp == sol.residual_comp
