from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eggroll.egg.tables import LOG2_MAX_INPUT, divide_table, exp2_table, get_tables, log2_boundaries, log2_lookup

getcontext().prec = 60
LN2 = Decimal(2).ln()


def dec_round(v: Decimal) -> int:
    return int(v.to_integral_value(rounding="ROUND_HALF_EVEN"))


def oracle_exp2(i: int) -> int:
    return dec_round(16 * Decimal(2) ** (Decimal(i) / 16))


def oracle_log2(i: int) -> int:
    return dec_round(16 * (Decimal(i) / 16).ln() / LN2)


def test_exp2_matches_decimal_oracle():
    assert exp2_table().tolist() == [oracle_exp2(i) for i in range(256)]


def test_exp2_endpoints():
    t = exp2_table()
    assert t[0] == 16 and t[16] == 32 and t[255] == oracle_exp2(255)
    assert np.all(np.diff(t) >= 0)
    assert 256 * int(t[255]) <= LOG2_MAX_INPUT


def test_log2_near_every_boundary():
    # both sides of every rounding boundary
    for b in log2_boundaries().tolist():
        for i in (b - 1, b):
            if i >= 1:
                assert log2_lookup(i) == oracle_log2(i), i


@settings(max_examples=300, deadline=None)
@given(i=st.integers(1, LOG2_MAX_INPUT))
def test_log2_random_inputs(i):
    assert log2_lookup(i) == oracle_log2(i)


def test_log2_examples_and_domain():
    assert log2_lookup(16) == 0 and log2_lookup(32) == 16 and log2_lookup(1) == -64
    assert np.array_equal(log2_lookup(np.array([16, 256, 4096])), [0, 64, 128])
    for bad in (0, -3, LOG2_MAX_INPUT + 1):
        with pytest.raises(ValueError):
            log2_lookup(bad)
    with pytest.raises(TypeError):
        log2_lookup(np.array([2.0]))


def test_divide_table_exhaustive():
    D = divide_table()
    assert D.shape == (65536, 256) and D.dtype == np.int8
    a = np.arange(-32768, 32768, dtype=np.int64)
    assert not D[:, 0].any()
    for b in range(1, 256):
        q = np.trunc(a / b)  # a/b is exact enough for |a| < 2**15: no value lies near an integer boundary
        assert np.array_equal(D[:, b], np.clip(q, -127, 127).astype(np.int8)), b
    assert (D != -128).all()


def test_divide_examples():
    t = get_tables()
    assert t.divide(256, 16) == 16
    assert t.divide(-7, 2) == -3
    assert t.divide(30000, 1) == 127 and t.divide(-30000, 1) == -127
    assert t.divide(5, 0) == 0


def test_tables_read_only():
    with pytest.raises(ValueError):
        get_tables().divide_rows[1, 0] = 3
