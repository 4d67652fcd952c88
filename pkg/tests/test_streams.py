import numpy as np
import pytest

from nsdecal.streams import PURPOSES, stream


def test_same_key_same_draws():
    a = stream(7, "paths", 1, 3).standard_normal(5)
    b = stream(7, "paths", 1, 3).standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_distinct_keys_give_distinct_draws():
    base = stream(7, "paths", 1, 3).standard_normal(4)
    for other in [stream(8, "paths", 1, 3), stream(7, "sgld", 1, 3), stream(7, "paths", 2, 3),
                  stream(7, "paths", 1, 4)]:
        assert not np.array_equal(base, other.standard_normal(4))


def test_purpose_codes_are_unique():
    assert len(set(PURPOSES.values())) == len(PURPOSES)


def test_invalid_keys():
    with pytest.raises(KeyError):
        stream(0, "nope")
    with pytest.raises(ValueError):
        stream(-1, "data")
