import numpy as np
import pytest

import streams
from errors import ConfigError


def test_named_streams_are_independent_and_repeatable():
    a = streams.named_stream(3, streams.TRAINING).random(4)
    b = streams.named_stream(3, streams.TRAINING).random(4)
    c = streams.named_stream(3, streams.SERVICE).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_negative_seed_is_config_error():
    with pytest.raises(ConfigError) as exc:
        streams.named_stream(-1, streams.NOISE)
    assert exc.value.key == "seed"
    assert exc.value.exit_status == 2


def test_seed_list_forms():
    assert streams.seed_list("0-3") == [0, 1, 2, 3]
    assert streams.seed_list("4, 7") == [4, 7]
    assert streams.seed_list(None, default=5) == [5]
