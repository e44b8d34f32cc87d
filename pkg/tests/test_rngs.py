import numpy as np
import pytest

from tilechange.errors import DomainError
from tilechange.rngs import substream


class TestSubstreams:
    def test_same_name_same_stream(self):
        a = substream(7, "synth").standard_normal(8)
        b = substream(7, "synth").standard_normal(8)
        np.testing.assert_array_equal(a, b)

    def test_names_are_independent(self):
        a = substream(7, "synth").standard_normal(8)
        b = substream(7, "init").standard_normal(8)
        assert not np.array_equal(a, b)

    def test_indices_extend_streams(self):
        a = substream(7, "shuffle", 0).standard_normal(4)
        b = substream(7, "shuffle", 1).standard_normal(4)
        assert not np.array_equal(a, b)

    def test_seed_changes_everything(self):
        a = substream(1, "bootstrap").standard_normal(4)
        b = substream(2, "bootstrap").standard_normal(4)
        assert not np.array_equal(a, b)

    def test_unknown_stream_rejected(self):
        with pytest.raises(DomainError):
            substream(0, "nonsense")
