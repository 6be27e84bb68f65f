"""
Unit tests for run tracing with LangSmith switched off.
"""
import logging

import pytest

from depfa.services.tracing import traceable


class TestTraceable:
    def test_returns_result_and_logs(self, caplog):
        @traceable("square")
        def square(x):
            return x * x

        with caplog.at_level(logging.INFO, logger="depfa.services.tracing"):
            assert square(3) == 9

        assert "name=square" in caplog.text
        assert square.__name__ == "square"

    def test_logs_on_failure(self, caplog):
        """Test a failing run is still timed and the error propagates."""
        @traceable("broken")
        def broken():
            raise RuntimeError("boom")

        with caplog.at_level(logging.INFO, logger="depfa.services.tracing"):
            with pytest.raises(RuntimeError):
                broken()

        assert "name=broken" in caplog.text
