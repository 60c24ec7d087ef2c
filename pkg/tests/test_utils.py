"""
工具函数与日志测试
"""
import logging

import pytest

from exceptions import ValidationError
from logger import LOGGER_NAME, Logger, get_logger
from utils import derive_seed, format_duration, parse_float_list


class TestUtils:
    """工具函数"""

    def test_format_duration(self):
        assert format_duration(45.9) == "45s"
        assert format_duration(83) == "1:23"
        assert format_duration(5025) == "1:23:45"

    def test_parse_float_list(self):
        assert parse_float_list("1e-3, 1e-1,") == [1e-3, 1e-1]

    @pytest.mark.parametrize("text", ["", " , ", "1e-3,abc"])
    def test_parse_float_list_invalid(self, text):
        with pytest.raises(ValidationError):
            parse_float_list(text, field="thresholds")

    def test_derive_seed(self):
        assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
        assert len({derive_seed(0, k, e) for k in range(4) for e in range(4)}) == 16
        assert derive_seed(-1) >= 0


class TestLogger:
    """日志系统"""

    def test_singleton(self):
        assert Logger() is get_logger()

    def test_set_level(self):
        log = get_logger()
        named = logging.getLogger(LOGGER_NAME)
        try:
            log.set_level("warning")
            assert named.level == logging.WARNING
            log.set_level("nonsense")
            assert named.level == logging.INFO
        finally:
            named.setLevel(logging.DEBUG)
