import logging

import pytest

from simple_cra.exceptions import InvalidConfigError
from simple_cra.util import format_count, num_threads, parse_pair, relative_error, validateparam


def test_validateparam():
    validateparam(None, ("a",), "never raised")
    validateparam("a", ("a", "b"), "never raised")
    with pytest.raises(ValueError):
        validateparam("c", ("a", "b"), "bad value")
    with pytest.raises(InvalidConfigError):
        validateparam("c", ("a", "b"), InvalidConfigError("bad value"))


@pytest.mark.parametrize("text,expected", [("7,7", (7, 7)), (" 3 , 5 ", (3, 5))])
def test_parse_pair(text, expected):
    assert parse_pair(text) == expected


@pytest.mark.parametrize("text", ["7", "7,7,7", "0,3", "a,b"])
def test_parse_pair_rejects(text):
    with pytest.raises(ValueError):
        parse_pair(text)


def test_relative_error_floor():
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


def test_format_count_units():
    assert format_count(850) == "0.85K"
    assert format_count(1_864_852) == "1.86M"
    assert format_count(1_864_852, unit="K") == "1864.85K"


def test_num_threads_from_environment(monkeypatch):
    monkeypatch.setenv("CRA_NUM_THREADS", "3")
    assert num_threads() == 3


def test_num_threads_warns_on_garbage(monkeypatch, caplog):
    monkeypatch.setenv("CRA_NUM_THREADS", "many")
    with caplog.at_level(logging.WARNING, logger="cra"):
        assert num_threads() >= 1
    assert "CRA_NUM_THREADS" in caplog.text
