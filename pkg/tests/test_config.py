from dataclasses import dataclass, field
from typing import Optional, Tuple

import pytest
from hypothesis import given, strategies as st

from segloc.config import ConfigError, apply_config, flatten, parse_config


@dataclass(frozen=True)
class Inner:
    radius: float = 0.5
    flag: bool = False


@dataclass(frozen=True)
class Outer:
    n: int = 3
    name: str = "a"
    limit: Optional[int] = None
    shift: Tuple[float, ...] = (0.0, 0.0)
    inner: Inner = field(default_factory=Inner)


def test_parse_comments_and_blanks():
    text = "# header\n\nn = 4  # trailing\n name =  hello world \n"
    assert parse_config(text) == {"n": "4", "name": "hello world"}


def test_parse_error_names_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("n = 1\nbroken line\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config(" = 3")


def test_later_keys_override():
    assert parse_config("n = 1\nn = 2")["n"] == "2"


def test_apply_typed_and_nested():
    cfg, used = apply_config(Outer(), {"n": "7", "inner.radius": "1.25", "inner.flag": "yes",
                                       "limit": "none", "shift": "(-35, 20)"})
    assert cfg.n == 7 and cfg.inner.radius == 1.25 and cfg.inner.flag is True
    assert cfg.limit is None and cfg.shift == (-35.0, 20.0)
    assert used == {"n", "inner.radius", "inner.flag", "limit", "shift"}


def test_apply_leaves_unknown_keys_unused():
    cfg, used = apply_config(Outer(), {"nope": "1", "inner.nope": "2"})
    assert cfg == Outer() and used == set()


def test_apply_bad_value():
    with pytest.raises(ConfigError, match="n"):
        apply_config(Outer(), {"n": "three"})
    with pytest.raises(ConfigError, match="inner.flag"):
        apply_config(Outer(), {"inner.flag": "maybe"})


def test_optional_int_value():
    cfg, _ = apply_config(Outer(), {"limit": "12"})
    assert cfg.limit == 12


@given(st.integers(-10**6, 10**6), st.floats(-1e6, 1e6, allow_nan=False), st.booleans(),
       st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=4))
def test_flatten_roundtrip(n, r, b, shift):
    cfg = Outer(n=n, shift=tuple(shift), inner=Inner(radius=r, flag=b))
    back, _ = apply_config(Outer(), flatten(cfg))
    assert back == cfg


def test_flatten_keys():
    keys = set(flatten(Outer()))
    assert keys == {"n", "name", "limit", "shift", "inner.radius", "inner.flag"}
