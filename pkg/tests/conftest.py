"""Shared helpers: tiny engine configurations sized for fast tests."""

import pytest

from walstore import db as db_mod
from walstore.db import DbConfig
from walstore.failpoints import FailpointRegistry
from walstore.large_table import KeySpaceConfig, Uniform
from walstore.wal import WalConfig

KS = 0


def tiny_config(directory, *, cell_count=16, fragment=64 * 1024,
                index_fragment=256 * 1024, dirty_threshold=4096,
                cache_capacity=16 * 1024 * 1024, **overrides) -> DbConfig:
    return DbConfig(
        directory=directory,
        key_spaces=[KeySpaceConfig(KS, Uniform(cell_count), row_count=4,
                                   dirty_flush_threshold=dirty_threshold)],
        value_wal=WalConfig(fragment_size_bytes=fragment),
        index_wal=WalConfig(fragment_size_bytes=index_fragment),
        cache_capacity_bytes=cache_capacity,
        start_background=False,
        **overrides,
    )


def open_db(directory, failpoints=None, **overrides):
    registry = failpoints or FailpointRegistry()
    return db_mod.open(tiny_config(directory, **overrides), registry)


def key_of(value: int, lead: int | None = None) -> bytes:
    raw = value.to_bytes(32, "big")
    if lead is not None:
        raw = bytes([lead]) + raw[1:]
    return raw


@pytest.fixture
def db(tmp_path):
    handle = open_db(tmp_path / "db")
    yield handle
    try:
        handle.close()
    except Exception:
        pass
