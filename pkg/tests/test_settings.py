from __future__ import annotations

from msalab.settings import load_settings, max_dimension, resolve_workers


def test_settings_are_cached_until_cleared(monkeypatch):
    load_settings.cache_clear()
    monkeypatch.setenv("MSALAB_MAX_DIMENSION", "123")
    try:
        assert max_dimension() == 123
        monkeypatch.setenv("MSALAB_MAX_DIMENSION", "456")
        assert max_dimension() == 123
        assert load_settings() is load_settings()
        load_settings.cache_clear()
        assert max_dimension() == 456
    finally:
        monkeypatch.delenv("MSALAB_MAX_DIMENSION")
        load_settings.cache_clear()


def test_resolve_workers(monkeypatch):
    load_settings.cache_clear()
    monkeypatch.setenv("MSALAB_WORKERS", "3")
    try:
        assert resolve_workers(2) == 2
        assert resolve_workers(0) == 3
        assert resolve_workers(None) == 3
    finally:
        monkeypatch.delenv("MSALAB_WORKERS")
        load_settings.cache_clear()
