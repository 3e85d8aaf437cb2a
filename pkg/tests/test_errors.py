from __future__ import annotations

import pickle

from msalab.errors import ConfigError, ResonanceError, ResourceLimitError


def _round_trip(exc: Exception) -> Exception:
    return pickle.loads(pickle.dumps(exc))


def test_resource_limit_error_survives_pickling():
    restored = _round_trip(ResourceLimitError(10 ** 6, 4000, "cube C_3(0)"))
    assert isinstance(restored, ResourceLimitError)
    assert (restored.dimension, restored.cap, restored.what) == (10 ** 6, 4000, "cube C_3(0)")
    assert str(restored) == "Dimension 1000000 exceeds cap 4000 for cube C_3(0)"


def test_resonance_error_survives_pickling():
    restored = _round_trip(ResonanceError(0.5, 1e-14))
    assert isinstance(restored, ResonanceError)
    assert (restored.energy, restored.eta) == (0.5, 1e-14)


def test_config_error_keeps_its_position():
    restored = _round_trip(ConfigError("bad value", field_path="msa.theta"))
    assert restored.field_path == "msa.theta"
    assert restored.diagnostic() == "msa.theta: bad value"
    restored = _round_trip(ConfigError("syntax", line=3, column=7))
    assert (restored.line, restored.column) == (3, 7)
