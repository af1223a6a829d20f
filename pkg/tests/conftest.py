"""
Test configuration and fixtures for viscosity-lab tests.
"""

import os
import tempfile
from typing import Any, Dict

import numpy as np
import pytest
import yaml

from viscosity_lab.generator_assembly import FourierTruncation
from viscosity_lab.phase_models import cat_map, rotation_field, shear_field, translation_field


@pytest.fixture
def rotation():
    """Rotation d_theta on the circle."""
    return rotation_field()


@pytest.fixture
def translation():
    """Irrational translation (1, sqrt 2) on T^2."""
    return translation_field()


@pytest.fixture
def shear():
    """Variable-coefficient shear benchmark on T^2."""
    return shear_field(amplitude=1.0, a=0.5, b=0.3)


@pytest.fixture
def linear_cat():
    return cat_map()


@pytest.fixture
def small_truncation_2d():
    return FourierTruncation(2, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def test_config() -> Dict[str, Any]:
    """Minimal spectrum run on the rotation flow."""
    return {
        "system": {"builtin": "rotation"},
        "epsilon": 0.1,
        "truncation": {"cutoff": 16},
        "solver": {"method": "dense"},
    }


@pytest.fixture
def temp_config_file(test_config, tmp_path):
    """Write `test_config` to a YAML file; output goes under tmp_path."""
    data = dict(test_config, output_dir=str(tmp_path / "out"))
    with tempfile.NamedTemporaryFile(mode="w", suffix=".yaml", delete=False) as f:
        yaml.dump(data, f)
        config_file = f.name

    yield config_file

    if os.path.exists(config_file):
        os.unlink(config_file)
