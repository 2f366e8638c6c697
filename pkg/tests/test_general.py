"""
Tests for protofed.General module.

Covers initialization, version information and log level configuration.
"""

import logging

import numpy as np

import protofed


def test_version():
    """Test package version retrieval."""
    version = protofed.version()
    assert isinstance(version, str)
    assert any(char.isdigit() for char in version)


def test_wrapper_version():
    """Test version string with the build hash appended."""
    assert protofed.wrapper_version().startswith(protofed.version())


def test_init_sets_precision_and_level(temp_output_dir):
    protofed.init("warning", str(temp_output_dir / "run.log"),
                  precision="single")
    assert protofed.get_dtype() == np.float32
    assert logging.getLogger().level == logging.WARNING
    logging.getLogger("protofed").warning("written to the log file")
    assert "written to the log file" in (temp_output_dir / "run.log").read_text()
    protofed.init(logging.INFO)


def test_log_level_setting():
    """Test log level can be set."""
    # Test with logging constants
    protofed.set_log_level(logging.DEBUG)
    assert logging.getLogger().level == logging.DEBUG

    # Test with string input
    protofed.set_log_level("warning")
    assert logging.getLogger().level == logging.WARNING
    protofed.set_log_level("info")
