#!/usr/bin/env python3
"""
Test the installation self-check against the bundled configuration
"""
import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

import pytest

import validate_installation


@pytest.mark.parametrize("check", [
    validate_installation.test_python_version,
    validate_installation.test_required_packages,
    validate_installation.test_bundled_configuration,
    validate_installation.test_codec,
    validate_installation.test_planner,
    validate_installation.test_protocol,
])
def test_self_check_passes(check, capsys):
    assert check() is True
    assert '❌' not in capsys.readouterr().out


def test_missing_env_file_uses_defaults(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert validate_installation.test_environment_file() is True
    assert 'defaults will be used' in capsys.readouterr().out


def test_main_reports_success(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert validate_installation.main() is True
    assert 'Passed: 7/7' in capsys.readouterr().out


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
