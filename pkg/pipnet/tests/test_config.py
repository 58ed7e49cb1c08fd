from pathlib import Path

from app import config


def test_defaults(monkeypatch):
    for name in ("PIPNET_LOG_LEVEL", "PIPNET_WORKERS", "PIPNET_RECORD_TIMING"):
        monkeypatch.delenv(name, raising=False)
    assert config.log_level() == "INFO"
    assert config.workers() == 1
    assert config.record_timing() is True
    assert config.fixtures_dir() == config.PACKAGE_FIXTURES_DIR


def test_environment_overrides(monkeypatch, tmp_path):
    monkeypatch.setenv("PIPNET_LOG_LEVEL", "debug")
    monkeypatch.setenv("PIPNET_WORKERS", "4")
    monkeypatch.setenv("PIPNET_RECORD_TIMING", "false")
    monkeypatch.setenv("PIPNET_FIXTURES_DIR", str(tmp_path))
    monkeypatch.setenv("PIPNET_OUTPUT_ROOT", "elsewhere")
    assert config.log_level() == "DEBUG"
    assert config.workers() == 4
    assert config.record_timing() is False
    assert config.fixtures_dir() == tmp_path
    assert config.output_root() == Path("elsewhere")


def test_bad_values_fall_back(monkeypatch):
    monkeypatch.setenv("PIPNET_WORKERS", "many")
    assert config.workers() == 1
    monkeypatch.setenv("PIPNET_WORKERS", "0")
    assert config.workers() == 1
    monkeypatch.setenv("PIPNET_FIXTURES_DIR", "  ")
    assert config.fixtures_dir() == config.PACKAGE_FIXTURES_DIR
