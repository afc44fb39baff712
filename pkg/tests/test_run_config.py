from __future__ import annotations

from pathlib import Path

import pytest

from app.run_config import (
    RunConfig,
    apply_overrides,
    load_config,
    log_level,
    parse_assignments,
    parse_config_text,
    render_config,
    resolve_path,
    storage_root,
)


def test_render_and_parse_round_trip() -> None:
    cfg = RunConfig()

    text = render_config(cfg)

    assert "model.decoder_channels=128,128,96,64,32/128,128,96,64,32/128,128,96,64,32/128,128,96,64,32" in text
    assert "model.use_matchability=false" in text
    assert "eval.thresholds=1.0,3.0,5.0" in text
    assert text.splitlines() == sorted(text.splitlines())
    assert parse_config_text(text) == cfg


def test_overrides_and_comments() -> None:
    text = """
    # small run
    dataset.size=20
    train.lr=0.0005   # slower
    model.use_matchability=yes
    eval.thresholds=2.0,4.0
    """

    cfg = parse_config_text(text)

    assert cfg.dataset.size == 20
    assert cfg.train.lr == 0.0005
    assert cfg.model.use_matchability is True
    assert cfg.eval.thresholds == (2.0, 4.0)
    assert cfg.pose == RunConfig().pose


def test_invalid_lines_and_keys() -> None:
    with pytest.raises(ValueError, match="invalid config line 1"):
        parse_assignments("size=20")
    with pytest.raises(ValueError, match="invalid config line"):
        parse_assignments("render.size=20")
    with pytest.raises(ValueError, match="unknown config key: train.momentum"):
        apply_overrides(RunConfig(), {"train": {"momentum": "0.9"}})
    with pytest.raises(ValueError, match="invalid boolean"):
        parse_config_text("model.use_matchability=maybe")
    with pytest.raises(ValueError):
        parse_config_text("model.correlation=cosine")


def test_load_config_defaults_and_file(tmp_path: Path) -> None:
    assert load_config(None) == RunConfig()

    path = tmp_path / "run.cfg"
    path.write_text("pose.iters=50\n", encoding="utf-8")

    assert load_config(path).pose.iters == 50
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.cfg")


def test_storage_root_and_log_level(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    monkeypatch.setenv("DGC_STORAGE_ROOT", str(tmp_path))
    monkeypatch.delenv("DGC_DEBUG", raising=False)
    monkeypatch.delenv("DGC_LOG_LEVEL", raising=False)

    assert storage_root() == tmp_path.resolve()
    assert resolve_path("runs/a") == tmp_path.resolve() / "runs" / "a"
    assert resolve_path(tmp_path / "abs") == tmp_path / "abs"
    assert log_level() == "INFO"

    monkeypatch.setenv("DGC_LOG_LEVEL", "warning")
    assert log_level() == "WARNING"
    monkeypatch.setenv("DGC_DEBUG", "1")
    assert log_level() == "DEBUG"
