"""Tests for JSON config loading and the example configs."""

import json
import os

import pytest
from pydantic import ValidationError

from main import EXIT_OK, EXIT_USAGE, cli_run
from schemas.input_schema import PyramidConfig, SceneConfig
from shift_memory_segmentation.pyramid_mode import PyramidMode
from shift_memory_segmentation.weights_io import load_weights_file
from utils.file_utils import load_input_data, validate_data

DATA_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "src", "data")


def _load(name):
    return load_input_data(os.path.join(DATA_DIR, name))


def test_example_configs_validate():
    pyramid = validate_data(_load("pyramid_example.json"), "pyramid")
    scene = validate_data(_load("scene_example.json"), "scene")
    assert isinstance(pyramid, PyramidConfig) and pyramid.mode is PyramidMode.LINE
    assert isinstance(scene, SceneConfig) and len(scene.objects) == 2


def test_unknown_data_type():
    with pytest.raises(ValueError, match="data_type"):
        validate_data({}, "processor")


def test_schema_violation():
    with pytest.raises(ValidationError):
        validate_data({"mode": "line", "width": 8, "frames": -1}, "scene")


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_input_data(str(tmp_path / "absent.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(json.JSONDecodeError):
        load_input_data(str(broken))


def test_flags_override_config_file(tmp_path):
    config = tmp_path / "pyramid.json"
    config.write_text(json.dumps({"mode": "line", "levels": 2, "width": 8}), encoding="utf-8")
    out = str(tmp_path / "w.smnw")
    code = cli_run(["init-weights", "--config", str(config), "--width", "16", "--out", out])
    assert code == EXIT_OK
    spec, _ = load_weights_file(out)
    assert spec.levels == 2 and spec.width == 16


def test_scene_config_with_bad_class(tmp_path):
    scene = {
        "mode": "line",
        "width": 8,
        "frames": 4,
        "num_classes": 2,
        "objects": [{"width": 2, "velocity": 1, "intensity": 0.5, "class_id": 5}],
    }
    config = tmp_path / "scene.json"
    config.write_text(json.dumps(scene), encoding="utf-8")
    code = cli_run(["gen", "--config", str(config), "--out", str(tmp_path / "s.smns")])
    assert code == EXIT_USAGE
