# -*- coding: utf-8 -*-

"""Utility functions for file operations."""
import json

from byoa.telemetry.log_manager.log_manager import LogManager
from pydantic import ValidationError

from schemas.input_schema import PyramidConfig, SceneConfig

logger = LogManager.get_instance()

_MODELS = {"pyramid": PyramidConfig, "scene": SceneConfig}


def validate_data(data, data_type):
    """
    Validate data against the specified schema.

    Args:
        data (dict): The data to validate.
        data_type (str): The type of data ('pyramid' or 'scene').

    Returns:
        PyramidConfig or SceneConfig: the parsed model.

    Raises:
        ValueError: If the data_type is not 'pyramid' or 'scene'.
        ValidationError: If the data does not conform to the specified schema.
    """
    if data_type not in _MODELS:
        raise ValueError("Invalid data_type. Must be 'pyramid' or 'scene'.")
    try:
        return _MODELS[data_type](**data)
    except ValidationError as e:
        logger.error(f"Pydantic validation error: {e}")
        raise


def load_input_data(input_data_path):
    """
    Load input data from the specified file.

    Args:
        input_data_path (str): The path to the input data file.

    Returns:
        dict: The loaded input data.
    """
    try:
        with open(input_data_path, "r", encoding="utf-8") as file:
            input_data = json.load(file)
        return input_data
    except FileNotFoundError:
        logger.error(f"File '{input_data_path}' not found.")
        raise
    except json.JSONDecodeError as e:
        logger.error(f"Error decoding JSON: {e}")
        raise
