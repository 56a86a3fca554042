from pathlib import Path
from typing import Any, Dict, Optional, Union
import yaml

from config.paths import SOLVER_CONFIG_FPATH


def load_yaml_config(file_path: Union[str, Path]) -> dict:
    """
    Loads a YAML configuration file.

    Parameters
    ----------
    file_path : Union[str, Path]
        Path to the YAML file.

    Returns
    -------
    dict
        Parsed YAML content (an empty dict for an empty file).

    Raises
    ------
    FileNotFoundError
        If the file does not exist.
    yaml.YAMLError
        If there's an error parsing YAML.
    IOError
        If there's an error reading the file.
    """
    file_path = Path(file_path)

    if not file_path.exists():
        raise FileNotFoundError(f"YAML config file not found: {file_path}")

    try:
        with open(file_path, "r", encoding="utf-8") as file:
            return yaml.safe_load(file) or {}
    except yaml.YAMLError as e:
        raise yaml.YAMLError(f"Error parsing YAML file: {e}") from e
    except IOError as e:
        raise IOError(f"Error reading YAML file: {e}") from e


def load_solver_config(
    section: str,
    defaults: Optional[Dict[str, Any]] = None,
    file_path: Union[str, Path] = SOLVER_CONFIG_FPATH,
) -> Dict[str, Any]:
    """
    Return one section of the solver configuration merged over code defaults.

    Parameters
    ----------
    section : str
        Top-level key in the YAML file (e.g. "em", "motif", "mixture").
    defaults : dict, optional
        Values used for keys the file does not set.
    file_path : Union[str, Path], optional
        Alternative YAML file (the CLI's --config flag).

    Returns
    -------
    dict
        Merged settings; keys present in the file win.
    """
    merged = dict(defaults or {})
    config = load_yaml_config(file_path)
    values = config.get(section) or {}
    if not isinstance(values, dict):
        raise yaml.YAMLError(f"Section '{section}' in {file_path} must be a mapping")
    merged.update(values)
    return merged
