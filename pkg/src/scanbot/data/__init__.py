"""Bundled data files: reference robot model and example scenarios."""

from importlib import resources
from pathlib import Path


def data_path(*parts: str) -> Path:
    """Absolute path of a bundled data file, e.g. data_path("scenarios", "pure_scan.json")."""
    return Path(str(resources.files(__package__).joinpath(*parts)))
