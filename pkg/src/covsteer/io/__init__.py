"""Config loading and artifact export."""

from .config import ConfigError, load_config, parse_config
from .export import SIG_DIGITS, dump_json, rounded, write_csv

__all__ = ["ConfigError", "SIG_DIGITS", "dump_json", "load_config", "parse_config", "rounded", "write_csv"]
