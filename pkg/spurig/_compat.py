"""Helpers for cross compatibility across dependency versions."""
from importlib import resources
import sys
from typing import Any, Dict

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


def load_toml(text: str) -> Dict[str, Any]:
    """Parse a TOML document."""
    return tomllib.loads(text)


def read_text(module: str, filename: str) -> str:
    """Read a text resource shipped inside a package."""
    return resources.files(module).joinpath(filename).read_text(encoding="utf8")


def dump_toml(content: Dict[str, Any]) -> str:
    """Serialize nested tables of scalars and lists to TOML."""
    import tomli_w

    return tomli_w.dumps(content)
