"""A desk-scale toolkit for fully 3D unrolled MR fingerprinting reconstruction."""
from typing import List, Optional

__version__ = "0.1.0"


def main(argv: Optional[List[str]] = None) -> int:
    from .cli import main as cli_main

    return cli_main(argv)
