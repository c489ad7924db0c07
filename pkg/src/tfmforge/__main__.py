"""Allow `python3 -m tfmforge` as an alias for the `tfmforge` entry point."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
