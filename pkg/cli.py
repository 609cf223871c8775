"""CLI shim so `python cli.py run ...` works from a checkout without installing."""

import sys

from fcil.cli import main

if __name__ == "__main__":
    sys.exit(main())
