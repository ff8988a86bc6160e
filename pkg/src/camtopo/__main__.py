"""Run the command-line interface with ``python -m camtopo``."""

import sys

from .cli import main

sys.exit(main())
