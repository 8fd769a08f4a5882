"""`python -m bendlens` entry point."""

import sys

from bendlens.cli import main

sys.exit(main())
