"""Entry point for `python -m implicitfilter` and the `ipf` script."""

import sys

from implicitfilter.experiment_cli import main

if __name__ == "__main__":
    sys.exit(main())
