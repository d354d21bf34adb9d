"""Main module for the CLI."""

import sys

from kforge.cli import cli

if __name__ == "__main__":
    sys.exit(cli())  # pylint: disable=no-value-for-parameter
