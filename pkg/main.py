#!/usr/bin/env python3

import sys

from vitscale.cli.interface import run


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
