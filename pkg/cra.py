#!/usr/bin/env python3

import sys

from simple_cra.cli import main

# Run this script using argparse

if __name__ == "__main__":
    sys.exit(main())
