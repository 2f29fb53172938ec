#!/usr/bin/env python3
"""Entry point for vstorm CLI."""

import sys

from src.vstorm import run

if __name__ == "__main__":
    sys.exit(run.main())
