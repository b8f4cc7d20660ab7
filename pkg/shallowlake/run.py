#!/usr/bin/env python3
"""
Entrypoint.
    python run.py <solve|density|sweep|simulate|escape|verify> [flags]
"""
import sys

from cli import main

if __name__ == "__main__":
    sys.exit(main())
