#!/usr/bin/env python3
"""Run the detection experiments from a source checkout without installing the package.

    python ais_cli.py --config test-inputs/tiny.yaml sweep --out results/tiny
"""
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from cli.ais import cli  # noqa: E402

if __name__ == '__main__':
    cli(prog_name="ais_cli.py")
