#!/usr/bin/env python3
"""
oclbench launcher.

    python run.py run --config toy.cfg [--out results]
    python run.py dump-scenario --config toy.cfg --seed 1
    python run.py inspect-weights encoder.oclw
    python run.py grad-check --config toy.cfg
    python run.py sweep --config toy.cfg --key masking --values true,false

OCLBENCH_THREADS caps how many seeds run at once (default 1).
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))

from main import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
