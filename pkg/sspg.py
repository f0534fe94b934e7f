"""
SSPG
Entry point: python sspg.py train --config configs/bandit_3goal.env
"""
import sys

from cli import main

if __name__ == "__main__":
    sys.exit(main())
