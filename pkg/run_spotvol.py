#!/usr/bin/env python3
"""Direct runner for spotvol from a source checkout, without installing the package."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent / "src"))

try:
    from spotvol.cli import main
except ImportError as e:
    print(f"Error importing spotvol: {e}")
    print("\nInstall the dependencies first:")
    print("  uv sync && uv run python run_spotvol.py --help")
    print("  or: pip install -e . && python run_spotvol.py --help")
    sys.exit(1)

if __name__ == "__main__":
    main()
