import sys
from pathlib import Path

# Make the shared reference implementations importable as ``oracles``.
sys.path.insert(0, str(Path(__file__).parent))
