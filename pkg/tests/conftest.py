import sys
from pathlib import Path

# lets tests import the reference implementations under tests/oracles/
sys.path.insert(0, str(Path(__file__).resolve().parent))
