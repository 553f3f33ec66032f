import sys
from pathlib import Path

# lets tests import the brute-force helpers in oracles.py
sys.path.insert(0, str(Path(__file__).parent))
