import sys
from pathlib import Path

# allow cross-test imports of shared oracles (numeric_grad etc.)
sys.path.insert(0, str(Path(__file__).parent))
