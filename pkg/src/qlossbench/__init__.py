"""Loss-aware surface-code memory workbench."""

from qlossbench.errors import QLossError
from qlossbench.experiment import Dataset, NoiseParams, sample_dataset
from qlossbench.lattice import Basis, CodeLayout, build_layout

__all__ = ["Basis", "CodeLayout", "Dataset", "NoiseParams", "QLossError", "build_layout", "sample_dataset"]
__version__ = "0.1.0"
