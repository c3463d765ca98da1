"""Tree-species segmentation of aerial orthomosaics with an imbalance-weighted U-Net."""
import os

# must run before numpy loads its BLAS
_threads = os.environ.get("CANOPYSEG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
