import os

# deterministic single-threaded numerics regardless of host CPU count
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

from percevox.gradsuite import (  # noqa: E402, F401
    frozen_quantization_surrogate,
    quantization_margins,
)
