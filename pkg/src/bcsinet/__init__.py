"""Binary-weight CSI feedback autoencoders in plain numpy.

Set ``BCSI_THREADS`` before the first import to cap BLAS worker threads.
"""

import os as _os

if _os.environ.get("BCSI_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["BCSI_THREADS"])

from .binarize import GateVariant, binarize, sign, ste_weight_grad  # noqa: E402
from .models import ModelSpec, Network, build, decode, encode  # noqa: E402
from .trainer import TrainConfig, fit, lr_at, nmse, nmse_db, train_step  # noqa: E402
from .binkernel import (  # noqa: E402
    DeployedModel, PackedBinaryMatrix, bench, binary_gemv, export, import_model, pack, unpack,
)
from .complexity import ComplexityReport, count, table  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "GateVariant", "binarize", "sign", "ste_weight_grad",
    "ModelSpec", "Network", "build", "encode", "decode",
    "TrainConfig", "fit", "lr_at", "nmse", "nmse_db", "train_step",
    "DeployedModel", "PackedBinaryMatrix", "bench", "binary_gemv", "export", "import_model",
    "pack", "unpack",
    "ComplexityReport", "count", "table",
]
