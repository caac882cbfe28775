"""Volumetric Fast Fourier Convolution toolkit for ink detection in CT volumes."""
import os as _os

# VFFC_THREADS caps BLAS threads; it only takes effect before numpy loads BLAS
if _os.environ.get("VFFC_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["VFFC_THREADS"])

__version__ = "0.1.0"
