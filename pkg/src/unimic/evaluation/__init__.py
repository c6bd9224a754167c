"""Rate-distortion-perception evaluation."""

from .bd import BDResult, RDCurve, RDPoint, bd_gap, bd_metric
from .fid import (
    CovarianceRegularizedWarning,
    RandomProjectionExtractor,
    extract_patches,
    feature_statistics,
    frechet_distance,
    patch_grid,
    patched_fid,
)
from .interp import dp_interpolate
from .metrics import PSNR_CAP, ms_ssim, ms_ssim_scales, ms_ssim_torch, psnr
from .sweep import RECORD_COLUMNS, SUMMARY_COLUMNS, SweepResult, rdp_sweep

__all__ = [
    "BDResult",
    "CovarianceRegularizedWarning",
    "PSNR_CAP",
    "RDCurve",
    "RDPoint",
    "RECORD_COLUMNS",
    "RandomProjectionExtractor",
    "SUMMARY_COLUMNS",
    "SweepResult",
    "bd_gap",
    "bd_metric",
    "dp_interpolate",
    "extract_patches",
    "feature_statistics",
    "frechet_distance",
    "ms_ssim",
    "ms_ssim_scales",
    "ms_ssim_torch",
    "patch_grid",
    "patched_fid",
    "psnr",
    "rdp_sweep",
]
