"""Robust relative radiometric normalization via two-component change-noise mixtures."""
from .em import METHODS, EmConfig, FitResult, NoChangeMask, extract_nc_mask, fit, run
from .raster import QuantizationSpec, Raster, RasterPair, quantize_pair, read_raster, write_raster

__version__ = "0.1.0"
