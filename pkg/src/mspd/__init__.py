"""Multispectral polarization demosaicking: filter-array simulation, MSPDNet, baselines and metrics."""

from .baselines import WienerOperator, bilinear_demosaic, wiener_demosaic, wiener_train
from .cube import ImageCube, read_cube, synthetic_cube, write_cube
from .loss import gradient_map, loss
from .metrics import dolp, dolp_psnr, psnr, reflectance_rmse, render_rgb, stokes
from .model import MSPDNet, NetworkConfig
from .pattern import MosaicImage, PatternSpec, extract_sparse, generate_pattern, mosaic, validate_pattern
from .tensor import Tensor

__version__ = "0.1.0"
