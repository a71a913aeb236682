"""U-Net surrogate for flood depth maps: patch training and tiled full-domain inference."""

from .convnet import UNet, UNetConfig, build_unet, count_parameters, load_checkpoint, save_checkpoint
from .inference import InferenceConfig, infer, predict_image
from .metrics import MetricReport, masked_rmse, nse
from .oracle import gen_terrain, make_splits, simulate_water_level
from .patches import DomainImage, NormStats, PatchSampler, SamplerConfig, inclusion_probability
from .raster_io import Raster, read_ascii_grid, write_ascii_grid
from .training import TrainConfig, cross_validate, fit, zero_shot_eval

__version__ = "0.1.0"
