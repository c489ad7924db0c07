"""tfmforge: deep-learning traction force microscopy at desk scale.

U-Net, ViT and hybrid ViT+UNet regressors from displacement to traction
fields, a synthetic elasticity-based data generator, the training recipe,
evaluation metrics, and generalization harnesses for spatial scale and noise.
"""

from .elasticity import (Dataset, DatasetManifest, ElasticSubstrate,
                         fttc_inverse, forward_displacement, generate_dataset)
from .estimator import TractionRegressor
from .metrics import magnitude_field, nrmse, pearson
from .models import (HybridConfig, HybridViTUNet, UNet, UNetConfig, ViT,
                     ViTConfig, build_model)
from .rng import RngStream
from .tensor import Tensor, grad_check
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DatasetManifest", "ElasticSubstrate", "fttc_inverse",
    "forward_displacement", "generate_dataset", "TractionRegressor",
    "magnitude_field", "nrmse", "pearson", "HybridConfig", "HybridViTUNet",
    "UNet", "UNetConfig", "ViT", "ViTConfig", "build_model", "RngStream",
    "Tensor", "grad_check", "TrainConfig", "train", "__version__",
]
