"""Masked-autoencoder pretraining and calcium-artifact inpainting on voxel patches."""

__version__ = "0.1.0"

from .volume import Patch, Volume, WindowSpec, extract_patch, load_volume, save_volume, window_normalize
from .phantom import CalciumSpec, Centerline, PhantomSpec, build_dataset, generate_centerline, inject_calcification, rasterize_vessel
from .masking import TokenGridSpec, TokenMask, apply_mask, center_mask, partition, random_mask, upsample_mask, vessel_aware_mask
from .model import DenseUnet, DenseUnetConfig, build_model, count_parameters, reconstruct
from .losses import LossConfig, edge_loss, masked_mse, total_loss
from .training import MaskingConfig, OptimizerConfig, RunSpec, augment, finetune, inpaint, lr_at, pretrain
from .metrics import dice, evaluate_pairs, hd95, psnr, segment_lumen, ssim
from .baselines import interpolation_inpaint
