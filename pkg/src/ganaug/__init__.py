"""GAN-based augmentation lab for single-slice brain MR images.

Numpy-only reverse-mode autodiff, progressive-growing GAN layers, WGAN-GP and
alpha-GAN-GP objectives, SSIM/MS-SSIM/FID metrics and a phantom data source.
"""

from .estimators import AlphaGANGP, ProgressiveGAN, check_images
from .trainer import RunConfig, TrainingRun, schedule_plan

__version__ = "0.1.0"

__all__ = ["AlphaGANGP", "ProgressiveGAN", "RunConfig", "TrainingRun", "check_images", "schedule_plan"]
