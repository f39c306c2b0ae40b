"""Diffusion-based generation of sparse two-channel artery/vein masks."""

from .diffusion import (DiffusionBatch, LossConfig, binarize, ddpm_sample, forward_diffuse, loss_simple,
                        loss_vessel)
from .denoiser import DenoiserConfig, DenoiserParams, adam_step, init_params, predict_noise, train
from .schedule import NoiseSchedule, linear_schedule, posterior_variance
from .structmetrics import auc, build_vessel_graph, empty_sample_rate, pixel_metrics, skeletonize, struct_report
from .synthvessel import AVMask, VesselTreeConfig, generate_dataset, generate_mask

__version__ = "0.1.0"
