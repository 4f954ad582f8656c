"""Desk-scale two-branch detection backbone: trainable CNN, frozen ViT, ViT-feature modulation."""

from .backbone import BackbonePyramid, BaselineBackbone, VMCNet, audit_parameters, train_toy, training_step
from .cnn import MultiScaleTokens, flatten_concat
from .config import CnnConfig, FusionParams, RunConfig, TrainConfig, ViTConfig, VmcConfig, toy_config
from .params import Parameter, ParameterStore
from .roi import fuse_scores, roi_align, vlm_score
from .vit import TapSet

__version__ = "0.1.0"
