"""Affine self convolution: data-dependent convolutional layers on Z^2 and the
discrete roto-translation group p4, with group squeeze-excitation, CIFAR
ResNet builders and an executable equivariance verification suite."""

from .attention import (AffineParams, AscParams, affine_map_apply, asc_forward,
                        neighborhood_gather, p4_affine_map_apply, p4_asc_forward,
                        p4_score, p4_simple_asc, sasa_self_attention, simple_asc,
                        simple_self_attention)
from .groups import P4Element, act_group, act_planar
from .models import ModelConfig, ParamAudit, build_model, count_params
from .nn import (avgpool2, batchnorm, conv2d, global_pool_and_linear, group_conv,
                 lifting_conv, pointwise)
from .se import SqueezeExcite, excite, squeeze
from .tensor import Tensor, clear_graph, cross_entropy, no_grad, seeded_rng, softmax
from .train import TrainConfig, evaluate, lr_at, train

__all__ = [
    "AffineParams", "AscParams", "ModelConfig", "P4Element", "ParamAudit",
    "SqueezeExcite", "Tensor", "TrainConfig", "act_group", "act_planar",
    "affine_map_apply", "asc_forward", "avgpool2", "batchnorm", "build_model",
    "clear_graph", "conv2d", "count_params", "cross_entropy", "evaluate",
    "excite", "global_pool_and_linear", "group_conv", "lifting_conv", "lr_at",
    "neighborhood_gather", "no_grad", "p4_affine_map_apply", "p4_asc_forward",
    "p4_score", "p4_simple_asc", "pointwise", "sasa_self_attention",
    "seeded_rng", "simple_asc", "simple_self_attention", "softmax", "squeeze",
    "train",
]
