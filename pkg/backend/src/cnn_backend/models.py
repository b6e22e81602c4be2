"""Model construction: the three supported backbones with resized heads."""

from __future__ import annotations

import os
import sys

import torch
import torch.nn as nn
from torchvision import models

from .manifest import JobError

SUPPORTED_MODELS = ("vgg19", "resnet50", "inceptionv3")

# Channel statistics of the large-scale pretraining corpus; applied to the
# 3-channel replicated grayscale input.
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)

MIN_INPUT = {"vgg19": 32, "resnet50": 64, "inceptionv3": 75}


def _try_pretrained(builder, weights) -> nn.Module | None:
    if os.environ.get("CNN_BACKEND_NO_PRETRAINED"):
        return None
    try:
        return builder(weights=weights)
    except Exception as exc:  # offline environments cannot fetch weights
        print(
            f"warning: pretrained weights unavailable ({type(exc).__name__}); "
            "falling back to seeded random initialization",
            file=sys.stderr,
        )
        return None


def build_model(model_id: str, n_classes: int, input_resize: int) -> nn.Module:
    """Backbone with its classification head replaced by an n_classes layer."""
    if model_id not in SUPPORTED_MODELS:
        raise JobError(f"unsupported model_id {model_id!r}; expected one of {SUPPORTED_MODELS}")
    if input_resize < MIN_INPUT[model_id]:
        raise JobError(
            f"{model_id} needs input_resize >= {MIN_INPUT[model_id]}, got {input_resize}"
        )
    if model_id == "vgg19":
        model = _try_pretrained(models.vgg19, models.VGG19_Weights.IMAGENET1K_V1)
        if model is None:
            model = models.vgg19(weights=None)
        model.classifier[6] = nn.Linear(model.classifier[6].in_features, n_classes)
    elif model_id == "resnet50":
        model = _try_pretrained(models.resnet50, models.ResNet50_Weights.IMAGENET1K_V2)
        if model is None:
            model = models.resnet50(weights=None)
        model.fc = nn.Linear(model.fc.in_features, n_classes)
    else:
        model = _try_pretrained(models.inception_v3, models.Inception_V3_Weights.IMAGENET1K_V1)
        if model is None:
            model = models.inception_v3(weights=None, aux_logits=True, init_weights=True)
        model.fc = nn.Linear(model.fc.in_features, n_classes)
        # Only the main head drives the loss; the auxiliary branch would also
        # cap the minimum input size at ~135 px, so it is dropped.
        model.aux_logits = False
        model.AuxLogits = None
    return model


def target_layer(model: nn.Module, model_id: str) -> nn.Module:
    """The final convolutional feature stage used for activation mapping."""
    if model_id == "vgg19":
        return model.features[36]
    if model_id == "resnet50":
        return model.layer4[-1]
    if model_id == "inceptionv3":
        return model.Mixed_7c
    raise JobError(f"unsupported model_id {model_id!r}")


def make_optimizer(name: str, model: nn.Module, lr: float) -> torch.optim.Optimizer:
    name = name.lower()
    if name == "adam":
        return torch.optim.Adam(model.parameters(), lr=lr)
    if name == "sgd":
        return torch.optim.SGD(model.parameters(), lr=lr)
    raise JobError(f"unsupported optimizer {name!r} (adam or sgd)")
