"""Declarative types shared across nrflab.

Experiment configs live in ``nrflab.models.experiment``; they are not re-exported here because
they depend on the probe and dataset modules, which themselves depend on the architecture types.
"""

from .architecture import (
    Activation,
    ActivationKind,
    ArchitectureSpec,
    AvgPool,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    LayerSpec,
    MaxPool,
    ResidualBlock,
    delta_orthogonal_variant,
    make_architecture,
    resolve_layers,
)

__all__ = [
    "Activation",
    "ActivationKind",
    "ArchitectureSpec",
    "AvgPool",
    "BatchNorm",
    "Conv2d",
    "Dense",
    "Flatten",
    "GlobalAvgPool",
    "LayerSpec",
    "MaxPool",
    "ResidualBlock",
    "delta_orthogonal_variant",
    "make_architecture",
    "resolve_layers",
]
