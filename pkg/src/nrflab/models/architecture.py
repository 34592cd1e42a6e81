"""Declarative network descriptions: activations, layers, architecture presets."""

import logging
import math
from typing import Annotated, Literal

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, field_validator, model_validator

from nrflab.errors import IncompatibleOverridesError, UnknownPresetError
from nrflab.rng import InitKind, InitScheme

logger = logging.getLogger(__name__)

ActivationName = Literal["relu", "leaky_relu", "elu", "sigmoid", "tanh", "scaled_leaky_relu", "identity"]
PresetName = Literal["linear", "mlp", "cnn_s", "cnn_m", "lenet", "resnet18_cifar", "resnet_deeper"]
PRESETS: tuple[str, ...] = PresetName.__args__

# blocks per stage and block type for the CIFAR ResNets
RESNET_STAGES: dict[int, tuple[str, tuple[int, ...]]] = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
    152: ("bottleneck", (3, 8, 36, 3)),
    200: ("bottleneck", (3, 24, 36, 3)),
}
RESNET_CHANNELS = (64, 128, 256, 512)
BOTTLENECK_EXPANSION = 4

_frozen = ConfigDict(frozen=True, extra="forbid")


class ActivationKind(BaseModel):
    model_config = _frozen

    name: ActivationName
    slope: float = Field(default=0.0, ge=0.0, lt=1.0)
    gain: float = Field(default=1.0, gt=0.0)
    alpha: float = Field(default=1.0, gt=0.0)

    @classmethod
    def relu(cls) -> "ActivationKind":
        return cls(name="relu")

    @classmethod
    def leaky_relu(cls, slope: float = 0.1) -> "ActivationKind":
        return cls(name="leaky_relu", slope=slope)

    @classmethod
    def scaled_leaky_relu(cls, slope: float = 0.3, gain: float | None = None) -> "ActivationKind":
        """Leaky ReLU times a gain; the default gain keeps E[f(Z)^2] = 1 for Z ~ N(0, 1)."""
        if gain is None:
            gain = math.sqrt(2.0 / (1.0 + slope**2))
        return cls(name="scaled_leaky_relu", slope=slope, gain=gain)

    @classmethod
    def parse(cls, text: str) -> "ActivationKind":
        """Parse the CLI shorthand ``name[:slope[:gain]]``, e.g. ``leaky_relu:0.1``."""
        name, *params = text.strip().split(":")
        match name:
            case "leaky_relu":
                return cls.leaky_relu(float(params[0]) if params else 0.1)
            case "scaled_leaky_relu":
                slope = float(params[0]) if params else 0.3
                gain = float(params[1]) if len(params) > 1 else None
                return cls.scaled_leaky_relu(slope, gain)
            case "elu":
                return cls(name="elu", alpha=float(params[0]) if params else 1.0)
            case _:
                return cls(name=name)

    @property
    def label(self) -> str:
        match self.name:
            case "leaky_relu":
                return f"leaky_relu({self.slope:g})"
            case "scaled_leaky_relu":
                return f"scaled_leaky_relu({self.slope:g})"
            case _:
                return self.name


class Dense(BaseModel):
    model_config = _frozen
    kind: Literal["dense"] = "dense"
    units: PositiveInt
    head: bool = False


class Conv2d(BaseModel):
    model_config = _frozen
    kind: Literal["conv2d"] = "conv2d"
    filters: PositiveInt
    kernel: tuple[PositiveInt, PositiveInt] = (3, 3)
    stride: PositiveInt = 1
    padding: Literal["same", "valid"] = "same"


class MaxPool(BaseModel):
    model_config = _frozen
    kind: Literal["max_pool"] = "max_pool"
    window: PositiveInt = 2
    stride: PositiveInt = 2


class AvgPool(BaseModel):
    model_config = _frozen
    kind: Literal["avg_pool"] = "avg_pool"
    window: PositiveInt = 2
    stride: PositiveInt = 2


class GlobalAvgPool(BaseModel):
    model_config = _frozen
    kind: Literal["global_avg_pool"] = "global_avg_pool"


class BatchNorm(BaseModel):
    model_config = _frozen
    kind: Literal["batch_norm"] = "batch_norm"
    epsilon: float = Field(default=1e-5, gt=0.0)


class Flatten(BaseModel):
    model_config = _frozen
    kind: Literal["flatten"] = "flatten"


class Activation(BaseModel):
    model_config = _frozen
    kind: Literal["activation"] = "activation"
    activation: ActivationKind


class ResidualBlock(BaseModel):
    """``inner(x) + shortcut(x)`` when ``skip``, else ``inner(x)``.

    The shortcut is the identity when shapes match; otherwise, with ``projection`` set, a strided
    1x1 convolution (followed by batch norm when ``projection_batchnorm``) maps x to the inner
    path's shape.
    """

    model_config = _frozen
    kind: Literal["residual_block"] = "residual_block"
    layers: list["LayerSpec"]
    projection: bool = True
    projection_batchnorm: bool = False
    skip: bool = True


LayerSpec = Annotated[
    Dense | Conv2d | MaxPool | AvgPool | GlobalAvgPool | BatchNorm | Flatten | Activation | ResidualBlock,
    Field(discriminator="kind"),
]
ResidualBlock.model_rebuild()


def default_init_scheme(preset: str) -> InitScheme:
    """He normal for the ResNets, Glorot normal for everything else."""
    if preset.startswith("resnet"):
        return InitScheme(kind=InitKind.HE_NORMAL)
    return InitScheme(kind=InitKind.GLOROT_NORMAL)


class ArchitectureSpec(BaseModel):
    """A network family plus the knobs the ablations turn.

    ``init_scheme`` and ``use_batchnorm`` default to the preset's own choice when left unset:
    He normal with batch norm for the ResNets, Glorot normal without batch norm otherwise.
    """

    model_config = _frozen

    preset: PresetName
    depth: int | None = None
    width_multiplier: float = Field(default=1.0, gt=0.0)
    depth_multiplier: PositiveInt = 1
    activation_override: ActivationKind | None = None
    init_scheme: InitScheme | None = None
    use_batchnorm: bool | None = None
    use_skip: bool = True
    output_dim: PositiveInt = 1
    mlp_hidden: tuple[PositiveInt, ...] | None = None
    batchnorm_epsilon: float = Field(default=1e-5, gt=0.0)

    @field_validator("depth")
    @classmethod
    def _check_depth(cls, v: int | None) -> int | None:
        if v is not None and v not in RESNET_STAGES:
            raise ValueError(f"resnet depth must be one of {sorted(RESNET_STAGES)}, got {v}")
        return v

    @model_validator(mode="after")
    def _check_overrides(self) -> "ArchitectureSpec":
        if self.preset == "resnet_deeper" and self.depth is None:
            raise ValueError("resnet_deeper needs a depth")
        if self.preset != "resnet_deeper" and self.depth is not None:
            raise ValueError(f"depth only applies to resnet_deeper, not {self.preset}")
        if self.mlp_hidden is not None and self.preset != "mlp":
            raise ValueError(f"mlp_hidden only applies to the mlp preset, not {self.preset}")
        if self.preset == "linear" and self.depth_multiplier != 1:
            raise ValueError("the linear preset has no hidden layers to repeat")
        return self

    @property
    def is_resnet(self) -> bool:
        return self.preset.startswith("resnet")

    @property
    def resolved_init(self) -> InitScheme:
        return self.init_scheme if self.init_scheme is not None else default_init_scheme(self.preset)

    @property
    def resolved_activation(self) -> ActivationKind:
        return self.activation_override if self.activation_override is not None else ActivationKind.relu()

    @property
    def batchnorm_enabled(self) -> bool:
        return self.use_batchnorm if self.use_batchnorm is not None else self.is_resnet

    @property
    def identifier(self) -> str:
        """Compact, stable name for reports, e.g. ``cnn_s``, ``mlp-w2-d3``, ``resnet18_cifar-noskip``."""
        ident = f"resnet{self.depth}" if self.preset == "resnet_deeper" else self.preset
        if self.mlp_hidden is not None:
            ident += "-h" + "x".join(str(h) for h in self.mlp_hidden)
        if self.width_multiplier != 1.0:
            ident += f"-w{self.width_multiplier:g}"
        if self.depth_multiplier != 1:
            ident += f"-d{self.depth_multiplier}"
        if self.use_batchnorm is not None and self.use_batchnorm != self.is_resnet:
            ident += "-bn" if self.use_batchnorm else "-nobn"
        if not self.use_skip:
            ident += "-noskip"
        if self.output_dim != 1:
            ident += f"-k{self.output_dim}"
        return ident

    def width(self, units: int) -> int:
        return max(1, round(units * self.width_multiplier))


def make_architecture(preset: str, **overrides) -> ArchitectureSpec:
    """Build a validated ``ArchitectureSpec`` for a named preset.

    Raises:
        UnknownPresetError: ``preset`` isn't one of ``PRESETS``.
        IncompatibleOverridesError: the overrides don't validate against the preset.
    """
    if preset not in PRESETS:
        raise UnknownPresetError(f"unknown preset {preset!r}, expected one of {', '.join(PRESETS)}")
    try:
        return ArchitectureSpec(preset=preset, **overrides)
    except ValidationError as e:
        raise IncompatibleOverridesError(f"invalid overrides for {preset}: {e}") from e


def delta_orthogonal_variant(arch: ArchitectureSpec, slope: float = 0.3) -> ArchitectureSpec:
    """The rescaled variant of a network: delta-orthogonal convs, orthogonal dense layers, and a
    variance-preserving scaled leaky ReLU."""
    return arch.model_copy(
        update={
            "init_scheme": InitScheme(kind=InitKind.DELTA_ORTHOGONAL),
            "activation_override": ActivationKind.scaled_leaky_relu(slope),
        }
    )


def _hidden(arch: ArchitectureSpec, layer: Dense | Conv2d) -> list:
    """A hidden affine layer, its optional batch norm, and the activation."""
    block: list = [layer]
    if arch.batchnorm_enabled:
        block.append(BatchNorm(epsilon=arch.batchnorm_epsilon))
    block.append(Activation(activation=arch.resolved_activation))
    return block


def _conv_stack(arch: ArchitectureSpec, filters: int, pool: bool) -> list:
    layers = []
    for _ in range(arch.depth_multiplier):
        layers += _hidden(arch, Conv2d(filters=arch.width(filters), kernel=(5, 5)))
    if pool:
        layers.append(MaxPool(window=2, stride=2))
    return layers


def _basic_block(arch: ArchitectureSpec, channels: int, stride: int) -> list:
    bn = [BatchNorm(epsilon=arch.batchnorm_epsilon)] if arch.batchnorm_enabled else []
    inner = [
        Conv2d(filters=channels, kernel=(3, 3), stride=stride),
        *bn,
        Activation(activation=arch.resolved_activation),
        Conv2d(filters=channels, kernel=(3, 3)),
        *bn,
    ]
    return [
        ResidualBlock(layers=inner, skip=arch.use_skip, projection_batchnorm=arch.batchnorm_enabled),
        Activation(activation=arch.resolved_activation),
    ]


def _bottleneck_block(arch: ArchitectureSpec, channels: int, stride: int) -> list:
    bn = [BatchNorm(epsilon=arch.batchnorm_epsilon)] if arch.batchnorm_enabled else []
    act = Activation(activation=arch.resolved_activation)
    inner = [
        Conv2d(filters=channels, kernel=(1, 1)),
        *bn,
        act,
        Conv2d(filters=channels, kernel=(3, 3), stride=stride),
        *bn,
        act,
        Conv2d(filters=channels * BOTTLENECK_EXPANSION, kernel=(1, 1)),
        *bn,
    ]
    return [
        ResidualBlock(layers=inner, skip=arch.use_skip, projection_batchnorm=arch.batchnorm_enabled),
        act,
    ]


def _resnet_layers(arch: ArchitectureSpec, depth: int) -> list:
    block_type, stages = RESNET_STAGES[depth]
    make_block = _basic_block if block_type == "basic" else _bottleneck_block
    # CIFAR stem: a single 3x3 conv, no max-pool
    layers = _hidden(arch, Conv2d(filters=arch.width(RESNET_CHANNELS[0]), kernel=(3, 3)))
    for stage, (channels, blocks) in enumerate(zip(RESNET_CHANNELS, stages)):
        for block in range(blocks * arch.depth_multiplier):
            stride = 2 if stage > 0 and block == 0 else 1
            layers += make_block(arch, arch.width(channels), stride)
    layers.append(GlobalAvgPool())
    return layers


def resolve_layers(arch: ArchitectureSpec) -> list:
    """Expand an ``ArchitectureSpec`` into its concrete layer list, output head included."""
    head = Dense(units=arch.output_dim, head=True)
    match arch.preset:
        case "linear":
            body = [Flatten()]
        case "mlp":
            hidden = arch.mlp_hidden if arch.mlp_hidden is not None else (128, 128)
            body = [Flatten()]
            for _ in range(arch.depth_multiplier):
                for units in hidden:
                    body += _hidden(arch, Dense(units=arch.width(units)))
        case "cnn_s":
            body = [
                *_conv_stack(arch, 32, pool=True),
                *_conv_stack(arch, 64, pool=True),
                Flatten(),
                *_hidden(arch, Dense(units=arch.width(512))),
            ]
        case "cnn_m":
            body = [
                *_conv_stack(arch, 32, pool=True),
                *_conv_stack(arch, 64, pool=True),
                *_conv_stack(arch, 64, pool=False),
                *_conv_stack(arch, 32, pool=False),
                Flatten(),
                *_hidden(arch, Dense(units=arch.width(512))),
            ]
        case "lenet":
            # LeNet-5 with ReLU: 6 and 16 5x5 filters, average pooling, dense 120 and 84
            body = []
            for filters in (6, 16):
                for _ in range(arch.depth_multiplier):
                    body += _hidden(arch, Conv2d(filters=arch.width(filters), kernel=(5, 5)))
                body.append(AvgPool(window=2, stride=2))
            body.append(Flatten())
            for units in (120, 84):
                body += _hidden(arch, Dense(units=arch.width(units)))
        case "resnet18_cifar":
            body = _resnet_layers(arch, 18)
        case "resnet_deeper":
            body = _resnet_layers(arch, arch.depth)
        case _:
            raise UnknownPresetError(f"unknown preset {arch.preset!r}")
    return [*body, head]


def iter_layers(layers: list):
    """Depth-first walk over a layer list, descending into residual blocks."""
    for layer in layers:
        yield layer
        if isinstance(layer, ResidualBlock):
            yield from iter_layers(layer.layers)


def hidden_widths(arch: ArchitectureSpec) -> list[int]:
    """Units of every non-head dense layer, in order."""
    return [layer.units for layer in iter_layers(resolve_layers(arch)) if isinstance(layer, Dense) and not layer.head]


def conv_filters(arch: ArchitectureSpec) -> list[int]:
    """Filter counts of every conv layer on the main path, in order."""
    return [layer.filters for layer in iter_layers(resolve_layers(arch)) if isinstance(layer, Conv2d)]
