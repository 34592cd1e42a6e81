"""Forward-only network engine.

Tensors are float32 numpy arrays in NHWC layout. Conv kernels are ``(kh, kw, c_in, c_out)`` and
dense kernels ``(fan_in, fan_out)``. Networks are materialized once from a seed and never change
afterwards; ``forward`` is a pure function of the weights and the input batch.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from nrflab.constants import FORWARD_CHUNK_SIZE
from nrflab.errors import NumericOverflowError, ShapeError
from nrflab.models.architecture import (
    Activation,
    ActivationKind,
    ArchitectureSpec,
    AvgPool,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool,
    ResidualBlock,
    resolve_layers,
)
from nrflab.rng import (
    DATA_STREAM_OFFSET,
    InitKind,
    InitScheme,
    RngStream,
    compute_fans,
    derive_stream,
    init_tensor,
)

logger = logging.getLogger(__name__)

Shape = tuple[int, ...]


def _frozen_array(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, slots=True)
class LayerWeights:
    """Parameters of one layer.

    Residual blocks keep their inner path's weights in ``inner`` and, when a projection shortcut
    was built, the shortcut layers and weights in ``shortcut_layers``/``shortcut``.
    """

    arrays: Mapping[str, np.ndarray] = field(default_factory=lambda: MappingProxyType({}))
    inner: tuple["LayerWeights", ...] = ()
    shortcut_layers: tuple = ()
    shortcut: tuple["LayerWeights", ...] = ()

    @property
    def size(self) -> int:
        total = sum(arr.size for arr in self.arrays.values())
        return total + sum(w.size for w in self.inner) + sum(w.size for w in self.shortcut)


NO_WEIGHTS = LayerWeights()


@dataclass(frozen=True, slots=True)
class NetworkInstance:
    """One sampled parameter vector theta and the layers it belongs to."""

    arch: ArchitectureSpec
    input_shape: Shape
    layers: tuple
    weights: tuple[LayerWeights, ...]
    base_seed: int
    stream_index: int
    init_fallbacks: tuple[str, ...] = ()

    @property
    def parameter_count(self) -> int:
        """Total scalar count m, BatchNorm statistics included."""
        return sum(w.size for w in self.weights)

    @property
    def output_dim(self) -> int:
        return self.arch.output_dim


def _conv_output_hw(h: int, w: int, layer: Conv2d) -> tuple[int, int]:
    kh, kw = layer.kernel
    if layer.padding == "same":
        return math.ceil(h / layer.stride), math.ceil(w / layer.stride)
    if h < kh or w < kw:
        raise ShapeError(f"valid {kh}x{kw} conv on a {h}x{w} input")
    return (h - kh) // layer.stride + 1, (w - kw) // layer.stride + 1


def _pool_output_hw(h: int, w: int, window: int, stride: int) -> tuple[int, int]:
    if h < window or w < window:
        raise ShapeError(f"{window}x{window} pooling on a {h}x{w} input")
    return (h - window) // stride + 1, (w - window) // stride + 1


def infer_shape(layer, in_shape: Shape) -> Shape:
    """Per-example output shape of ``layer`` for a per-example ``in_shape``."""
    match layer:
        case Dense():
            if len(in_shape) != 1:
                raise ShapeError(f"dense layer needs a flat input, got {in_shape}")
            return (layer.units,)
        case Conv2d():
            if len(in_shape) != 3:
                raise ShapeError(f"conv2d needs an HxWxC input, got {in_shape}")
            return (*_conv_output_hw(in_shape[0], in_shape[1], layer), layer.filters)
        case MaxPool() | AvgPool():
            if len(in_shape) != 3:
                raise ShapeError(f"pooling needs an HxWxC input, got {in_shape}")
            return (*_pool_output_hw(in_shape[0], in_shape[1], layer.window, layer.stride), in_shape[2])
        case GlobalAvgPool():
            if len(in_shape) != 3:
                raise ShapeError(f"global average pooling needs an HxWxC input, got {in_shape}")
            return (in_shape[2],)
        case Flatten():
            return (math.prod(in_shape),)
        case BatchNorm() | Activation():
            return in_shape
        case ResidualBlock():
            return infer_shapes(layer.layers, in_shape)
        case _:
            raise ShapeError(f"unknown layer {layer!r}")


def infer_shapes(layers, input_shape: Shape) -> Shape:
    shape = tuple(input_shape)
    for layer in layers:
        shape = infer_shape(layer, shape)
    return shape


def _projection_layers(block: ResidualBlock, in_shape: Shape, out_shape: Shape) -> tuple:
    """Shortcut layers taking ``in_shape`` to ``out_shape``: empty for the identity."""
    if in_shape == out_shape:
        return ()
    if not block.projection or len(in_shape) != 3 or len(out_shape) != 3:
        raise ShapeError(f"residual shapes differ ({in_shape} -> {out_shape}) and no projection is possible")
    # total stride of the inner path (7x7 -> 4x4 under same padding is stride 2)
    strided = (layer for layer in block.layers if isinstance(layer, Conv2d | MaxPool | AvgPool))
    stride = math.prod(layer.stride for layer in strided)
    layers: list = [Conv2d(filters=out_shape[2], kernel=(1, 1), stride=stride)]
    if block.projection_batchnorm:
        layers.append(BatchNorm())
    if infer_shapes(layers, in_shape) != out_shape:
        raise ShapeError(f"projection shortcut can't map {in_shape} to {out_shape}")
    return tuple(layers)


class _Builder:
    """Walks a layer list once, drawing weights from a single stream in layer order."""

    def __init__(self, arch: ArchitectureSpec, stream: RngStream):
        self.arch = arch
        self.scheme = arch.resolved_init
        self.stream = stream
        self.fallbacks: list[str] = []

    def _scheme_for(self, layer, path: str) -> InitScheme:
        scheme = self.scheme
        if isinstance(layer, Dense) and layer.head and layer.units == 1 and scheme.kind in (
            InitKind.ORTHOGONAL,
            InitKind.DELTA_ORTHOGONAL,
        ):
            # a one-column orthogonal matrix is just a unit vector; use the matching-variance normal
            self.fallbacks.append(f"{path}: {scheme.kind} -> lecun_normal (single-output head)")
            return InitScheme(kind=InitKind.LECUN_NORMAL, truncation=scheme.truncation)
        if isinstance(layer, Dense) and scheme.kind == InitKind.DELTA_ORTHOGONAL:
            self.fallbacks.append(f"{path}: delta_orthogonal -> orthogonal (dense layer)")
            return InitScheme(kind=InitKind.ORTHOGONAL, gain=scheme.gain)
        if isinstance(layer, Conv2d) and scheme.kind == InitKind.DELTA_ORTHOGONAL:
            kh, kw = layer.kernel
            if kh % 2 == 0 or kw % 2 == 0:
                self.fallbacks.append(f"{path}: delta_orthogonal -> orthogonal (even {kh}x{kw} kernel)")
                return InitScheme(kind=InitKind.ORTHOGONAL, gain=scheme.gain)
        return scheme

    def _kernel(self, layer, shape: Shape, path: str) -> np.ndarray:
        scheme = self._scheme_for(layer, path)
        fan = compute_fans(shape)
        if scheme.kind == InitKind.ORTHOGONAL and len(shape) == 4:
            # orthogonal conv kernels: orthogonalize the flattened (kh*kw*c_in, c_out) matrix
            flat = init_tensor(scheme, (math.prod(shape[:-1]), shape[-1]), fan, self.stream)
            return flat.reshape(shape)
        return init_tensor(scheme, shape, fan, self.stream)

    def build(self, layers, in_shape: Shape, prefix: str = "") -> tuple[tuple[LayerWeights, ...], Shape]:
        weights = []
        shape = tuple(in_shape)
        for idx, layer in enumerate(layers):
            path = f"{prefix}{idx}:{layer.kind}"
            out_shape = infer_shape(layer, shape)
            match layer:
                case Dense():
                    kernel = self._kernel(layer, (shape[0], layer.units), path)
                    arrays = {"kernel": kernel, "bias": np.zeros(layer.units, dtype=np.float32)}
                    weights.append(LayerWeights(MappingProxyType({k: _frozen_array(v) for k, v in arrays.items()})))
                case Conv2d():
                    kh, kw = layer.kernel
                    kernel = self._kernel(layer, (kh, kw, shape[2], layer.filters), path)
                    arrays = {"kernel": kernel, "bias": np.zeros(layer.filters, dtype=np.float32)}
                    weights.append(LayerWeights(MappingProxyType({k: _frozen_array(v) for k, v in arrays.items()})))
                case BatchNorm():
                    channels = shape[-1]
                    arrays = {
                        "scale": np.ones(channels),
                        "shift": np.zeros(channels),
                        "mean": np.zeros(channels),
                        "variance": np.ones(channels),
                    }
                    weights.append(LayerWeights(MappingProxyType({k: _frozen_array(v) for k, v in arrays.items()})))
                case ResidualBlock():
                    inner, _ = self.build(layer.layers, shape, prefix=f"{path}/")
                    shortcut_layers: tuple = ()
                    shortcut: tuple[LayerWeights, ...] = ()
                    if layer.skip:
                        shortcut_layers = _projection_layers(layer, shape, out_shape)
                        shortcut, _ = self.build(shortcut_layers, shape, prefix=f"{path}/shortcut/")
                    weights.append(
                        LayerWeights(inner=inner, shortcut_layers=shortcut_layers, shortcut=shortcut)
                    )
                case _:
                    weights.append(NO_WEIGHTS)
            shape = out_shape
        return tuple(weights), shape


def build_network(
    arch: ArchitectureSpec,
    input_shape: Shape,
    base_seed: int,
    stream_index: int,
) -> NetworkInstance:
    """Materialize one randomly initialized network.

    Every kernel is drawn from ``derive_stream(base_seed, stream_index)`` using the
    architecture's init scheme, in layer order. Biases start at zero; batch norm layers start at
    scale 1, shift 0, running mean 0, running variance 1.

    Raises:
        ShapeError: the architecture doesn't fit ``input_shape``.
    """
    if not 0 <= stream_index < DATA_STREAM_OFFSET:
        raise ValueError(f"network stream index must be below {DATA_STREAM_OFFSET}, got {stream_index}")
    layers = tuple(resolve_layers(arch))
    builder = _Builder(arch, derive_stream(base_seed, stream_index))
    weights, out_shape = builder.build(layers, tuple(input_shape))
    if out_shape != (arch.output_dim,):
        raise ShapeError(f"{arch.identifier} ends in shape {out_shape}, expected ({arch.output_dim},)")
    for note in builder.fallbacks:
        logger.debug(f"init fallback in {arch.identifier}: {note}")
    return NetworkInstance(
        arch=arch,
        input_shape=tuple(input_shape),
        layers=layers,
        weights=weights,
        base_seed=base_seed,
        stream_index=stream_index,
        init_fallbacks=tuple(builder.fallbacks),
    )


def apply_activation(kind: ActivationKind, x: np.ndarray) -> np.ndarray:
    """Elementwise activation; float32 in, float32 out."""
    x = np.asarray(x, dtype=np.float32)
    match kind.name:
        case "relu":
            out = np.maximum(x, 0)
        case "leaky_relu":
            out = np.where(x >= 0, x, kind.slope * x)
        case "scaled_leaky_relu":
            out = kind.gain * np.where(x >= 0, x, kind.slope * x)
        case "elu":
            out = np.where(x > 0, x, kind.alpha * np.expm1(np.minimum(x, 0)))
        case "sigmoid":
            out = expit(x)
        case "tanh":
            out = np.tanh(x)
        case "identity":
            out = x
        case _:
            raise ValueError(f"unknown activation {kind.name}")
    return out.astype(np.float32, copy=False)


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _affine(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, accumulate64: bool) -> np.ndarray:
    if accumulate64:
        return (x.astype(np.float64) @ kernel.astype(np.float64) + bias).astype(np.float32)
    return x @ kernel + bias


def _conv2d(x: np.ndarray, layer: Conv2d, weights: LayerWeights, accumulate64: bool) -> np.ndarray:
    kernel = weights.arrays["kernel"]
    kh, kw, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv kernel expects {c_in} channels, input has {x.shape[-1]}")
    stride = layer.stride
    if layer.padding == "same":
        pad_h = _same_padding(x.shape[1], kh, stride)
        pad_w = _same_padding(x.shape[2], kw, stride)
        x = np.pad(x, ((0, 0), pad_h, pad_w, (0, 0)))
    # (N, H', W', C, kh, kw) view, strided, then reordered to match the kernel's (kh, kw, C) rows
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, h_out, w_out = windows.shape[:3]
    patches = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * h_out * w_out, kh * kw * c_in)
    out = _affine(patches, kernel.reshape(kh * kw * c_in, c_out), weights.arrays["bias"], accumulate64)
    return out.reshape(n, h_out, w_out, c_out)


def _pool(x: np.ndarray, window: int, stride: int, reduce) -> np.ndarray:
    _pool_output_hw(x.shape[1], x.shape[2], window, stride)
    windows = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    return reduce(windows, axis=(-2, -1)).astype(np.float32, copy=False)


def _run_layers(layers, weights, x: np.ndarray, accumulate64: bool) -> np.ndarray:
    for layer, w in zip(layers, weights):
        x = apply_layer(layer, x, w, accumulate64=accumulate64)
    return x


def apply_layer(layer, x: np.ndarray, weights: LayerWeights = NO_WEIGHTS, *, accumulate64: bool = False) -> np.ndarray:
    """Apply one layer to a batch ``x`` (leading axis is the batch).

    Raises:
        ShapeError: ``x`` doesn't fit the layer or its weights.
    """
    match layer:
        case Dense():
            kernel = weights.arrays["kernel"]
            if x.ndim != 2 or x.shape[1] != kernel.shape[0]:
                raise ShapeError(f"dense kernel expects {kernel.shape[0]} features, input is {x.shape[1:]}")
            return _affine(x, kernel, weights.arrays["bias"], accumulate64)
        case Conv2d():
            if x.ndim != 4:
                raise ShapeError(f"conv2d needs an NHWC batch, got shape {x.shape}")
            return _conv2d(x, layer, weights, accumulate64)
        case MaxPool():
            return _pool(x, layer.window, layer.stride, np.max)
        case AvgPool():
            return _pool(x, layer.window, layer.stride, np.mean)
        case GlobalAvgPool():
            if x.ndim != 4:
                raise ShapeError(f"global average pooling needs an NHWC batch, got shape {x.shape}")
            return x.mean(axis=(1, 2), dtype=np.float32)
        case Flatten():
            return x.reshape(x.shape[0], -1)
        case BatchNorm():
            a = weights.arrays
            if x.shape[-1] != a["scale"].shape[0]:
                raise ShapeError(f"batch norm has {a['scale'].shape[0]} channels, input has {x.shape[-1]}")
            inv = a["scale"] / np.sqrt(a["variance"] + np.float32(layer.epsilon))
            return ((x - a["mean"]) * inv + a["shift"]).astype(np.float32, copy=False)
        case Activation():
            return apply_activation(layer.activation, x)
        case ResidualBlock():
            out = _run_layers(layer.layers, weights.inner, x, accumulate64)
            if not layer.skip:
                return out
            shortcut = _run_layers(weights.shortcut_layers, weights.shortcut, x, accumulate64)
            if shortcut.shape != out.shape:
                raise ShapeError(f"residual branches disagree: {out.shape} vs {shortcut.shape}")
            return out + shortcut
        case _:
            raise ShapeError(f"unknown layer {layer!r}")


def forward(
    net: NetworkInstance,
    batch: np.ndarray,
    *,
    accumulate64: bool = False,
    chunk_size: int = FORWARD_CHUNK_SIZE,
) -> np.ndarray:
    """Logits of ``net`` for every example in ``batch``, shape ``(N, k)``.

    The batch is processed in chunks; rows never interact, so chunking doesn't change results.

    Raises:
        ShapeError: ``batch`` doesn't match the network's input shape.
        NumericOverflowError: a layer produced a non-finite value; the error names the layer and
            the first offending example.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if batch.shape[1:] != net.input_shape:
        raise ShapeError(f"batch shape {batch.shape[1:]} doesn't match network input {net.input_shape}")
    outputs = []
    for start in range(0, batch.shape[0], chunk_size):
        x = batch[start : start + chunk_size]
        for idx, (layer, w) in enumerate(zip(net.layers, net.weights)):
            x = apply_layer(layer, x, w, accumulate64=accumulate64)
            finite = np.isfinite(x.reshape(x.shape[0], -1)).all(axis=1)
            if not finite.all():
                example = start + int(np.argmin(finite))
                name = f"{idx}:{layer.kind}"
                raise NumericOverflowError(
                    f"non-finite output at layer {name} for example {example}",
                    layer=name,
                    example=example,
                    seed=(net.base_seed, net.stream_index),
                )
        outputs.append(x)
    if not outputs:
        return np.zeros((0, net.output_dim), dtype=np.float32)
    return np.concatenate(outputs, axis=0)
