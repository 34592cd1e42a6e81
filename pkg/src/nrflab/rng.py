"""Deterministic random streams and weight initializers.

Every network parameter is drawn from an ``RngStream``: a Philox counter-based generator keyed by
``(base_seed, stream_index)``. Philox streams with different keys are independent, and the output
for a given key is the same on every platform numpy supports, so a feature column can always be
regenerated from its seed manifest.
"""

import logging
import math
from enum import IntEnum, StrEnum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from nrflab.constants import UINT64_MASK
from nrflab.errors import DegenerateFanError, ShapeError

logger = logging.getLogger(__name__)

# std of a unit normal truncated to [-2, 2]; truncated draws are divided by it so the final
# variance matches the scheme's formula
TRUNCATED_NORMAL_STD = 0.87962566103423978
TRUNCATION_BOUND = 2.0


class RngStream:
    """One independently owned random stream.

    Not thread-safe: a stream must only be consumed from one thread at a time. Derive one stream
    per unit of work instead of sharing.
    """

    __slots__ = ("base_seed", "stream_index", "_generator")

    def __init__(self, base_seed: int, stream_index: int):
        for name, value in (("base_seed", base_seed), ("stream_index", stream_index)):
            if not 0 <= value <= UINT64_MASK:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {value}")
        self.base_seed = int(base_seed)
        self.stream_index = int(stream_index)
        # 128-bit Philox key: high word is the stream index, low word the base seed
        key = (self.stream_index << 64) | self.base_seed
        self._generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(base_seed={self.base_seed}, stream_index={self.stream_index})"

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def standard_normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        return self._generator.standard_normal(size)

    def uniform(self, low: float, high: float, size: int | tuple[int, ...]) -> np.ndarray:
        return self._generator.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def random_raw(self, size: int) -> np.ndarray:
        """Raw 64-bit outputs of the bit generator, for reproducibility checks."""
        return self._generator.bit_generator.random_raw(size)


def derive_stream(base_seed: int, index: int) -> RngStream:
    """Return the stream for ``(base_seed, index)``.

    Calling this twice with the same arguments gives two streams that produce the same sequence.
    """
    return RngStream(base_seed, index)


# stream indices from here up are reserved for data-side draws; network i uses index i
DATA_STREAM_OFFSET = 2**63


class DataStream(IntEnum):
    """Data-side uses of randomness, each with its own stream index above ``DATA_STREAM_OFFSET``."""

    BLOB_MEANS = 0
    BLOB_TRAIN = 1
    BLOB_TEST = 2
    SUBSAMPLE = 3
    VALIDATION_SPLIT = 4

    @property
    def stream_index(self) -> int:
        return DATA_STREAM_OFFSET + int(self)


def data_stream(seed: int, purpose: DataStream) -> RngStream:
    """Stream for shuffles and synthetic data; never shared with a network's weights."""
    return RngStream(seed, DataStream(purpose).stream_index)


class InitKind(StrEnum):
    GLOROT_NORMAL = "glorot_normal"
    GLOROT_UNIFORM = "glorot_uniform"
    HE_NORMAL = "he_normal"
    HE_UNIFORM = "he_uniform"
    LECUN_NORMAL = "lecun_normal"
    ORTHOGONAL = "orthogonal"
    DELTA_ORTHOGONAL = "delta_orthogonal"
    PLAIN_NORMAL = "plain_normal"
    ZEROS = "zeros"


NORMAL_KINDS = frozenset(
    {InitKind.GLOROT_NORMAL, InitKind.HE_NORMAL, InitKind.LECUN_NORMAL, InitKind.PLAIN_NORMAL}
)
ORTHOGONAL_KINDS = frozenset({InitKind.ORTHOGONAL, InitKind.DELTA_ORTHOGONAL})


class InitScheme(BaseModel):
    """A weight distribution: the prior the network parameters are sampled from."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: InitKind
    truncation: bool = True
    sigma: float | None = Field(default=None, gt=0, description="std for plain_normal")
    gain: float = Field(default=1.0, gt=0, description="multiplier for orthogonal schemes")

    @model_validator(mode="after")
    def _check_sigma(self) -> "InitScheme":
        if self.kind == InitKind.PLAIN_NORMAL and self.sigma is None:
            raise ValueError("plain_normal needs sigma")
        if self.kind != InitKind.PLAIN_NORMAL and self.sigma is not None:
            raise ValueError(f"sigma only applies to plain_normal, not {self.kind}")
        return self

    @property
    def label(self) -> str:
        """Short identifier used in reports, e.g. ``he_normal`` or ``plain_normal(0.5)``."""
        label = f"plain_normal({self.sigma:g})" if self.kind == InitKind.PLAIN_NORMAL else str(self.kind)
        if self.kind in NORMAL_KINDS and not self.truncation:
            label += "_untruncated"
        return label

    def normal_std(self, fan_in: int, fan_out: int) -> float:
        match self.kind:
            case InitKind.GLOROT_NORMAL:
                return math.sqrt(2.0 / (fan_in + fan_out))
            case InitKind.HE_NORMAL:
                return math.sqrt(2.0 / fan_in)
            case InitKind.LECUN_NORMAL:
                return math.sqrt(1.0 / fan_in)
            case InitKind.PLAIN_NORMAL:
                return float(self.sigma)
            case _:
                raise ValueError(f"{self.kind} is not a normal scheme")

    def uniform_limit(self, fan_in: int, fan_out: int) -> float:
        match self.kind:
            case InitKind.GLOROT_UNIFORM:
                return math.sqrt(6.0 / (fan_in + fan_out))
            case InitKind.HE_UNIFORM:
                return math.sqrt(6.0 / fan_in)
            case _:
                raise ValueError(f"{self.kind} is not a uniform scheme")


def compute_fans(shape: tuple[int, ...]) -> tuple[int, int]:
    """Fan-in and fan-out for a weight shape.

    Dense kernels are ``(fan_in, fan_out)``; conv kernels are ``(kh, kw, c_in, c_out)`` and their
    fans are scaled by the receptive field size ``kh * kw``.
    """
    if len(shape) == 0:
        raise ShapeError("cannot compute fans of a scalar")
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive_field = math.prod(shape[:-2])
    return receptive_field * shape[-2], receptive_field * shape[-1]


def _truncated_standard_normal(stream: RngStream, shape: tuple[int, ...]) -> np.ndarray:
    """Unit-variance draws from a normal truncated at two of its own standard deviations.

    The underlying normal is cut at +-2 and then divided by ``TRUNCATED_NORMAL_STD``, so the
    result has variance 1 and magnitude at most ``2 / TRUNCATED_NORMAL_STD`` (about 2.27). Scaled
    by a scheme's ``std``, entries stay within two standard deviations of the pre-truncation
    normal, ``2 * std / TRUNCATED_NORMAL_STD``, the same convention as Keras' truncated initializers.
    """
    # rejection-resample anything outside +-2, in a fixed order so results stay deterministic
    values = stream.standard_normal(shape)
    outside = np.abs(values) > TRUNCATION_BOUND
    while outside.any():
        values[outside] = stream.standard_normal(int(outside.sum()))
        outside = np.abs(values) > TRUNCATION_BOUND
    return values / TRUNCATED_NORMAL_STD


def _orthogonal_matrix(stream: RngStream, rows: int, cols: int) -> np.ndarray:
    """Orthonormal rows (rows <= cols) or columns (rows > cols), sliced from a square Q."""
    size = max(rows, cols)
    q, r = np.linalg.qr(stream.standard_normal((size, size)))
    # fix the QR sign ambiguity so Q is Haar-distributed and unique for the draw
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    q = q * signs[np.newaxis, :]
    return q[:rows, :cols]


def init_tensor(
    scheme: InitScheme,
    shape: tuple[int, ...] | list[int],
    fan: tuple[int, int] | None,
    stream: RngStream,
) -> np.ndarray:
    """Draw a float32 tensor of ``shape`` from ``scheme``.

    Args:
        scheme: the distribution to sample from.
        shape: tensor shape; 2-D for ``orthogonal``, ``(kh, kw, c_in, c_out)`` with odd kh/kw for
            ``delta_orthogonal``.
        fan: ``(fan_in, fan_out)``; computed from ``shape`` when None.
        stream: the stream to consume.

    Raises:
        ShapeError: empty shape, or a shape the orthogonal schemes can't fill.
        DegenerateFanError: a fan-scaled scheme got a zero fan.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d <= 0 for d in shape):
        raise ShapeError(f"cannot initialize a tensor of shape {shape}")
    fan_in, fan_out = fan if fan is not None else compute_fans(shape)

    kind = scheme.kind
    if kind == InitKind.ZEROS:
        return np.zeros(shape, dtype=np.float32)

    if kind in (InitKind.GLOROT_NORMAL, InitKind.GLOROT_UNIFORM) and fan_in + fan_out <= 0:
        raise DegenerateFanError(f"{kind} needs a positive fan sum, got fan={fan_in, fan_out}")
    if kind in (InitKind.HE_NORMAL, InitKind.HE_UNIFORM, InitKind.LECUN_NORMAL) and fan_in <= 0:
        raise DegenerateFanError(f"{kind} needs a positive fan_in, got {fan_in}")

    if kind in NORMAL_KINDS:
        std = scheme.normal_std(fan_in, fan_out)
        if scheme.truncation:
            values = _truncated_standard_normal(stream, shape) * std
        else:
            values = stream.standard_normal(shape) * std
        return values.astype(np.float32)

    if kind in (InitKind.GLOROT_UNIFORM, InitKind.HE_UNIFORM):
        limit = scheme.uniform_limit(fan_in, fan_out)
        return stream.uniform(-limit, limit, shape).astype(np.float32)

    if kind == InitKind.ORTHOGONAL:
        if len(shape) != 2:
            raise ShapeError(f"orthogonal init needs a 2-D shape, got {shape}")
        return (scheme.gain * _orthogonal_matrix(stream, *shape)).astype(np.float32)

    if kind == InitKind.DELTA_ORTHOGONAL:
        if len(shape) != 4:
            raise ShapeError(f"delta_orthogonal init needs a (kh, kw, c_in, c_out) shape, got {shape}")
        kh, kw, c_in, c_out = shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"delta_orthogonal init needs odd spatial extent, got {kh}x{kw}")
        values = np.zeros(shape, dtype=np.float64)
        values[kh // 2, kw // 2] = scheme.gain * _orthogonal_matrix(stream, c_in, c_out)
        return values.astype(np.float32)

    raise ValueError(f"unhandled init scheme {kind}")
