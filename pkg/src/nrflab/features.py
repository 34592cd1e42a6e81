"""Neural random features and the prior-kernel estimator.

Column ``j`` of a feature matrix is the scalar logit of the network built from stream
``(base_seed, j)``; the embedding of an input is that row scaled by ``1/sqrt(n)``. The inner product
of two embeddings is the Monte-Carlo estimate of the prior kernel, the expected product of the two
inputs' logits over random initializations.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt

from nrflab.errors import HeadDimensionError, NumericOverflowError, ShapeError, UndefinedAngleError
from nrflab.models.architecture import ArchitectureSpec
from nrflab.network import build_network, forward
from nrflab.utils import timed

logger = logging.getLogger(__name__)


class FeatureManifest(BaseModel):
    """Everything needed to regenerate a feature matrix bit-exactly, given the inputs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    arch: ArchitectureSpec
    base_seed: int = Field(ge=0, lt=2**64)
    n: PositiveInt
    scaled: bool = True
    dataset_fingerprint: int = Field(default=0, ge=0, lt=2**64)


@dataclass(frozen=True, slots=True)
class FeatureMatrix:
    """N x n neural random features.

    ``raw`` holds the unscaled logits; the ``1/sqrt(n)`` scaling is applied on read when
    ``manifest.scaled`` is set, so a prefix of a wide extraction is a valid narrower one.
    With ``output_dim`` k > 1 each network contributes k adjacent columns.
    """

    raw: np.ndarray
    manifest: FeatureManifest

    def __post_init__(self):
        expected = self.manifest.n * self.manifest.arch.output_dim
        if self.raw.ndim != 2 or self.raw.shape[1] != expected:
            raise ShapeError(f"feature matrix has shape {self.raw.shape}, manifest says {expected} columns")

    @property
    def n(self) -> int:
        return self.manifest.n

    @property
    def num_examples(self) -> int:
        return self.raw.shape[0]

    @property
    def values(self) -> np.ndarray:
        if not self.manifest.scaled:
            return self.raw
        return (self.raw / np.float32(math.sqrt(self.n))).astype(np.float32)

    def prefix(self, n: int) -> "FeatureMatrix":
        """The features of the first ``n`` networks, as if extracted with ``n`` directly."""
        if not 1 <= n <= self.n:
            raise ValueError(f"prefix length must be in [1, {self.n}], got {n}")
        k = self.manifest.arch.output_dim
        return FeatureMatrix(
            raw=self.raw[:, : n * k],
            manifest=self.manifest.model_copy(update={"n": n}),
        )


def _column(
    arch: ArchitectureSpec,
    inputs: np.ndarray,
    base_seed: int,
    index: int,
    accumulate64: bool,
) -> np.ndarray:
    net = build_network(arch, inputs.shape[1:], base_seed, index)
    try:
        return forward(net, inputs, accumulate64=accumulate64)
    except NumericOverflowError as e:
        # abort the column; zeroing it would bias the kernel estimate
        raise NumericOverflowError(
            f"non-finite feature at example {e.example}, seed ({base_seed}, {index}), layer {e.layer}",
            layer=e.layer,
            example=e.example,
            seed=(base_seed, index),
        ) from e


def _network_logits(
    arch: ArchitectureSpec,
    inputs: np.ndarray,
    base_seed: int,
    columns: range,
    workers: int,
    accumulate64: bool,
) -> np.ndarray:
    """(N, len(columns) * k) raw logits, one network per column index."""

    def run(index: int) -> np.ndarray:
        return _column(arch, inputs, base_seed, index, accumulate64)

    if workers > 1 and len(columns) > 1:
        # map keeps submission order, so the result doesn't depend on scheduling
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="nrf") as pool:
            blocks = list(pool.map(run, columns))
    else:
        blocks = [run(index) for index in columns]
    if not blocks:
        return np.zeros((inputs.shape[0], 0), dtype=np.float32)
    return np.concatenate(blocks, axis=1).astype(np.float32, copy=False)


def extract_features(
    arch: ArchitectureSpec,
    inputs: np.ndarray,
    n: int,
    base_seed: int,
    *,
    scaled: bool = True,
    dataset_fingerprint: int = 0,
    workers: int = 1,
    accumulate64: bool = False,
    allow_multi_output: bool = False,
) -> FeatureMatrix:
    """Embed ``inputs`` with ``n`` independently initialized networks.

    Args:
        arch: network family; must have a single output unless ``allow_multi_output``.
        inputs: batch of N examples, shape ``(N, *input_shape)``.
        n: number of sampled networks.
        base_seed: seed for every network; column j uses stream ``(base_seed, j)``.
        scaled: apply the ``1/sqrt(n)`` embedding scale on read.
        dataset_fingerprint: recorded in the manifest so caches can be checked against data.
        workers: threads to spread columns over.
        accumulate64: accumulate dot products in float64.
        allow_multi_output: permit k > 1 heads (k adjacent columns per network).

    Raises:
        HeadDimensionError: ``arch.output_dim != 1`` and multi-output wasn't requested.
        NumericOverflowError: some network produced a non-finite logit.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    if arch.output_dim != 1 and not allow_multi_output:
        raise HeadDimensionError(f"feature extraction needs a single-output head, {arch.identifier} has {arch.output_dim}")
    inputs = np.asarray(inputs, dtype=np.float32)
    with timed(f"extracting {n} features of {arch.identifier} for {inputs.shape[0]} examples", logging.INFO):
        raw = _network_logits(arch, inputs, base_seed, range(n), workers, accumulate64)
    manifest = FeatureManifest(
        arch=arch, base_seed=base_seed, n=n, scaled=scaled, dataset_fingerprint=dataset_fingerprint
    )
    return FeatureMatrix(raw=raw, manifest=manifest)


def extend_features(
    features: FeatureMatrix,
    inputs: np.ndarray,
    n: int,
    *,
    workers: int = 1,
    accumulate64: bool = False,
) -> FeatureMatrix:
    """Grow ``features`` to ``n`` networks, computing only the new columns."""
    manifest = features.manifest
    if n < manifest.n:
        return features.prefix(n)
    inputs = np.asarray(inputs, dtype=np.float32)
    if inputs.shape[0] != features.num_examples:
        raise ShapeError(f"features cover {features.num_examples} examples, got {inputs.shape[0]} inputs")
    extra = _network_logits(manifest.arch, inputs, manifest.base_seed, range(manifest.n, n), workers, accumulate64)
    return FeatureMatrix(
        raw=np.concatenate([features.raw, extra], axis=1),
        manifest=manifest.model_copy(update={"n": n}),
    )


@dataclass(frozen=True, slots=True)
class KernelEstimate:
    """Mean of n per-network logit products, with their sample variance."""

    value: float
    n: int
    variance: float

    @classmethod
    def from_products(cls, products: np.ndarray) -> "KernelEstimate":
        products = np.asarray(products, dtype=np.float64)
        n = products.shape[0]
        if n == 0:
            raise ValueError("need at least one product")
        variance = float(products.var(ddof=1)) if n > 1 else 0.0
        return cls(value=float(products.sum() / n), n=n, variance=variance)

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.variance / self.n)


def estimate_kernel(
    arch: ArchitectureSpec,
    x: np.ndarray,
    x2: np.ndarray,
    n: int,
    base_seed: int,
    *,
    workers: int = 1,
    accumulate64: bool = False,
) -> KernelEstimate:
    """Finite-sample prior kernel between two single inputs.

    Uses the same streams as ``extract_features``, so the value matches the inner product of the
    two inputs' embeddings. Each input gets its own forward pass, which makes the estimate
    exactly symmetric in its arguments.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    x = np.asarray(x, dtype=np.float32)[np.newaxis]
    x2 = np.asarray(x2, dtype=np.float32)[np.newaxis]
    if x.shape != x2.shape:
        raise ShapeError(f"kernel inputs differ in shape: {x.shape[1:]} vs {x2.shape[1:]}")

    def products(index: int) -> float:
        net = build_network(arch, x.shape[1:], base_seed, index)
        a = forward(net, x, accumulate64=accumulate64)[0].astype(np.float64)
        b = forward(net, x2, accumulate64=accumulate64)[0].astype(np.float64)
        return float(np.dot(a, b))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="nnpk") as pool:
            values = list(pool.map(products, range(n)))
    else:
        values = [products(index) for index in range(n)]
    return KernelEstimate.from_products(np.array(values))


def gram(features: FeatureMatrix | np.ndarray, other: FeatureMatrix | np.ndarray | None = None) -> np.ndarray:
    """Matrix of embedding inner products, in float64.

    With one argument the result is ``Phi Phi^T``, symmetric bit-for-bit. With ``other`` it is the
    cross-Gram ``Phi Psi^T`` (e.g. test rows against train rows).
    """
    phi = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    phi = phi.astype(np.float64)
    if other is None:
        g = phi @ phi.T
        # a + b == b + a exactly, so this is symmetric regardless of BLAS blocking
        return (g + g.T) / 2.0
    psi = other.values if isinstance(other, FeatureMatrix) else np.asarray(other)
    psi = psi.astype(np.float64)
    if psi.shape[1] != phi.shape[1]:
        raise ShapeError(f"feature widths differ: {phi.shape[1]} vs {psi.shape[1]}")
    return phi @ psi.T


class LinearOracle(BaseModel):
    """Closed-form kernel of a bias-free linear map with iid N(0, sigma^2) weights."""

    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["linear"] = "linear"
    sigma: float = Field(default=1.0, gt=0)


class ReluOneHiddenOracle(BaseModel):
    """Closed-form kernel of one bias-free ReLU layer of ``width`` units and a linear head.

    Hidden weights are N(0, sigma_w^2), head weights N(0, sigma_v^2); the expectation is the
    degree-1 arc-cosine kernel times ``sigma_v^2 * width * sigma_w^2``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")
    kind: Literal["relu_one_hidden"] = "relu_one_hidden"
    width: PositiveInt
    sigma_w: float = Field(gt=0)
    sigma_v: float = Field(gt=0)


def arc_cosine_angle(x: np.ndarray, x2: np.ndarray) -> tuple[float, float, float]:
    """Norms of both inputs and the angle between them."""
    norm_x = float(np.linalg.norm(x))
    norm_x2 = float(np.linalg.norm(x2))
    if norm_x == 0.0 or norm_x2 == 0.0:
        raise UndefinedAngleError("the angle between inputs is undefined for a zero-norm input")
    cos = float(np.clip(np.dot(x, x2) / (norm_x * norm_x2), -1.0, 1.0))
    return norm_x, norm_x2, math.acos(cos)


def analytic_kernel(oracle: LinearOracle | ReluOneHiddenOracle, x: np.ndarray, x2: np.ndarray) -> float:
    """Exact prior kernel for the architectures that have one."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x2 = np.asarray(x2, dtype=np.float64).ravel()
    if x.shape != x2.shape:
        raise ShapeError(f"kernel inputs differ in shape: {x.shape} vs {x2.shape}")
    match oracle:
        case LinearOracle():
            return oracle.sigma**2 * float(np.dot(x, x2))
        case ReluOneHiddenOracle():
            norm_x, norm_x2, theta = arc_cosine_angle(x, x2)
            arc = math.sin(theta) + (math.pi - theta) * math.cos(theta)
            scale = oracle.sigma_v**2 * oracle.width * oracle.sigma_w**2
            return scale * norm_x * norm_x2 / (2.0 * math.pi) * arc
        case _:
            raise ValueError(f"unknown oracle {oracle!r}")
