"""Linear probes: multinomial logistic regression on fixed features."""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, PositiveInt
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from nrflab.constants import (
    DEFAULT_GRADIENT_TOLERANCE,
    DEFAULT_HISTORY_SIZE,
    DEFAULT_MAX_ITERATIONS,
)
from nrflab.errors import (
    DimensionMismatchError,
    InsufficientExamplesError,
    NumericOverflowError,
    UndefinedCosineError,
)
from nrflab.features import FeatureMatrix

logger = logging.getLogger(__name__)


class OptSettings(BaseModel):
    """Quasi-Newton settings for probe training (L-BFGS with a strong-Wolfe line search)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    max_iterations: PositiveInt = DEFAULT_MAX_ITERATIONS
    gradient_tolerance: float = Field(default=DEFAULT_GRADIENT_TOLERANCE, gt=0)
    history_size: PositiveInt = DEFAULT_HISTORY_SIZE
    max_line_search_steps: PositiveInt = 20
    function_tolerance: float = Field(default=1e-12, ge=0)


@dataclass(frozen=True, slots=True)
class ProbeDiagnostics:
    final_loss: float
    gradient_norm: float
    iterations: int
    converged: bool
    message: str = ""


@dataclass(frozen=True, slots=True)
class ProbeModel:
    """``weights`` is k_classes x n, ``bias`` has k_classes entries.

    When trained with standardization, ``feature_mean``/``feature_scale`` are applied to inputs
    before the linear map.
    """

    weights: np.ndarray
    bias: np.ndarray
    l2: float
    diagnostics: ProbeDiagnostics | None = None
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def num_features(self) -> int:
        return self.weights.shape[1]


def _as_array(features: FeatureMatrix | np.ndarray) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.values
    arr = np.asarray(features)
    if arr.ndim != 2:
        arr = arr.reshape(arr.shape[0], -1)
    return arr


def regularized_loss_and_grad(
    params: np.ndarray,
    x: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    l2: float,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus ``l2/2 * ||W||_F^2`` and its gradient.

    ``params`` is ``W`` (row-major, k x n) followed by ``b``; the bias isn't regularized.
    """
    num_examples, num_features = x.shape
    w = params[: num_classes * num_features].reshape(num_classes, num_features)
    b = params[num_classes * num_features :]
    logits = x @ w.T + b
    log_p = log_softmax(logits, axis=1)
    rows = np.arange(num_examples)
    loss = -log_p[rows, labels].sum() / num_examples + 0.5 * l2 * float(np.sum(w * w))
    residual = np.exp(log_p)
    residual[rows, labels] -= 1.0
    residual /= num_examples
    grad_w = residual.T @ x + l2 * w
    grad_b = residual.sum(axis=0)
    return float(loss), np.concatenate([grad_w.ravel(), grad_b])


def train_probe(
    features: FeatureMatrix | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    l2: float,
    opt: OptSettings | None = None,
    *,
    num_classes: int | None = None,
    standardize: bool = False,
) -> ProbeModel:
    """Fit a multinomial logistic probe by full-batch L-BFGS from a zero start.

    With ``l2 > 0`` the objective is strictly convex, so the result depends only on the data and
    settings. Degenerate data (e.g. constant features with mixed labels) converges to a
    near-uniform predictor and is reported in the log, not raised.

    Raises:
        DimensionMismatchError: features and labels disagree in length.
        InsufficientExamplesError: fewer examples than classes, or a class with no examples.
        NumericOverflowError: the loss became non-finite.
    """
    opt = opt or OptSettings()
    if l2 < 0:
        raise ValueError(f"l2 must be nonnegative, got {l2}")
    x = _as_array(features).astype(np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatchError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
    k = int(num_classes if num_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    if y.shape[0] < k:
        raise InsufficientExamplesError(f"{y.shape[0]} examples cannot fit a {k}-class probe")
    if (missing := np.flatnonzero(np.bincount(y, minlength=k) == 0)).size:
        raise InsufficientExamplesError(f"no training examples for classes {missing.tolist()}")

    mean = scale = None
    if standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale < 1e-12] = 1.0
        x = (x - mean) / scale
    if np.all(np.ptp(x, axis=0) == 0) and np.unique(y).size > 1:
        logger.warning("probe features are identical across examples; expect a near-uniform predictor")

    num_features = x.shape[1]
    result = minimize(
        regularized_loss_and_grad,
        np.zeros(k * num_features + k),
        args=(x, y, k, l2),
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": opt.max_iterations,
            "maxcor": opt.history_size,
            "maxls": opt.max_line_search_steps,
            "gtol": opt.gradient_tolerance,
            "ftol": opt.function_tolerance,
        },
    )
    if not np.isfinite(result.fun):
        raise NumericOverflowError(f"probe loss became non-finite ({result.fun}) at l2={l2}")
    grad_norm = float(np.max(np.abs(result.jac))) if result.jac is not None else float("nan")
    diagnostics = ProbeDiagnostics(
        final_loss=float(result.fun),
        gradient_norm=grad_norm,
        iterations=int(result.nit),
        converged=bool(grad_norm <= opt.gradient_tolerance),
        message=str(result.message),
    )
    if not diagnostics.converged:
        logger.debug(f"probe at l2={l2:g} stopped after {result.nit} iterations: {result.message}")
    params = result.x
    return ProbeModel(
        weights=params[: k * num_features].reshape(k, num_features),
        bias=params[k * num_features :].copy(),
        l2=float(l2),
        diagnostics=diagnostics,
        feature_mean=mean,
        feature_scale=scale,
    )


def _logits(model: ProbeModel, features: FeatureMatrix | np.ndarray) -> np.ndarray:
    x = _as_array(features).astype(np.float64)
    if x.shape[1] != model.num_features:
        raise DimensionMismatchError(f"probe expects {model.num_features} features, got {x.shape[1]}")
    if model.feature_mean is not None:
        x = (x - model.feature_mean) / model.feature_scale
    return x @ model.weights.T + model.bias


def predict_proba(model: ProbeModel, features: FeatureMatrix | np.ndarray) -> np.ndarray:
    """Softmax class probabilities, one row per example."""
    return softmax(_logits(model, features), axis=1)


def accuracy(model: ProbeModel, features: FeatureMatrix | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Fraction of rows whose most probable class is the label; ties go to the lowest class."""
    y = np.asarray(labels, dtype=np.int64)
    predicted = np.argmax(predict_proba(model, features), axis=1)
    if predicted.shape[0] != y.shape[0]:
        raise DimensionMismatchError(f"{predicted.shape[0]} feature rows but {y.shape[0]} labels")
    if y.shape[0] == 0:
        return 0.0
    return float(np.mean(predicted == y))


def tune_l2(
    train_features: FeatureMatrix | np.ndarray,
    train_labels: np.ndarray,
    val_features: FeatureMatrix | np.ndarray,
    val_labels: np.ndarray,
    grid: Sequence[float],
    opt: OptSettings | None = None,
    *,
    num_classes: int | None = None,
    standardize: bool = False,
    workers: int = 1,
) -> tuple[float, ProbeModel]:
    """Pick the l2 with the best validation accuracy; ties go to the larger l2.

    Returns the chosen value and the probe trained with it.
    """
    if len(grid) == 0:
        raise ValueError("l2 grid is empty")
    if num_classes is None:
        num_classes = int(max(np.max(train_labels), np.max(val_labels)) + 1)

    def fit(l2: float) -> tuple[float, float, ProbeModel]:
        model = train_probe(
            train_features, train_labels, l2, opt, num_classes=num_classes, standardize=standardize
        )
        return l2, accuracy(model, val_features, val_labels), model

    if workers > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="l2") as pool:
            results = list(pool.map(fit, grid))
    else:
        results = [fit(l2) for l2 in grid]

    for l2, val_acc, _ in results:
        logger.debug(f"l2={l2:g}: validation accuracy {val_acc:.4f}")
    best_l2, best_acc, best_model = max(results, key=lambda r: (r[1], r[0]))
    logger.debug(f"selected l2={best_l2:g} (validation accuracy {best_acc:.4f})")
    return best_l2, best_model


def class_cosine(model: ProbeModel) -> np.ndarray:
    """Pairwise cosine similarity of the class weight rows; unit diagonal, symmetric."""
    w = model.weights.astype(np.float64)
    norms = np.linalg.norm(w, axis=1)
    if np.any(norms == 0):
        cls = int(np.flatnonzero(norms == 0)[0])
        raise UndefinedCosineError(f"class {cls} has an all-zero weight row", class_index=cls)
    unit = w / norms[:, np.newaxis]
    cos = unit @ unit.T
    cos = np.clip((cos + cos.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(cos, 1.0)
    return cos


def top_bottom_classes(cosine: np.ndarray, cls: int, count: int) -> tuple[list[int], list[int]]:
    """The ``count`` most and least similar classes to ``cls``, excluding itself.

    Ties are broken by class index in both lists.
    """
    num_classes = cosine.shape[0]
    if not 0 <= cls < num_classes:
        raise ValueError(f"class {cls} out of range for {num_classes} classes")
    if not 1 <= count < num_classes:
        raise ValueError(f"count must be in [1, {num_classes - 1}], got {count}")
    others = [j for j in range(num_classes) if j != cls]
    top = sorted(others, key=lambda j: (-cosine[cls, j], j))[:count]
    bottom = sorted(others, key=lambda j: (cosine[cls, j], j))[:count]
    return top, bottom


def probability_frame(
    model: ProbeModel,
    features: FeatureMatrix | np.ndarray,
    class_names: Sequence[str] | None = None,
) -> pd.DataFrame:
    """Predicted probabilities as a table with one column per class, for external plotting."""
    proba = predict_proba(model, features)
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(model.num_classes)]
    if len(names) != model.num_classes:
        raise DimensionMismatchError(f"{len(names)} class names for {model.num_classes} classes")
    return pd.DataFrame(proba, columns=names)
