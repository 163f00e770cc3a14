"""Mini-batch AdamW training on normalized labels, and inference back to meters."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..array_model import SourcePosition
from ..errors import TrainingDivergence
from ..music import LocationEstimate
from ..subspace import SubspaceSplit, cnn_input_tensor
from .layers import mse_loss, mse_loss_grad
from .model import Architecture, ModelParams, init_model, model_backward, model_forward
from .optim import AdamWState, adamw_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 1200
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epoch count must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")


FULL_SCALE_TRAINING = TrainingConfig()
FULL_SCALE_TRAINING_SIZE = 20000


@dataclass
class TrainResult:
    model: ModelParams
    loss_history: list[float]
    log_lines: list[str] = field(default_factory=list)


def normalize_labels(labels: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    return 2.0 * (labels - low) / (high - low) - 1.0


def denormalize_labels(values: np.ndarray, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    return low + (np.asarray(values, dtype=float) + 1.0) * 0.5 * (high - low)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    # batch norm needs >= 2 samples: a lone sample is paired with itself and
    # a trailing singleton batch joins the previous one
    if n == 1:
        return [np.zeros(2, dtype=int)]
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    if batches[0].size == 1:
        batches[0] = np.concatenate([batches[0], batches[0]])
    return batches


def train(inputs: np.ndarray, labels: np.ndarray, label_bounds: tuple[np.ndarray, np.ndarray],
          arch: Architecture, config: TrainingConfig, rng: np.random.Generator | None = None,
          model: ModelParams | None = None, log_path=None) -> TrainResult:
    """Fit the CNN with MSE on labels mapped to [-1, 1] by ``label_bounds``.

    Args:
        inputs: (count, 2, N, N) eigenvector tensors.
        labels: (count, 3K) source coordinates in meters.
        label_bounds: per-output (low, high) used for normalization; stored on the model.
        rng: drives initialization, shuffling and dropout; defaults to ``config.seed``.
        model: optional starting parameters (copied, not modified).
        log_path: optional file receiving the run log.

    Raises:
        TrainingDivergence: when a mini-batch loss is not finite.
    """
    if len(inputs) == 0 or len(inputs) != len(labels):
        raise ValueError("training needs a non-empty dataset with one label row per input")
    dtype = np.dtype(config.dtype)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    init_rng, shuffle_rng, drop_rng = rng.spawn(3)
    low, high = (np.asarray(b, dtype=float) for b in label_bounds)
    if model is None:
        model = init_model(arch, init_rng, dtype)
    else:
        model = model.astype(dtype)
    x_all = np.asarray(inputs, dtype=dtype)
    y_all = normalize_labels(np.asarray(labels, dtype=float), low, high).astype(dtype)

    lines = [
        "config " + " ".join(f"{k}={v}" for k, v in asdict(config).items()),
        "optimizer=AdamW beta1=0.9 beta2=0.999 eps=1e-08 loss=MSE",
        f"architecture {arch.to_dict()}",
        f"init=he_uniform(fan_in) bn_gamma=1 bn_beta=0 parameters={model.num_parameters()}",
        f"training_size={len(x_all)}",
    ]
    for line in lines:
        log.info(line)
    params = model.named_parameters()
    state = AdamWState()
    history = []
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        total, seen = 0.0, 0
        for batch in _minibatches(len(x_all), config.batch_size, shuffle_rng):
            pred, tape = model_forward(model, x_all[batch], "train", drop_rng)
            target = y_all[batch]
            loss = mse_loss(pred, target)
            if not math.isfinite(loss):
                raise TrainingDivergence(f"loss became {loss} at epoch {epoch}")
            grads = model_backward(model, tape, mse_loss_grad(pred, target).astype(dtype))
            adamw_step(params, grads, state, config.learning_rate, config.weight_decay)
            total += loss * len(batch)
            seen += len(batch)
        epoch_loss = total / seen
        history.append(epoch_loss)
        line = f"epoch={epoch} loss={epoch_loss:.9g} wall={time.perf_counter() - start:.3f}"
        lines.append(line)
        log.info(line)
    model = model.astype(np.float64)
    model.label_low, model.label_high = low, high
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    return TrainResult(model, history, lines)


def predict_batch(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Inference-mode outputs denormalized to meters, shape (batch, 3K)."""
    if model.label_low is None:
        raise ValueError("model carries no label bounds; was it trained?")
    out, _ = model_forward(model, np.asarray(inputs, dtype=np.float64), "infer")
    return denormalize_labels(out, model.label_low, model.label_high)


def predict(model: ModelParams, split: SubspaceSplit) -> LocationEstimate:
    """Localize the sources of one covariance eigendecomposition.

    Sources come back in the canonical (azimuth, elevation, range) order
    used for the training labels.
    """
    t0 = time.perf_counter()
    if split.num_elements != model.arch.input_size:
        raise ValueError(f"model expects N={model.arch.input_size}, got N={split.num_elements}")
    x = cnn_input_tensor(split, model.arch.input_columns)
    coords = predict_batch(model, x[None])[0].reshape(-1, 3)
    positions = [SourcePosition.from_cartesian(*(float(v) for v in c)) for c in coords]
    return LocationEstimate(positions, "cnn", time.perf_counter() - t0)

