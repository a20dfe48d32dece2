"""Dense autoencoder engine: flat-parameter models, Adam training, FedAvg.

A model is an encoder stack mirrored into a decoder (e.g. encoder widths
784-100-64-32 give full widths 784-100-64-32-64-100-784), ReLU on hidden
layers and a sigmoid output for inputs scaled to [0, 1]. Parameters live in
a single float64 vector laid out per layer as row-major weights then bias,
which keeps averaging, Adam and finite-difference checks trivial. All
operations are pure: models are treated as immutable values and every
function returns fresh arrays.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import backend

CHECKPOINT_MAGIC = b"FCRF"
CHECKPOINT_VERSION = 1


class InvalidArchitectureError(ValueError):
    """Layer width list is empty, too short, or has non-positive widths."""


class ShapeError(ValueError):
    """Batch or parameter shapes do not match the model architecture."""


class EmptyInputError(ValueError):
    """An operation that needs at least one sample received none."""


class TrainingDivergedError(RuntimeError):
    """A non-finite loss appeared during training."""


class AggregationError(ValueError):
    """FedAvg inputs are inconsistent (shapes or weights)."""


class CheckpointError(ValueError):
    """A model checkpoint file is malformed."""


def mirrored_sizes(encoder_sizes) -> tuple[int, ...]:
    """Full layer widths: encoder followed by its mirror image."""
    enc = tuple(int(w) for w in encoder_sizes)
    if len(enc) < 2:
        raise InvalidArchitectureError(
            f"need at least input and one latent width, got {list(enc)}")
    for w in enc:
        if w <= 0:
            raise InvalidArchitectureError(f"layer width {w} must be positive")
    return enc + enc[-2::-1]


@dataclass(frozen=True)
class Model:
    """Flat-parameter autoencoder: full mirrored widths plus one f64 vector."""

    layer_sizes: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self):
        sizes = self.layer_sizes
        if len(sizes) < 2 or any(w <= 0 for w in sizes):
            raise InvalidArchitectureError(f"bad layer widths {list(sizes)}")
        if tuple(reversed(sizes)) != tuple(sizes):
            raise InvalidArchitectureError(
                f"decoder widths must mirror the encoder, got {list(sizes)}")
        expected = _param_count(sizes)
        if self.params.ndim != 1 or self.params.shape[0] != expected:
            raise ShapeError(
                f"params length {self.params.shape} does not match "
                f"architecture {sizes} (expected {expected})")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def weights(self) -> list[np.ndarray]:
        """Per-layer weight matrices as views into the flat vector."""
        return [w for w, _ in _layer_views(self.params, self.layer_sizes)]

    def biases(self) -> list[np.ndarray]:
        """Per-layer bias vectors as views into the flat vector."""
        return [b for _, b in _layer_views(self.params, self.layer_sizes)]


@dataclass
class OptimizerState:
    """Adam configuration plus moment accumulators congruent to the params."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    @classmethod
    def fresh(cls, model: Model, **hyperparams) -> "OptimizerState":
        state = cls(**hyperparams)
        state.m = np.zeros(model.n_params)
        state.v = np.zeros(model.n_params)
        return state


def _param_count(sizes) -> int:
    return sum(sizes[l] * sizes[l + 1] + sizes[l + 1]
               for l in range(len(sizes) - 1))


def _layer_views(params, sizes):
    off = 0
    for l in range(len(sizes) - 1):
        nin, nout = sizes[l], sizes[l + 1]
        w = params[off:off + nin * nout].reshape(nin, nout)
        off += nin * nout
        b = params[off:off + nout]
        off += nout
        yield w, b


def _sizes_array(model: Model) -> np.ndarray:
    return np.asarray(model.layer_sizes, dtype=np.int64)


def _as_batch(model: Model, batch, allow_empty=False) -> np.ndarray:
    x = np.ascontiguousarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"batch shape {x.shape} incompatible with input dim "
            f"{model.input_dim}")
    if x.shape[0] == 0 and not allow_empty:
        raise EmptyInputError("need at least one sample")
    return x


def init_model(layer_sizes, seed: int) -> Model:
    """Glorot-uniform model from encoder widths, deterministic in the seed.

    ``layer_sizes`` gives the encoder half only; the decoder mirrors it.
    Biases start at zero.
    """
    full = mirrored_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    params = np.zeros(_param_count(full))
    for w, _ in _layer_views(params, full):
        nin, nout = w.shape
        limit = np.sqrt(6.0 / (nin + nout))
        w[:] = rng.uniform(-limit, limit, size=(nin, nout))
    return Model(layer_sizes=full, params=params)


def forward(model: Model, batch) -> np.ndarray:
    """Reconstructions for a (n, d) batch; output entries lie in [0, 1]."""
    x = _as_batch(model, batch, allow_empty=True)
    return backend.forward(model.params, _sizes_array(model), x)


def reconstruction_errors(model: Model, samples) -> np.ndarray:
    """Per-sample mean squared reconstruction error over features."""
    x = _as_batch(model, samples)
    return backend.reconstruction_errors(model.params, _sizes_array(model), x)


def mean_loss(model: Model, samples) -> float:
    """Mean of the per-sample reconstruction errors."""
    return float(np.mean(reconstruction_errors(model, samples)))


def backward(model: Model, batch) -> np.ndarray:
    """Gradient of the mean batch loss w.r.t. every parameter (flat)."""
    x = _as_batch(model, batch)
    _, grad = backend.loss_and_grad(model.params, _sizes_array(model), x)
    return grad


def train_local(model: Model, samples, epochs: int, batch_size: int = 64,
                opt: OptimizerState | None = None, rng_seed: int = 0) -> Model:
    """Train with mini-batch Adam; pure in (model, samples, opt, rng_seed).

    Shuffle orders come from ``rng_seed`` alone, so identical calls return
    bit-identical models. Raises TrainingDivergedError on a non-finite loss.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    x = _as_batch(model, samples)
    if opt is None:
        opt = OptimizerState.fresh(model)
    m0 = np.zeros(model.n_params) if opt.m is None else np.asarray(opt.m, float)
    v0 = np.zeros(model.n_params) if opt.v is None else np.asarray(opt.v, float)
    if m0.shape != model.params.shape or v0.shape != model.params.shape:
        raise ShapeError("optimizer accumulators do not match model parameters")

    rng = np.random.default_rng(rng_seed)
    n = x.shape[0]
    order = np.empty((epochs, n), dtype=np.int64)
    for e in range(epochs):
        order[e] = rng.permutation(n)

    params, _, _, _, ok = backend.train_epochs(
        model.params, _sizes_array(model), x, order, batch_size,
        opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon,
        m0, v0, opt.step)
    if not ok:
        raise TrainingDivergedError("non-finite loss during training")
    return replace(model, params=params)


def fedavg(models: list[Model], weights) -> Model:
    """Weighted parameter mean, accumulated in input order."""
    if not models:
        raise AggregationError("need at least one model")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(models),):
        raise AggregationError(
            f"{len(models)} models but weight shape {w.shape}")
    if np.any(w < 0):
        raise AggregationError("weights must be non-negative")
    total = float(np.sum(w))
    if total <= 0.0:
        raise AggregationError("weight sum must be positive")
    sizes = models[0].layer_sizes
    acc = np.zeros_like(models[0].params)
    for model, wi in zip(models, w):
        if model.layer_sizes != sizes:
            raise AggregationError(
                f"architecture mismatch: {model.layer_sizes} vs {sizes}")
        acc += wi * model.params
    return Model(layer_sizes=sizes, params=acc / total)


def save_model(model: Model, path) -> None:
    """Write the checkpoint layout: 'FCRF', version u32, layer count u32,
    widths u32 each (all little-endian), then the flat f64 payload (row-major
    weights then bias per layer)."""
    header = [CHECKPOINT_MAGIC,
              np.uint32(CHECKPOINT_VERSION).tobytes(),
              np.uint32(len(model.layer_sizes)).tobytes(),
              np.asarray(model.layer_sizes, dtype="<u4").tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(model.params.astype("<f8").tobytes())


def load_model(path) -> Model:
    """Read a checkpoint written by :func:`save_model`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n_widths = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    head_end = 12 + 4 * n_widths
    if len(blob) < head_end or n_widths < 2:
        raise CheckpointError("truncated or degenerate width list")
    sizes = tuple(int(w) for w in np.frombuffer(blob[12:head_end], dtype="<u4"))
    if any(w <= 0 for w in sizes):
        raise CheckpointError(f"non-positive width in {sizes}")
    expected = _param_count(sizes)
    payload = np.frombuffer(blob[head_end:], dtype="<f8")
    if payload.shape[0] != expected:
        raise CheckpointError(
            f"payload holds {payload.shape[0]} values, expected {expected}")
    return Model(layer_sizes=sizes, params=payload.astype(np.float64))
