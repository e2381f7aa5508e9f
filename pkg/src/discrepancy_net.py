"""
Model-discrepancy network: a 2-4-4-1 fully connected tanh network.

The network takes the offset (z_x - theta_x, z_y - theta_y) of a grid node from
the source location and returns a correction that is added to the Cauchy
source term. Parameters travel as one flat vector of length 37, laid out as
W1 (4x2, row-major), b1, W2 (4x4), b2, W3 (1x4), b3.

Training fits the parameters to every measurement gathered so far. The
measurements enter only through a Predictor, which maps a parameter vector to
predicted observations and their Jacobian; it hides the PDE solves so the same
training loop serves the scalar theta_s variant.
"""

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from src.eki.core import Ensemble, NoiseModel, run_eki
from src.errors import TrainingFailureError
from src.logs import get_logger

LAYER_SHAPES = (("W1", (4, 2)), ("b1", (4,)), ("W2", (4, 4)), ("b2", (4,)), ("W3", (1, 4)), ("b3", (1,)))
N_PARAMS = sum(int(np.prod(shape)) for _, shape in LAYER_SHAPES)


@dataclass(frozen=True)
class NetParams:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != N_PARAMS:
            raise ValueError(f"network needs {N_PARAMS} parameters, got {v.size}")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls) -> "NetParams":
        return cls(np.zeros(N_PARAMS))

    def layers(self) -> dict[str, np.ndarray]:
        out, start = {}, 0
        for name, shape in LAYER_SHAPES:
            size = int(np.prod(shape))
            out[name] = self.values[start:start + size].reshape(shape)
            start += size
        return out

    @staticmethod
    def header() -> list[str]:
        """Column names recording layer and shape, e.g. W1[4x2]_0."""
        cols = []
        for name, shape in LAYER_SHAPES:
            tag = "x".join(str(s) for s in shape)
            cols += [f"{name}[{tag}]_{i}" for i in range(int(np.prod(shape)))]
        return cols


def _as_params(p) -> NetParams:
    return p if isinstance(p, NetParams) else NetParams(p)


def _hidden(inputs: np.ndarray, layers: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    h1 = np.tanh(inputs @ layers["W1"].T + layers["b1"])
    h2 = np.tanh(h1 @ layers["W2"].T + layers["b2"])
    return h1, h2


def _stack_inputs(dx_rel, dy_rel) -> tuple[np.ndarray, tuple[int, ...]]:
    dx = np.asarray(dx_rel, dtype=float)
    dy = np.asarray(dy_rel, dtype=float)
    dx, dy = np.broadcast_arrays(dx, dy)
    return np.column_stack([dx.ravel(), dy.ravel()]), dx.shape


def nn_forward(dx_rel, dy_rel, p) -> np.ndarray:
    """Network output at each (dx_rel, dy_rel) pair; the result has the inputs' broadcast shape."""
    inputs, shape = _stack_inputs(dx_rel, dy_rel)
    layers = _as_params(p).layers()
    _, h2 = _hidden(inputs, layers)
    return (h2 @ layers["W3"].T + layers["b3"]).reshape(shape)


def nn_param_grad(inputs: np.ndarray, p) -> np.ndarray:
    """Per-input gradient of the output with respect to the flat parameters, shape (N, 37)."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    layers = _as_params(p).layers()
    h1, h2 = _hidden(x, layers)
    d2 = layers["W3"][0] * (1.0 - h2 ** 2)
    d1 = (d2 @ layers["W2"]) * (1.0 - h1 ** 2)
    n = x.shape[0]
    return np.hstack([
        (d1[:, :, None] * x[:, None, :]).reshape(n, -1),
        d1,
        (d2[:, :, None] * h1[:, None, :]).reshape(n, -1),
        d2,
        h2,
        np.ones((n, 1)),
    ])


def nn_param_vjp(inputs: np.ndarray, p, cotangents: np.ndarray) -> np.ndarray:
    """
    Sum over inputs of cotangent-weighted parameter gradients, shape (C, 37).

    Equivalent to cotangents @ nn_param_grad(inputs, p) without forming the
    (N, 37) matrix.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    c = np.atleast_2d(np.asarray(cotangents, dtype=float))
    layers = _as_params(p).layers()
    h1, h2 = _hidden(x, layers)
    d2 = c[:, :, None] * (layers["W3"][0] * (1.0 - h2 ** 2))[None]
    d1 = (d2 @ layers["W2"]) * (1.0 - h1 ** 2)[None]
    n_c = c.shape[0]
    return np.hstack([
        np.einsum("cnk,nl->ckl", d1, x).reshape(n_c, -1),
        d1.sum(axis=1),
        np.einsum("cnk,nl->ckl", d2, h1).reshape(n_c, -1),
        d2.sum(axis=1),
        c @ h2,
        c.sum(axis=1, keepdims=True),
    ])


def nn_input_grad(inputs: np.ndarray, p) -> np.ndarray:
    """d output / d (dx_rel, dy_rel) per input, shape (N, 2)."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    layers = _as_params(p).layers()
    h1, h2 = _hidden(x, layers)
    d2 = layers["W3"][0] * (1.0 - h2 ** 2)
    d1 = (d2 @ layers["W2"]) * (1.0 - h1 ** 2)
    return d1 @ layers["W1"]


def input_gradient_bound(p) -> float:
    """Product of layer spectral norms; bounds |d output / d input| since |tanh'| <= 1."""
    layers = _as_params(p).layers()
    return float(np.prod([np.linalg.norm(layers[name], 2) for name in ("W1", "W2", "W3")]))


# =============================================================================
# Training data and training
# =============================================================================

@dataclass(frozen=True)
class TrainingRecord:
    x: float
    y: float
    stage_time: float
    value: float
    stage: int


@dataclass(frozen=True)
class TrainingSet:
    """Accumulated network-design measurements; appending returns a new set."""

    records: tuple[TrainingRecord, ...] = field(default_factory=tuple)

    def append(self, record: TrainingRecord) -> "TrainingSet":
        return TrainingSet(self.records + (record,))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.records])


class Predictor(Protocol):
    """Predicted observations for every training record at a parameter vector."""

    def predict(self, params: np.ndarray) -> np.ndarray:
        """params (B, P) -> predictions (B, R)."""

    def value_and_jacobian(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """params (P,) -> predictions (R,), Jacobian (R, P)."""


@dataclass(frozen=True)
class TrainingSettings:
    update_rule: str = "gradient"
    learning_rate: float = 1.0
    max_epochs: int = 200
    plateau_tol: float = 1e-8
    max_halvings: int = 40
    eki_ensemble_size: int = 40
    eki_iterations: int = 5
    eki_prior_var: float = 0.09
    # Gaussian anchor N(p0, prior_var I) against noise_var per record; None trains on the misfit alone.
    prior_var: float | None = None
    noise_var: float | None = None

    @property
    def anchor_weight(self) -> float:
        if self.prior_var is None:
            return 0.0
        if self.noise_var is None:
            raise ValueError("an anchored fit needs noise_var as well as prior_var")
        return self.noise_var / self.prior_var


@dataclass(frozen=True)
class TrainingResult:
    params: np.ndarray
    loss_initial: float
    loss_final: float
    epochs: int
    loss_trace: tuple[float, ...]


def _loss_and_grad(
    predictor: Predictor, params: np.ndarray, targets: np.ndarray, anchor: np.ndarray, weight: float,
) -> tuple[float, np.ndarray]:
    """
    Mean squared misfit plus weight / N * |params - anchor|^2.

    With weight = noise_var / prior_var this is the negative log posterior under
    the Gaussian prior centred at `anchor`, scaled by 2 noise_var / N.
    """
    pred, jac = predictor.value_and_jacobian(params)
    resid = targets - pred
    shift = params - anchor
    loss = float(np.mean(resid ** 2) + weight / resid.size * (shift @ shift))
    if not np.isfinite(loss):
        raise TrainingFailureError(f"non-finite training loss at parameters with norm {np.linalg.norm(params):.3e}")
    grad = -2.0 / resid.size * (resid @ jac) + 2.0 * weight / resid.size * shift
    return loss, grad


def train(p0: np.ndarray, data: TrainingSet, predictor: Predictor, settings: TrainingSettings = TrainingSettings()) -> TrainingResult:
    """
    Minimize the mean squared misfit over the accumulated data, optionally
    anchored to p0 by the Gaussian prior in `settings`.

    Gradient descent with backtracking: a step that lowers the loss is accepted
    and the learning rate doubles; otherwise the rate halves and the step is
    retried. Stops on max_epochs, on a loss decrease below plateau_tol, or when
    no step length lowers the loss. Returns the best parameters seen.

    Args:
        p0: Starting parameter vector (warm start from the previous stage)
        data: Accumulated training records
        predictor: Maps parameters to predictions for data's records

    Returns:
        TrainingResult with the best parameters and the loss trace
    """
    if len(data) == 0:
        raise ValueError("train() needs at least one training record")
    logger = get_logger()
    targets = data.values
    anchor = np.asarray(p0, dtype=float)
    weight = settings.anchor_weight
    params = anchor.copy()
    loss, grad = _loss_and_grad(predictor, params, targets, anchor, weight)
    loss_initial = loss
    trace = [loss]
    rate = settings.learning_rate
    epochs = 0

    for epoch in range(settings.max_epochs):
        epochs = epoch + 1
        accepted = False
        for _ in range(settings.max_halvings):
            candidate = params - rate * grad
            cand_loss, cand_grad = _loss_and_grad(predictor, candidate, targets, anchor, weight)
            if cand_loss < loss:
                accepted = True
                break
            rate *= 0.5
        if not accepted:
            logger.debug(f"train: no descent step found at epoch {epochs}, loss={loss:.6e}")
            break
        improvement = loss - cand_loss
        params, loss, grad = candidate, cand_loss, cand_grad
        trace.append(loss)
        rate *= 2.0
        logger.debug(f"train: epoch {epochs} loss={loss:.6e} rate={rate:.3e}")
        if improvement < settings.plateau_tol:
            break

    logger.info(f"train: {len(data)} records, loss {loss_initial:.4e} -> {loss:.4e} in {epochs} epochs")
    return TrainingResult(params=params, loss_initial=loss_initial, loss_final=loss, epochs=epochs, loss_trace=tuple(trace))


def eki_mean_update(
    p0: np.ndarray,
    data: TrainingSet,
    predictor: Predictor,
    noise_var: float,
    seed: np.random.SeedSequence,
    settings: TrainingSettings = TrainingSettings(),
) -> TrainingResult:
    """Alternative update: EKI over the accumulated data, committing the final ensemble mean."""
    if len(data) == 0:
        raise ValueError("eki_mean_update() needs at least one training record")
    targets = data.values
    p0 = np.asarray(p0, dtype=float)
    draw_seed, eki_seed = seed.spawn(2)
    rng = np.random.default_rng(draw_seed)
    members = p0 + np.sqrt(settings.eki_prior_var) * rng.standard_normal((settings.eki_ensemble_size, p0.size))
    noise = NoiseModel(noise_var * np.eye(targets.size))
    run = run_eki(Ensemble(members), targets, noise, settings.eki_iterations, predictor.predict, eki_seed)
    params = run.trajectory[-1].mean
    loss_initial = float(np.mean((targets - predictor.predict(p0[None])[0]) ** 2))
    loss = float(np.mean((targets - predictor.predict(params[None])[0]) ** 2))
    if not np.isfinite(loss):
        raise TrainingFailureError("non-finite loss after EKI-mean update")
    get_logger().info(f"eki_mean_update: {len(data)} records, loss {loss_initial:.4e} -> {loss:.4e}")
    return TrainingResult(params=params, loss_initial=loss_initial, loss_final=loss, epochs=settings.eki_iterations, loss_trace=(loss_initial, loss))
