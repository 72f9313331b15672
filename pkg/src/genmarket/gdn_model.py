"""Gaussian-valued feedforward network and its training loop.

The network maps (x, t) through affine layers with a componentwise smooth
activation; the final affine output is read as chart coordinates (mean
plus packed log-covariance) and decoded into a Gaussian measure, so every
parameter setting produces a valid nonsingular Gaussian.

Training minimizes mean squared error in chart coordinates (a smooth
surrogate; differentiating the Bures trace term through matrix square
roots is numerically fragile) with minibatch gradient descent plus
momentum, and tracks the true objective, the worst-case 2-Wasserstein
distance to the exact marginal law on a held-out grid.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import __version__
from .bw_geometry import (
    ChartCoords,
    GaussianMeasure,
    chart_decode,
    chart_encode,
    w2_distance,
)
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    NumericError,
    TrainingDivergedError,
)
from .market_map import ClipConfig, empirical_w2, pushforward_sample
from .ou_dynamics import exact_marginal_batch

if TYPE_CHECKING:  # pragma: no cover
    from .scenario import Scenario

__all__ = [
    "GDNParams",
    "TrainConfig",
    "TrainReport",
    "EvalGrid",
    "EvalReport",
    "gdn_forward",
    "gdn_gradient",
    "chart_mse",
    "train",
    "evaluate_rcd",
    "init_gdn_params",
    "fixed_t_width",
    "fixed_t_params",
    "gdn_from_measure",
    "save_checkpoint",
    "load_checkpoint",
]


def _d_tanh(z: np.ndarray) -> np.ndarray:
    return 1.0 - np.tanh(z) ** 2


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


ACTIVATIONS = {
    "tanh": (np.tanh, _d_tanh),
    "sigmoid": (_sigmoid, lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))),
    "softplus": (lambda z: np.logaddexp(0.0, z), _sigmoid),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(float)),
}


def _state_dim_from_output(out_dim: int) -> int:
    """Invert out = D + D(D+1)/2."""
    d = int((-3.0 + np.sqrt(9.0 + 8.0 * out_dim)) / 2.0 + 0.5)
    if d + d * (d + 1) // 2 != out_dim:
        raise DimensionError(f"output dimension {out_dim} is not D + D(D+1)/2 for any D")
    return d


@dataclass(frozen=True)
class GDNParams:
    """Layer shapes and parameters of the Gaussian-valued network.

    ``layer_dims`` runs [1 + D, hidden..., D + D(D+1)/2]; weights[k] has
    shape (layer_dims[k+1], layer_dims[k]). The activation is applied
    after every affine map except the last.
    """

    layer_dims: tuple
    weights: tuple
    biases: tuple
    activation: str = "tanh"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise ConfigError("network needs at least one affine layer")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"unknown activation '{self.activation}', expected one of {sorted(ACTIVATIONS)}"
            )
        d = _state_dim_from_output(dims[-1])
        if dims[0] != 1 + d:
            raise DimensionError(
                f"input dimension {dims[0]} does not match 1 + D = {1 + d} "
                f"implied by output dimension {dims[-1]}"
            )
        ws = tuple(np.asarray(w, dtype=float) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=float) for b in self.biases)
        if len(ws) != len(dims) - 1 or len(bs) != len(dims) - 1:
            raise DimensionError(
                f"expected {len(dims) - 1} weight/bias pairs, got {len(ws)}/{len(bs)}"
            )
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (dims[k + 1], dims[k]) or b.shape != (dims[k + 1],):
                raise DimensionError(
                    f"layer {k}: weight {w.shape} / bias {b.shape}, "
                    f"expected ({dims[k + 1]}, {dims[k]}) / ({dims[k + 1]},)"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise DomainError(f"layer {k} has non-finite parameters")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def state_dim(self) -> int:
        return _state_dim_from_output(self.layer_dims[-1])

    @property
    def depth(self) -> int:
        """Number of affine layers."""
        return len(self.weights)

    @property
    def width(self) -> int:
        """Largest hidden dimension (0 for a single affine layer)."""
        hidden = self.layer_dims[1:-1]
        return max(hidden) if hidden else 0


def fixed_t_width(d: int) -> int:
    """Hidden width D(6 + 2D + D^2)/2 used by the fixed-time constructor."""
    return d * (6 + 2 * d + d * d) // 2


def init_gdn_params(
    d: int,
    depth: int,
    width: int,
    activation: str = "tanh",
    seed: int = 0,
) -> GDNParams:
    """Fan-in scaled uniform initialization, deterministic in the seed."""
    if depth < 1:
        raise ConfigError(f"depth must be at least 1, got {depth}")
    if depth > 1 and width < 1:
        raise ConfigError(f"width must be positive for depth > 1, got {width}")
    out_dim = d + d * (d + 1) // 2
    dims = [1 + d] + [width] * (depth - 1) + [out_dim]
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
    weights, biases = [], []
    for k in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[k])
        weights.append(rng.uniform(-bound, bound, size=(dims[k + 1], dims[k])))
        biases.append(np.zeros(dims[k + 1]))
    return GDNParams(tuple(dims), tuple(weights), tuple(biases), activation)


def fixed_t_params(d: int, depth: int, activation: str = "tanh", seed: int = 0) -> GDNParams:
    """Network whose hidden layers all use the fixed-time width formula."""
    return init_gdn_params(d, depth, fixed_t_width(d), activation, seed)


def gdn_from_measure(g: GaussianMeasure) -> GDNParams:
    """Single affine layer with zero weights whose constant output decodes
    to the given Gaussian, for any (x, t). Useful as an exact stand-in."""
    coords = chart_encode(g).as_vector()
    d = g.dim
    return GDNParams(
        (1 + d, len(coords)),
        (np.zeros((len(coords), 1 + d)),),
        (coords,),
        "tanh",
    )


def _forward(params: GDNParams, inputs: np.ndarray, keep_cache: bool = False):
    """Batch forward pass; inputs shape (n, 1 + D). Returns raw chart
    coordinate rows and, if requested, the per-layer caches for backprop."""
    act, _ = ACTIVATIONS[params.activation]
    a = inputs
    pre, post = [], [inputs]
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        if k < n_layers - 1:
            a = act(z)
        else:
            a = z
        if keep_cache:
            pre.append(z)
            post.append(a)
    if keep_cache:
        return a, (pre, post)
    return a


def _stack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    """((x, t), target) pairs -> input matrix (n, 1+D), target matrix."""
    if len(batch) == 0:
        raise DomainError("batch must be nonempty")
    inputs, targets = [], []
    for (x, t), target in batch:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        inputs.append(np.concatenate([x, [float(t)]]))
        vec = target.as_vector() if isinstance(target, ChartCoords) else np.asarray(target, float)
        targets.append(vec)
    return np.asarray(inputs), np.asarray(targets)


def gdn_forward(params: GDNParams, x, t: float) -> GaussianMeasure:
    """Evaluate the network at one (x, t) and decode through the chart."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (params.state_dim,):
        raise DimensionError(f"x has shape {x.shape}, expected ({params.state_dim},)")
    coords = _forward(params, np.concatenate([x, [float(t)]])[None, :])[0]
    d = params.state_dim
    return chart_decode(ChartCoords(coords[:d], coords[d:]))


def chart_mse(params: GDNParams, batch) -> float:
    """Mean over the batch of the squared chart-coordinate residual norm."""
    inputs, targets = _stack_batch(batch)
    out = _forward(params, inputs)
    return float(np.mean(((out - targets) ** 2).sum(axis=1)))


def gdn_gradient(params: GDNParams, batch):
    """Gradient of :func:`chart_mse` by reverse accumulation.

    Returns (weight gradients, bias gradients) shaped like the parameters.
    """
    inputs, targets = _stack_batch(batch)
    out, (pre, post) = _forward(params, inputs, keep_cache=True)
    n = inputs.shape[0]
    _, dact = ACTIVATIONS[params.activation]

    delta = (2.0 / n) * (out - targets)
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    for k in range(len(params.weights) - 1, -1, -1):
        grads_w[k] = delta.T @ post[k]
        grads_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k]) * dact(pre[k - 1])
    return grads_w, grads_b


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the minibatch gradient-descent-with-momentum fit."""

    epochs: int = 3000
    batch_size: int = 32
    learning_rate: float = 0.02
    lr_decay: float = 0.9995       # multiplicative, applied per epoch
    warmup_epochs: int = 40        # linear ramp from learning_rate/10
    momentum: float = 0.95
    seed: int = 0
    depth: int = 4
    width: int = 64
    activation: str = "tanh"
    patience: int = 20             # early stop after this many epochs without
    min_rel_improve: float = 0.0   # a relative held-out W2 improvement
    heldout_nx: int = 5            # held-out lattice: points per state axis
    heldout_nt: int = 5
    quad_steps: int = 1024

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning rate must be positive")


@dataclass
class TrainReport:
    """Per-epoch surrogate loss and held-out worst-case W2."""

    records: list = field(default_factory=list)  # (epoch, loss, heldout_max_w2)
    best_epoch: int = 0
    epochs_run: int = 0
    final_loss: float = np.inf
    final_heldout_max_w2: float = np.inf


def _heldout_grid(scenario: "Scenario", nx: int, nt: int) -> tuple[np.ndarray, np.ndarray]:
    """Regular lattice over the scenario box crossed with a uniform t-grid."""
    axes = [np.linspace(lo, hi, nx) for lo, hi in scenario.domain]
    mesh = np.meshgrid(*axes, indexing="ij")
    xs = np.stack([m.ravel() for m in mesh], axis=1)
    ts = np.linspace(scenario.delta, scenario.horizon, nt)
    x_all = np.repeat(xs, nt, axis=0)
    t_all = np.tile(ts, len(xs))
    return x_all, t_all


def _max_w2(params: GDNParams, inputs: np.ndarray, laws: list) -> float:
    """Worst-case W2 over the grid; +inf when a transient parameter state
    produces coordinates whose exponential exceeds float64 range."""
    coords = _forward(params, inputs)
    d = params.state_dim
    worst = 0.0
    for row, law in zip(coords, laws):
        try:
            g = chart_decode(ChartCoords(row[:d], row[d:]))
        except (DomainError, NumericError):
            return np.inf
        worst = max(worst, w2_distance(g, law))
    return worst


def train(scenario: "Scenario", train_set, cfg: TrainConfig) -> tuple[GDNParams, TrainReport]:
    """Fit the network to chart targets; deterministic given cfg.seed.

    Optimization runs on per-coordinate standardized targets (a fixed
    diagonal preconditioner; mean and covariance coordinates live on very
    different scales) and the standardization is folded back into the
    final affine layer, so returned parameters and reported losses are in
    raw chart scale. Keeps the parameters with the best held-out
    worst-case W2 seen so far and stops early once that metric has not
    improved for ``cfg.patience`` epochs. Raises
    :class:`TrainingDivergedError` if the surrogate loss exceeds 1e6.
    """
    if len(train_set) == 0:
        raise DomainError("training set must be nonempty")
    d = scenario.dimension
    params = init_gdn_params(d, cfg.depth, cfg.width, cfg.activation, cfg.seed)
    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]

    inputs, raw_targets = _stack_batch(train_set)
    y_shift = raw_targets.mean(axis=0)
    y_scale = np.maximum(raw_targets.std(axis=0), 1e-8)
    targets = (raw_targets - y_shift) / y_scale

    def denormalized(ws, bs):
        """Fold the target standardization into the last affine layer."""
        out_w = [w.copy() for w in ws]
        out_b = [b.copy() for b in bs]
        out_w[-1] = y_scale[:, None] * out_w[-1]
        out_b[-1] = y_scale * out_b[-1] + y_shift
        return GDNParams(params.layer_dims, tuple(out_w), tuple(out_b), cfg.activation)

    hx, ht = _heldout_grid(scenario, cfg.heldout_nx, cfg.heldout_nt)
    heldout_inputs = np.concatenate([hx, ht[:, None]], axis=1)
    heldout_laws = [
        m.law for m in exact_marginal_batch(scenario.coefficients, hx, ht, cfg.quad_steps)
    ]

    rng = np.random.Generator(
        np.random.Philox(key=np.array([cfg.seed & 0xFFFFFFFFFFFFFFFF, 1], dtype=np.uint64))
    )
    n = inputs.shape[0]
    act, dact = ACTIVATIONS[params.activation]
    n_layers = len(weights)

    report = TrainReport()
    best_w2 = np.inf
    best_state = None
    stale = 0

    for epoch in range(cfg.epochs):
        if epoch < cfg.warmup_epochs:
            ramp = (epoch + 1) / cfg.warmup_epochs
            lr = cfg.learning_rate * (0.1 + 0.9 * ramp)
        else:
            lr = cfg.learning_rate * cfg.lr_decay ** (epoch - cfg.warmup_epochs)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = inputs[idx], targets[idx]
            # forward with caches
            a = xb
            pre, post = [], [xb]
            for k in range(n_layers):
                z = a @ weights[k].T + biases[k]
                a = act(z) if k < n_layers - 1 else z
                pre.append(z)
                post.append(a)
            delta = (2.0 / len(idx)) * (a - yb)
            for k in range(n_layers - 1, -1, -1):
                gw = delta.T @ post[k]
                gb = delta.sum(axis=0)
                if k > 0:
                    delta = (delta @ weights[k]) * dact(pre[k - 1])
                vel_w[k] = cfg.momentum * vel_w[k] - lr * gw
                vel_b[k] = cfg.momentum * vel_b[k] - lr * gb
                weights[k] = weights[k] + vel_w[k]
                biases[k] = biases[k] + vel_b[k]

        snapshot = denormalized(weights, biases)
        loss = chart_mse(snapshot, train_set)
        if not np.isfinite(loss) or loss > 1e6:
            raise TrainingDivergedError(
                f"surrogate loss {loss:.3e} exceeded 1e6 at epoch {epoch}", epoch=epoch
            )
        heldout = _max_w2(snapshot, heldout_inputs, heldout_laws)
        report.records.append((epoch, loss, heldout))

        if heldout < best_w2 * (1.0 - cfg.min_rel_improve):
            best_w2 = heldout
            best_state = (copy.deepcopy(weights), copy.deepcopy(biases))
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    if best_state is not None:
        weights, biases = best_state
    final = denormalized(weights, biases)
    report.epochs_run = len(report.records)
    report.final_loss = chart_mse(final, train_set)
    report.final_heldout_max_w2 = _max_w2(final, heldout_inputs, heldout_laws)
    return final, report


@dataclass(frozen=True)
class EvalGrid:
    """Evaluation lattice: points per state axis and time-grid size."""

    nx: int = 5
    nt: int = 5

    def __post_init__(self):
        if self.nx < 1 or self.nt < 1:
            raise ConfigError("grid sizes must be positive")


@dataclass
class EvalReport:
    """Worst-case and mean W2 on the grid plus the certified price-law bound.

    ``eps_max`` is the maximum 2-Wasserstein error of the network against
    the exact marginal over the grid; the price-law column multiplies W2
    by the clipped-exponential Lipschitz constant sqrt(D) e^M, which
    certifies the distance between the push-forward laws rather than
    estimating it.
    """

    rows: list                       # (x tuple, t, w2, s_law_bound)
    eps_max: float
    w2_mean: float
    lipschitz_factor: float          # sqrt(D) e^M
    s_bound_max: float               # lipschitz_factor * eps_max
    s_bound_mean: float
    spot_checks: list = field(default_factory=list)  # (x tuple, t, estimate, certified)


def evaluate_rcd(
    params: GDNParams,
    scenario: "Scenario",
    grid: EvalGrid = EvalGrid(),
    quad_steps: int = 1024,
    n_spot_checks: int = 0,
    spot_samples: int = 1024,
) -> EvalReport:
    """Grid evaluation of the learned conditional law against the exact one.

    Reports per-point W2 for the log-state law and the certified bound
    sqrt(D) e^M * eps for the clipped price law. Optional spot checks
    estimate the price-law distance from common-random-number push-forward
    samples and record it next to the certified bound.
    """
    d = scenario.dimension
    xs, ts = _heldout_grid(scenario, grid.nx, grid.nt)
    inputs = np.concatenate([xs, ts[:, None]], axis=1)
    laws = [m.law for m in exact_marginal_batch(scenario.coefficients, xs, ts, quad_steps)]
    coords = _forward(params, inputs)

    factor = float(np.sqrt(d) * np.exp(scenario.clip_threshold))
    rows = []
    predicted = []
    for row, law, x, t in zip(coords, laws, xs, ts):
        g = chart_decode(ChartCoords(row[:d], row[d:]))
        predicted.append(g)
        dist = w2_distance(g, law)
        rows.append((tuple(float(v) for v in x), float(t), dist, factor * dist))

    w2s = np.asarray([r[2] for r in rows])
    report = EvalReport(
        rows=rows,
        eps_max=float(w2s.max()),
        w2_mean=float(w2s.mean()),
        lipschitz_factor=factor,
        s_bound_max=factor * float(w2s.max()),
        s_bound_mean=factor * float(w2s.mean()),
    )

    if n_spot_checks > 0:
        cfg = ClipConfig(scenario.clip_threshold, d)
        picks = np.linspace(0, len(rows) - 1, min(n_spot_checks, len(rows))).astype(int)
        for j, i in enumerate(picks):
            seed = (scenario.seed + 7919 * (j + 1)) & 0xFFFFFFFFFFFFFFFF
            sa = pushforward_sample(predicted[i], cfg, spot_samples, seed)
            sb = pushforward_sample(laws[i], cfg, spot_samples, seed)
            est = empirical_w2(sa, sb)
            report.spot_checks.append((rows[i][0], rows[i][1], est, report.s_bound_max))
    return report


def save_checkpoint(
    params: GDNParams,
    path,
    scenario_hash: str = "",
    seed: int = 0,
) -> None:
    """Write the network to a JSON checkpoint (row-major weight arrays)."""
    payload = {
        "format": "genmarket-checkpoint-v1",
        "tool_version": __version__,
        "scenario_hash": scenario_hash,
        "seed": int(seed),
        "layer_dims": list(params.layer_dims),
        "activation": params.activation,
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[GDNParams, dict]:
    """Read a checkpoint; returns the parameters and the metadata dict."""
    with open(path) as fh:
        payload = json.load(fh)
    try:
        params = GDNParams(
            tuple(payload["layer_dims"]),
            tuple(np.asarray(w, dtype=float) for w in payload["weights"]),
            tuple(np.asarray(b, dtype=float) for b in payload["biases"]),
            payload.get("activation", "tanh"),
        )
    except KeyError as exc:
        raise ConfigError(f"checkpoint is missing field {exc}") from None
    meta = {k: payload.get(k) for k in ("format", "tool_version", "scenario_hash", "seed")}
    return params, meta
