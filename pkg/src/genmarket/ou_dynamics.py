"""Time-dependent Ornstein-Uhlenbeck dynamics and their exact Gaussian marginals.

The latent log-state follows

    dX_t = (mu_t + M_t X_t) dt + sigma_t dW_t,    X_0 = x,

with continuously differentiable coefficient curves and sigma_t symmetric
positive definite. The marginal law at any t > 0 is Gaussian: the mean
solves dm/dt = mu_t + M_t m from m(0) = x, and the covariance follows by
variation of constants,

    Cov_t = Phi(t) [ int_0^t Phi(s)^{-1} sigma_s sigma_s' Phi(s)^{-T} ds ] Phi(t)',

where Phi is the state transition matrix (dPhi/dt = M_t Phi, Phi(0) = I).
When M == 0 this reduces to int_0^t sigma_s sigma_s' ds. Everything is
integrated with fixed-step classical RK4 on a shared grid, so results are
deterministic and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, TYPE_CHECKING

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.stats import qmc

from .bw_geometry import ChartCoords, GaussianMeasure, chart_encode
from .errors import DimensionError, DomainError, NearSingularError, NumericError

if TYPE_CHECKING:  # pragma: no cover
    from .scenario import Scenario

__all__ = [
    "OUCoefficients",
    "MarginalLaw",
    "exact_marginal",
    "exact_marginal_batch",
    "euler_maruyama_paths",
    "build_training_set",
]

DEFAULT_QUAD_STEPS = 1024

# Vectorized coefficient curve: times of shape (N,) -> (N, D) or (N, D, D).
CoeffFn = Callable[[np.ndarray], np.ndarray]


def _constant_fn(value: np.ndarray) -> CoeffFn:
    value = np.asarray(value, dtype=float)

    def fn(times: np.ndarray) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        return np.broadcast_to(value, times.shape + value.shape)

    return fn


def _spline_fn(breakpoints, values) -> CoeffFn:
    breakpoints = np.asarray(breakpoints, dtype=float)
    values = np.asarray(values, dtype=float)
    if breakpoints.ndim != 1 or len(breakpoints) < 2:
        raise DomainError("coefficient breakpoints need at least two ascending times")
    if np.any(np.diff(breakpoints) <= 0):
        raise DomainError("coefficient breakpoints must be strictly increasing")
    if values.shape[0] != breakpoints.shape[0]:
        raise DimensionError(
            f"coefficient values ({values.shape[0]}) do not match breakpoints ({len(breakpoints)})"
        )
    spline = CubicSpline(breakpoints, values, axis=0)

    def fn(times: np.ndarray) -> np.ndarray:
        return spline(np.asarray(times, dtype=float))

    return fn


@dataclass(frozen=True)
class OUCoefficients:
    """Drift vector mu_t, mean-reversion matrix M_t and volatility sigma_t.

    Each curve evaluates vectorized over a time array; sigma_t must be
    symmetric positive definite wherever it is sampled.
    """

    dim: int
    mu_fn: CoeffFn
    m_fn: CoeffFn
    sigma_fn: CoeffFn

    @classmethod
    def constant(cls, mu0, m0, sigma0) -> "OUCoefficients":
        mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
        m0 = np.asarray(m0, dtype=float)
        sigma0 = np.asarray(sigma0, dtype=float)
        d = mu0.shape[0]
        if m0.shape != (d, d) or sigma0.shape != (d, d):
            raise DimensionError(
                f"constant coefficients must be ({d},) / ({d},{d}) / ({d},{d}); "
                f"got {mu0.shape}, {m0.shape}, {sigma0.shape}"
            )
        return cls(d, _constant_fn(mu0), _constant_fn(m0), _constant_fn(sigma0))

    @classmethod
    def from_config(cls, config: dict, dim: int) -> "OUCoefficients":
        """Build from the scenario-file form: per coefficient either
        ``{"constant": value}`` or ``{"breakpoints": [...], "values": [...]}``
        (cubic interpolation between breakpoints)."""
        fns = {}
        shapes = {"mu": (dim,), "m": (dim, dim), "sigma": (dim, dim)}
        for name, shape in shapes.items():
            if name not in config:
                raise DomainError(f"coefficients missing entry '{name}'")
            entry = config[name]
            if "constant" in entry:
                value = np.asarray(entry["constant"], dtype=float)
                if value.shape != shape:
                    raise DimensionError(
                        f"coefficient '{name}' constant has shape {value.shape}, expected {shape}"
                    )
                fns[name] = _constant_fn(value)
            elif "breakpoints" in entry and "values" in entry:
                values = np.asarray(entry["values"], dtype=float)
                if values.shape[1:] != shape:
                    raise DimensionError(
                        f"coefficient '{name}' values have shape {values.shape[1:]}, expected {shape}"
                    )
                fns[name] = _spline_fn(entry["breakpoints"], values)
            else:
                raise DomainError(
                    f"coefficient '{name}' needs either 'constant' or 'breakpoints'+'values'"
                )
        return cls(dim, fns["mu"], fns["m"], fns["sigma"])

    def mu(self, t: float) -> np.ndarray:
        return self.mu_fn(np.asarray([t]))[0]

    def m(self, t: float) -> np.ndarray:
        return self.m_fn(np.asarray([t]))[0]

    def sigma(self, t: float) -> np.ndarray:
        return self.sigma_fn(np.asarray([t]))[0]

    def validate_on_grid(self, horizon: float, n_check: int = 65) -> None:
        """Check finiteness of all curves and SPD volatility on a sample grid."""
        grid = np.linspace(0.0, horizon, n_check)
        mu = self.mu_fn(grid)
        m = self.m_fn(grid)
        sig = self.sigma_fn(grid)
        for name, arr in (("mu", mu), ("m", m), ("sigma", sig)):
            if not np.isfinite(arr).all():
                raise NumericError(f"coefficient '{name}' is non-finite on [0, {horizon}]")
        asym = np.abs(sig - sig.transpose(0, 2, 1)).max()
        if asym > 1e-10 * (1.0 + np.abs(sig).max()):
            raise DomainError(f"volatility is not symmetric on the grid (asymmetry {asym:.3e})")
        for t, s in zip(grid, sig):
            evals = np.linalg.eigvalsh(0.5 * (s + s.T))
            if evals[0] <= 0.0:
                raise DomainError(
                    f"volatility at t={t:.6g} is not positive definite "
                    f"(smallest eigenvalue {evals[0]:.3e})"
                )


@dataclass(frozen=True)
class MarginalLaw:
    """Exact Gaussian law of the state at time t started from x0."""

    law: GaussianMeasure
    t: float
    x0: np.ndarray


def _integrate_marginals(
    coeffs: OUCoefficients,
    x0s: np.ndarray,
    ts: np.ndarray,
    quad_steps: int,
) -> tuple[np.ndarray, np.ndarray]:
    """RK4 sweep of (mean, Phi, int Phi^{-1} sigma sigma' Phi^{-T}) for a
    batch of (x0, t) pairs, time-rescaled so all items share one grid."""
    n, d = x0s.shape
    h = 1.0 / quad_steps

    mean = x0s.copy()
    phi = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    acc = np.zeros((n, d, d))
    tcol = ts[:, None]
    tmat = ts[:, None, None]

    def derivs(state, mu_v, m_v, diff_v):
        mean_s, phi_s, _ = state
        d_mean = tcol * (mu_v + (m_v @ mean_s[..., None])[..., 0])
        d_phi = tmat * (m_v @ phi_s)
        phi_inv = np.linalg.inv(phi_s)
        d_acc = tmat * (phi_inv @ diff_v @ phi_inv.transpose(0, 2, 1))
        return d_mean, d_phi, d_acc

    for k in range(quad_steps):
        tau = k * h
        stage_times = [tau * ts, (tau + 0.5 * h) * ts, (tau + h) * ts]
        mu_s = [coeffs.mu_fn(s) for s in stage_times]
        m_s = [coeffs.m_fn(s) for s in stage_times]
        diff_s = []
        for s in stage_times:
            sig = coeffs.sigma_fn(s)
            diff_s.append(sig @ sig.transpose(0, 2, 1))

        state = (mean, phi, acc)
        k1 = derivs(state, mu_s[0], m_s[0], diff_s[0])
        s2 = tuple(y + 0.5 * h * dy for y, dy in zip(state, k1))
        k2 = derivs(s2, mu_s[1], m_s[1], diff_s[1])
        s3 = tuple(y + 0.5 * h * dy for y, dy in zip(state, k2))
        k3 = derivs(s3, mu_s[1], m_s[1], diff_s[1])
        s4 = tuple(y + h * dy for y, dy in zip(state, k3))
        k4 = derivs(s4, mu_s[2], m_s[2], diff_s[2])

        mean = mean + (h / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        phi = phi + (h / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        acc = acc + (h / 6.0) * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])

    covs = phi @ acc @ phi.transpose(0, 2, 1)
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    return mean, covs


def _check_marginal_args(coeffs, x0, t, quad_steps):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (coeffs.dim,):
        raise DimensionError(f"x0 has shape {x0.shape}, expected ({coeffs.dim},)")
    if t <= 0.0:
        raise DomainError(f"marginal law requires t > 0, got t={t}")
    if quad_steps < 100:
        raise DomainError(f"quad_steps must be at least 100, got {quad_steps}")
    return x0


def exact_marginal(
    coeffs: OUCoefficients,
    x0,
    t: float,
    quad_steps: int = DEFAULT_QUAD_STEPS,
) -> MarginalLaw:
    """Exact Gaussian marginal of the state at time t from initial state x0."""
    x0 = _check_marginal_args(coeffs, x0, t, quad_steps)
    means, covs = _integrate_marginals(
        coeffs, x0[None, :], np.asarray([t], dtype=float), quad_steps
    )
    cov = covs[0]
    evals = np.linalg.eigvalsh(cov)
    if evals[0] <= 1e-12 * max(evals[-1], 0.0) or evals[-1] <= 0.0:
        raise NearSingularError(
            f"marginal covariance at t={t} is numerically singular "
            f"(smallest eigenvalue {evals[0]:.3e})"
        )
    return MarginalLaw(law=GaussianMeasure(means[0], cov), t=float(t), x0=x0)


def exact_marginal_batch(
    coeffs: OUCoefficients,
    x0s,
    ts,
    quad_steps: int = DEFAULT_QUAD_STEPS,
) -> list[MarginalLaw]:
    """Vectorized :func:`exact_marginal` over many (x0, t) pairs."""
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if x0s.shape[0] != ts.shape[0]:
        raise DimensionError(f"{x0s.shape[0]} states vs {ts.shape[0]} times")
    if x0s.shape[1] != coeffs.dim:
        raise DimensionError(f"states have dimension {x0s.shape[1]}, expected {coeffs.dim}")
    if np.any(ts <= 0.0):
        raise DomainError("marginal laws require strictly positive times")
    if quad_steps < 100:
        raise DomainError(f"quad_steps must be at least 100, got {quad_steps}")
    means, covs = _integrate_marginals(coeffs, x0s, ts, quad_steps)
    return [
        MarginalLaw(law=GaussianMeasure(m, c), t=float(t), x0=x)
        for m, c, t, x in zip(means, covs, ts, x0s)
    ]


def _path_rng(seed: int, path_index: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def euler_maruyama_paths(
    coeffs: OUCoefficients,
    x0,
    t: float,
    n_steps: int,
    n_paths: int,
    seed: int,
) -> np.ndarray:
    """Terminal states of Euler-Maruyama paths, shape (n_paths, dim).

    Each path draws its Gaussian increments from a counter-based Philox
    stream keyed by (seed, path index), so the output is bit-reproducible
    and independent of chunking or scheduling.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (coeffs.dim,):
        raise DimensionError(f"x0 has shape {x0.shape}, expected ({coeffs.dim},)")
    if n_steps < 1 or n_paths < 1:
        raise DomainError("n_steps and n_paths must be positive")
    if t <= 0.0:
        raise DomainError(f"simulation horizon must be positive, got t={t}")

    d = coeffs.dim
    dt = t / n_steps
    sqrt_dt = np.sqrt(dt)
    grid = np.arange(n_steps) * dt
    mu_grid = coeffs.mu_fn(grid)          # (n_steps, d)
    m_grid = coeffs.m_fn(grid)            # (n_steps, d, d)
    sigma_grid = coeffs.sigma_fn(grid)    # (n_steps, d, d)

    out = np.empty((n_paths, d))
    chunk = 8192
    for start in range(0, n_paths, chunk):
        size = min(chunk, n_paths - start)
        z = np.empty((size, n_steps, d))
        for i in range(size):
            z[i] = _path_rng(seed, start + i).standard_normal((n_steps, d))
        x = np.broadcast_to(x0, (size, d)).copy()
        for k in range(n_steps):
            drift = mu_grid[k] + x @ m_grid[k].T
            x = x + drift * dt + (z[:, k] @ sigma_grid[k].T) * sqrt_dt
        out[start : start + size] = x
    if not np.isfinite(out).all():
        raise NumericError("Euler-Maruyama simulation overflowed")
    return out


def build_training_set(
    scenario: "Scenario",
    n_x: int,
    n_t: int,
    seed: int,
    quad_steps: int = DEFAULT_QUAD_STEPS,
) -> list[tuple[tuple[np.ndarray, float], ChartCoords]]:
    """Sample ((x, t), chart target) pairs over the scenario's box and horizon.

    x-points are a scrambled Sobol sequence in the box K (low-discrepancy,
    so edges and corners are covered evenly), times form a uniform grid on
    [delta, horizon]; targets are the chart coordinates of the exact
    marginal law. Deterministic given the seed.
    """
    if scenario.delta <= 0.0:
        raise DomainError(f"delta must be positive, got {scenario.delta}")
    if n_x < 1 or n_t < 1:
        raise DomainError("n_x and n_t must be positive")
    coeffs = scenario.coefficients
    d = coeffs.dim
    lo = np.asarray([b[0] for b in scenario.domain], dtype=float)
    hi = np.asarray([b[1] for b in scenario.domain], dtype=float)

    sobol = qmc.Sobol(d=d, scramble=True, seed=seed & 0xFFFFFFFF)
    xs = lo + (hi - lo) * sobol.random(n_x)
    t_grid = np.linspace(scenario.delta, scenario.horizon, n_t)

    x_all = np.repeat(xs, n_t, axis=0)
    t_all = np.tile(t_grid, n_x)
    marginals = exact_marginal_batch(coeffs, x_all, t_all, quad_steps)
    return [
        ((x.copy(), float(t)), chart_encode(m.law))
        for x, t, m in zip(x_all, t_all, marginals)
    ]
