"""Monte Carlo pricing of Lipschitz claims and closed-form efficient portfolios.

Pricing samples the learned Gaussian law at (x, t), maps the draws through
the clipped exponential into price space, and averages the payoff. The
reported certified bias bound is

    ||V||_Lip * sqrt(D) * e^M * eps,

where eps is the worst-case 2-Wasserstein error of the model from its
evaluation report, sqrt(D) e^M is the Lipschitz constant of the clipped
price map, and ||V||_Lip adds the payoff's supremum over the reachable
price cube [e^{-M}, e^{M}]^D to its Lipschitz constant. The bound through
Kantorovich-Rubinstein duality is certified, not estimated.

The mean-variance problem

    min over w with 1'w = 1 of  -gamma mu'w + w'Sigma w / 2

has the unique closed-form solution (Sigma nonsingular)

    w = Sigma^{-1}1 / (1'Sigma^{-1}1)
        + gamma (Sigma^{-1}mu - (1'Sigma^{-1}mu)/(1'Sigma^{-1}1) Sigma^{-1}1),

computed here with Cholesky solves, never an explicit inverse; gamma = 0
gives the minimum-variance portfolio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, DimensionError, DomainError, NearSingularError
from .gdn_model import GDNParams, gdn_forward
from .market_map import ClipConfig, pushforward_sample

__all__ = [
    "PayoffSpec",
    "PriceResult",
    "PortfolioInput",
    "price_claim",
    "efficient_portfolio",
    "portfolio_from_model",
]

PAYOFF_KINDS = ("call_on_avg", "put_on_avg", "basket_linear", "custom_table")


@dataclass(frozen=True)
class PayoffSpec:
    """A Lipschitz payoff on price vectors with a declared Lipschitz constant.

    Kinds:
      call_on_avg / put_on_avg -- option on the average price, parameter
        ``strike``; Euclidean Lipschitz constant 1/sqrt(D).
      basket_linear -- ``weights`` . s + ``offset``; constant when the
        weights are all zero (the only payoffs allowed lip_const = 0).
      custom_table -- sum over coordinates of piecewise-linear functions
        given as ``tables``: a list of {"knots": [...], "values": [...]}
        per coordinate, extended by constants outside the knots. The
        declared constant is validated against the table slopes.
    """

    kind: str
    dimension: int
    strike: float = 0.0
    weights: tuple = ()
    offset: float = 0.0
    tables: tuple = ()
    lip_const: float = field(default=-1.0)  # -1 means "derive from the payoff"

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise ConfigError(f"unknown payoff kind '{self.kind}', expected one of {PAYOFF_KINDS}")
        if self.dimension < 1:
            raise ConfigError("payoff dimension must be positive")
        if self.kind == "basket_linear":
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.dimension,):
                raise DimensionError(
                    f"basket weights have shape {w.shape}, expected ({self.dimension},)"
                )
            object.__setattr__(self, "weights", tuple(float(v) for v in w))
        if self.kind == "custom_table":
            if len(self.tables) != self.dimension:
                raise DimensionError(
                    f"custom_table needs {self.dimension} per-coordinate tables, "
                    f"got {len(self.tables)}"
                )
            for i, tab in enumerate(self.tables):
                knots = np.asarray(tab["knots"], dtype=float)
                values = np.asarray(tab["values"], dtype=float)
                if knots.ndim != 1 or knots.shape != values.shape or len(knots) < 2:
                    raise ConfigError(f"table {i} needs matching knots/values with length >= 2")
                if np.any(np.diff(knots) <= 0):
                    raise ConfigError(f"table {i} knots must be strictly increasing")
                if not (np.isfinite(knots).all() and np.isfinite(values).all()):
                    raise ConfigError(f"table {i} has non-finite entries")
        derived = self._derived_lipschitz()
        declared = self.lip_const
        if declared is None or declared < 0:
            object.__setattr__(self, "lip_const", derived)
        else:
            if declared < derived - 1e-12:
                raise ConfigError(
                    f"declared Lipschitz constant {declared} is below the payoff's "
                    f"actual constant {derived:.6g}"
                )
            object.__setattr__(self, "lip_const", float(declared))
        if self.lip_const == 0.0 and not self.is_constant:
            raise ConfigError("lip_const may be zero only for constant payoffs")

    def _derived_lipschitz(self) -> float:
        if self.kind in ("call_on_avg", "put_on_avg"):
            return 1.0 / np.sqrt(self.dimension)
        if self.kind == "basket_linear":
            return float(np.linalg.norm(np.asarray(self.weights)))
        slopes_sq = 0.0
        for tab in self.tables:
            knots = np.asarray(tab["knots"], dtype=float)
            values = np.asarray(tab["values"], dtype=float)
            slopes = np.diff(values) / np.diff(knots)
            slopes_sq += float(np.max(np.abs(slopes))) ** 2 if len(slopes) else 0.0
        return float(np.sqrt(slopes_sq))

    @property
    def is_constant(self) -> bool:
        if self.kind == "basket_linear":
            return not np.any(np.asarray(self.weights))
        return self._derived_lipschitz() == 0.0

    def __call__(self, prices: np.ndarray) -> np.ndarray:
        """Evaluate on rows of a price matrix (n, D)."""
        prices = np.atleast_2d(np.asarray(prices, dtype=float))
        if prices.shape[1] != self.dimension:
            raise DimensionError(
                f"prices have dimension {prices.shape[1]}, expected {self.dimension}"
            )
        if self.kind == "call_on_avg":
            return np.maximum(prices.mean(axis=1) - self.strike, 0.0)
        if self.kind == "put_on_avg":
            return np.maximum(self.strike - prices.mean(axis=1), 0.0)
        if self.kind == "basket_linear":
            return prices @ np.asarray(self.weights) + self.offset
        out = np.zeros(prices.shape[0])
        for i, tab in enumerate(self.tables):
            out += np.interp(prices[:, i], tab["knots"], tab["values"])
        return out

    def sup_abs(self, clip_threshold: float) -> float:
        """Supremum of |V| over the reachable cube [e^{-M}, e^{M}]^D."""
        lo, hi = np.exp(-clip_threshold), np.exp(clip_threshold)
        if self.kind == "call_on_avg":
            return max(hi - self.strike, 0.0)
        if self.kind == "put_on_avg":
            return max(self.strike - lo, 0.0)
        if self.kind == "basket_linear":
            w = np.asarray(self.weights)
            top = self.offset + np.where(w > 0, w * hi, w * lo).sum()
            bot = self.offset + np.where(w > 0, w * lo, w * hi).sum()
            return float(max(abs(top), abs(bot)))
        top = bot = 0.0
        for tab in self.tables:
            knots = np.asarray(tab["knots"], dtype=float)
            inside = knots[(knots >= lo) & (knots <= hi)]
            probe = np.concatenate([[lo, hi], inside])
            vals = np.interp(probe, tab["knots"], tab["values"])
            top += vals.max()
            bot += vals.min()
        return float(max(abs(top), abs(bot)))

    def lipschitz_norm(self, clip_threshold: float) -> float:
        """sup |V| on the clipped cube plus the Lipschitz constant."""
        return self.sup_abs(clip_threshold) + self.lip_const

    @classmethod
    def from_dict(cls, data: dict, dimension: int) -> "PayoffSpec":
        if "kind" not in data:
            raise ConfigError("payoff is missing field 'kind'")
        kwargs = {
            "kind": data["kind"],
            "dimension": dimension,
            "lip_const": float(data.get("lip_const", -1.0)),
        }
        if "strike" in data:
            kwargs["strike"] = float(data["strike"])
        if "weights" in data:
            kwargs["weights"] = tuple(float(v) for v in data["weights"])
        if "offset" in data:
            kwargs["offset"] = float(data["offset"])
        if "tables" in data:
            kwargs["tables"] = tuple(data["tables"])
        return cls(**kwargs)


@dataclass(frozen=True)
class PriceResult:
    """Monte Carlo price with its sampling error and certified bias bound."""

    price: float
    standard_error: float
    certified_bias_bound: float
    n: int
    seed: int


def price_claim(
    params: GDNParams,
    x,
    t: float,
    payoff: PayoffSpec,
    n: int,
    seed: int,
    cfg: ClipConfig,
    epsilon: float | None = None,
) -> PriceResult:
    """Price E[V(E(U))] with U drawn from the learned law at (x, t).

    ``epsilon`` is the worst-case W2 error from the model's evaluation
    report; it is required for non-constant payoffs because the certified
    bias bound ||V||_Lip sqrt(D) e^M eps needs it. Constant payoffs price
    exactly with a zero bound and no sampling.
    """
    if payoff.dimension != cfg.dimension:
        raise DimensionError(
            f"payoff dimension {payoff.dimension} != clip dimension {cfg.dimension}"
        )
    if payoff.is_constant:
        value = float(payoff(np.ones((1, payoff.dimension)))[0])
        return PriceResult(value, 0.0, 0.0, n=0, seed=seed)
    if n < 1000:
        raise DomainError(f"Monte Carlo pricing needs n >= 1000, got {n}")
    if epsilon is None:
        raise DomainError(
            "pricing a non-constant payoff requires epsilon from an evaluation "
            "report; run the model evaluation first"
        )
    g = gdn_forward(params, x, t)
    prices = pushforward_sample(g, cfg, n, seed)
    values = payoff(prices)
    price = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(n))
    bound = payoff.lipschitz_norm(cfg.threshold) * np.sqrt(cfg.dimension) * np.exp(cfg.threshold)
    return PriceResult(price, se, float(bound * epsilon), n=n, seed=seed)


@dataclass(frozen=True)
class PortfolioInput:
    """Risk trade-off gamma, expected log returns, and SPD covariance."""

    gamma: float
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.gamma < 0.0:
            raise DomainError(f"gamma must be nonnegative, got {self.gamma}")
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (mu.shape[0], mu.shape[0]):
            raise DimensionError(
                f"sigma has shape {sigma.shape}, expected ({mu.shape[0]}, {mu.shape[0]})"
            )
        if np.abs(sigma - sigma.T).max() > 1e-10 * (1.0 + np.abs(sigma).max()):
            raise DomainError("sigma must be symmetric")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", 0.5 * (sigma + sigma.T))


def efficient_portfolio(inp: PortfolioInput) -> np.ndarray:
    """Closed-form mean-variance weights under the budget constraint 1'w = 1.

    Solved with a Cholesky factorization; a numerically singular
    covariance raises :class:`NearSingularError` naming the smallest
    eigenvalue.
    """
    evals = np.linalg.eigvalsh(inp.sigma)
    if evals[0] <= 1e-12 * max(evals[-1], 0.0) or evals[-1] <= 0.0:
        raise NearSingularError(
            f"covariance is numerically singular: smallest eigenvalue {evals[0]:.6e}"
        )
    factor = cho_factor(inp.sigma, lower=True)
    ones = np.ones(len(inp.mu))
    a = cho_solve(factor, ones)       # Sigma^{-1} 1
    b = cho_solve(factor, inp.mu)     # Sigma^{-1} mu
    denom = float(ones @ a)
    w = a / denom
    if inp.gamma != 0.0:
        w = w + inp.gamma * (b - (float(ones @ b) / denom) * a)
    return w


def portfolio_from_model(params: GDNParams, x, t: float, gamma: float) -> np.ndarray:
    """Efficient portfolio fed by the learned (mean, covariance) at (x, t)."""
    g = gdn_forward(params, x, t)
    return efficient_portfolio(PortfolioInput(gamma=gamma, mu=g.mean, sigma=g.cov))
