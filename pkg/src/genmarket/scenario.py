"""Scenario files: the single source of truth for an experiment.

A scenario JSON fixes the state dimension, the clipping threshold, the
compact state box K, the time window [delta, horizon], the coefficient
curves of the dynamics, and the base seed. Optional "payoff" and
"portfolio" sections configure the pricing and portfolio commands. Every
emitted artifact embeds the scenario hash, a SHA-256 over the canonical
serialization of the defining fields, so outputs are traceable to their
configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .ou_dynamics import OUCoefficients

__all__ = ["Scenario", "load_scenario", "scenario_hash"]


def _require(data: dict, key: str, kind, what: str):
    if key not in data:
        raise ConfigError(f"scenario is missing field '{key}'")
    value = data[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"scenario field '{key}' must be {what}")
    return value


@dataclass(frozen=True)
class Scenario:
    """Validated scenario configuration plus its canonical hash."""

    dimension: int
    clip_threshold: float
    domain: tuple
    delta: float
    horizon: float
    coefficients: OUCoefficients
    seed: int
    hash: str
    payoff: dict | None = None
    portfolio: dict | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        dim = _require(data, "dimension", int, "a positive integer")
        if isinstance(dim, bool) or dim < 1:
            raise ConfigError("scenario field 'dimension' must be a positive integer")
        clip = _require(data, "clip_threshold", float, "a positive number")
        if not (np.isfinite(clip) and clip > 0):
            raise ConfigError("scenario field 'clip_threshold' must be positive and finite")
        delta = _require(data, "delta", float, "a positive number")
        horizon = _require(data, "horizon", float, "a number larger than delta")
        if not (0 < delta < horizon):
            raise ConfigError(
                f"scenario fields require 0 < delta < horizon, got delta={delta}, horizon={horizon}"
            )
        domain_raw = _require(data, "domain", list, "a list of [lo, hi] pairs")
        if len(domain_raw) != dim:
            raise ConfigError(
                f"scenario field 'domain' has {len(domain_raw)} entries, expected {dim}"
            )
        domain = []
        for i, pair in enumerate(domain_raw):
            if not (isinstance(pair, list) and len(pair) == 2):
                raise ConfigError(f"scenario field 'domain[{i}]' must be a [lo, hi] pair")
            lo, hi = float(pair[0]), float(pair[1])
            if not lo < hi:
                raise ConfigError(f"scenario field 'domain[{i}]' needs lo < hi, got [{lo}, {hi}]")
            domain.append((lo, hi))
        coeff_config = _require(data, "coefficients", dict, "an object with mu/m/sigma entries")
        try:
            coefficients = OUCoefficients.from_config(coeff_config, dim)
            coefficients.validate_on_grid(horizon)
        except (ConfigError,) as exc:
            raise exc
        except Exception as exc:
            raise ConfigError(f"scenario field 'coefficients' is invalid: {exc}") from None
        seed = _require(data, "seed", int, "an integer")

        digest = scenario_hash(data)
        return cls(
            dimension=dim,
            clip_threshold=clip,
            domain=tuple(domain),
            delta=delta,
            horizon=horizon,
            coefficients=coefficients,
            seed=seed,
            hash=digest,
            payoff=data.get("payoff"),
            portfolio=data.get("portfolio"),
        )


def scenario_hash(data: dict) -> str:
    """SHA-256 over the canonical serialization of the defining fields."""
    core = {
        key: data[key]
        for key in ("dimension", "clip_threshold", "domain", "delta", "horizon",
                    "coefficients", "seed")
        if key in data
    }
    canonical = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def load_scenario(path) -> Scenario:
    """Read and validate a scenario JSON file."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"scenario file {path} must contain a JSON object")
    return Scenario.from_dict(data)
