"""Command-line entry points: simulate, fit, eval, price, portfolio.

Every command is a pure function of its input files, flags, and seed:
output files are byte-identical across reruns. Emitted files embed the
scenario hash and tool version. Exit codes: 0 success, 2 configuration or
input error, 3 numerical failure. GENMARKET_THREADS caps the linear
algebra thread pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, DimensionError, DomainError, NumericError
from .gdn_model import (
    EvalGrid,
    TrainConfig,
    evaluate_rcd,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .market_map import ClipConfig
from .ou_dynamics import build_training_set, euler_maruyama_paths, exact_marginal
from .pricing_portfolio import (
    PayoffSpec,
    PortfolioInput,
    efficient_portfolio,
    portfolio_from_model,
    price_claim,
)
from .scenario import Scenario, load_scenario

__all__ = [
    "main",
    "cmd_simulate",
    "cmd_fit",
    "cmd_eval",
    "cmd_price",
    "cmd_portfolio",
]


def _parse_vector(text: str, dim: int, what: str) -> np.ndarray:
    try:
        values = np.asarray([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated list of numbers, got '{text}'")
    if values.shape != (dim,):
        raise ConfigError(f"{what} needs {dim} components, got {len(values)}")
    return values


def _check_in_box(x: np.ndarray, scenario: Scenario) -> None:
    for i, (lo, hi) in enumerate(scenario.domain):
        if not lo <= x[i] <= hi:
            raise ConfigError(
                f"x[{i}]={x[i]} is outside the scenario domain [{lo}, {hi}]"
            )


def _check_time(t: float, scenario: Scenario) -> None:
    if not scenario.delta <= t <= scenario.horizon:
        raise ConfigError(
            f"t={t} is outside the scenario window [{scenario.delta}, {scenario.horizon}]"
        )


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: str, scenario_hash: str, extra_comments: list, header: list, rows) -> None:
    lines = [f"# scenario_hash={scenario_hash}", f"# tool_version={__version__}"]
    lines.extend(f"# {c}" for c in extra_comments)
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_matching_checkpoint(path: str, scenario: Scenario):
    params, meta = load_checkpoint(path)
    ck_hash = meta.get("scenario_hash") or ""
    if ck_hash and ck_hash != scenario.hash:
        raise ConfigError(
            f"checkpoint was trained on scenario {ck_hash[:12]}..., "
            f"but the given scenario hashes to {scenario.hash[:12]}..."
        )
    return params, meta


def read_eval_epsilon(path: str) -> float:
    """Recover epsilon_max from an evaluation report CSV."""
    try:
        with open(path) as fh:
            for line in fh:
                if line.startswith("# epsilon_max="):
                    return float(line.split("=", 1)[1])
    except FileNotFoundError:
        raise ConfigError(f"evaluation report not found: {path}") from None
    except ValueError:
        raise ConfigError(f"evaluation report {path} has a malformed epsilon_max") from None
    raise ConfigError(f"evaluation report {path} does not contain an epsilon_max line")


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    x = _parse_vector(args.x, scenario.dimension, "--x")
    if args.t <= 0:
        raise DomainError(f"--t must be positive, got {args.t}")

    terminal = euler_maruyama_paths(
        scenario.coefficients, x, args.t, args.n_steps, args.n_paths, seed
    )
    marginal = exact_marginal(scenario.coefficients, x, args.t, args.quad_steps)

    header = [f"x{i + 1}" for i in range(scenario.dimension)]
    comments = [f"t={args.t!r}", f"n_steps={args.n_steps}", f"seed={seed}"]
    _write_csv(args.out_paths, scenario.hash, comments, header, terminal.tolist())
    _write_json(
        args.out_marginal,
        {
            "scenario_hash": scenario.hash,
            "tool_version": __version__,
            "t": args.t,
            "x0": x.tolist(),
            "quad_steps": args.quad_steps,
            "mean": marginal.law.mean.tolist(),
            "cov": marginal.law.cov.tolist(),
        },
    )
    print(f"simulate: wrote {args.n_paths} terminal states to {args.out_paths}")
    return 0


def cmd_fit(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    data_seed = scenario.seed if args.data_seed is None else args.data_seed
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        lr_decay=args.lr_decay,
        warmup_epochs=args.warmup_epochs,
        momentum=args.momentum,
        seed=seed,
        depth=args.depth,
        width=args.width,
        activation=args.activation,
        patience=args.patience,
        quad_steps=args.quad_steps,
    )
    # the training set belongs to the scenario: its seed defaults to the
    # scenario seed independently of the optimizer seed
    train_set = build_training_set(scenario, args.n_x, args.n_t, data_seed, args.quad_steps)
    params, report = train(scenario, train_set, cfg)
    save_checkpoint(params, args.checkpoint, scenario_hash=scenario.hash, seed=seed)
    _write_csv(
        args.report,
        scenario.hash,
        [f"final_heldout_max_w2={report.final_heldout_max_w2!r}"],
        ["epoch", "surrogate_loss", "heldout_max_w2"],
        [(e, l, w) for e, l, w in report.records],
    )
    print(
        f"fit: {report.epochs_run} epochs, final loss {report.final_loss:.3e}, "
        f"held-out max W2 {report.final_heldout_max_w2:.5f}"
    )
    return 0


def cmd_eval(args) -> int:
    scenario = load_scenario(args.scenario)
    params, _ = _load_matching_checkpoint(args.checkpoint, scenario)
    report = evaluate_rcd(
        params,
        scenario,
        EvalGrid(args.grid_nx, args.grid_nt),
        quad_steps=args.quad_steps,
        n_spot_checks=args.spot_checks,
        spot_samples=args.spot_samples,
    )
    comments = [
        f"epsilon_max={report.eps_max!r}",
        f"w2_mean={report.w2_mean!r}",
        f"lipschitz_factor={report.lipschitz_factor!r}",
        f"s_law_bound_max={report.s_bound_max!r}",
        f"s_law_bound_mean={report.s_bound_mean!r}",
    ]
    for x, t, est, certified in report.spot_checks:
        comments.append(
            f"spot_check=x:{[float(v) for v in x]!r};t:{t!r};"
            f"estimate:{est!r};certified:{certified!r}"
        )
    d = scenario.dimension
    header = [f"x{i + 1}" for i in range(d)] + ["t", "w2_state_law", "s_law_bound"]
    rows = [list(x) + [t, w2, sb] for x, t, w2, sb in report.rows]
    _write_csv(args.out, scenario.hash, comments, header, rows)
    print(
        f"eval: {len(report.rows)} grid points, epsilon={report.eps_max:.5f}, "
        f"certified price-law bound {report.s_bound_max:.5f}"
    )
    return 0


def cmd_price(args) -> int:
    scenario = load_scenario(args.scenario)
    params, _ = _load_matching_checkpoint(args.checkpoint, scenario)
    if scenario.payoff is None:
        raise ConfigError("scenario has no 'payoff' section")
    payoff = PayoffSpec.from_dict(scenario.payoff, scenario.dimension)
    x = _parse_vector(args.x, scenario.dimension, "--x")
    _check_in_box(x, scenario)
    _check_time(args.t, scenario)
    seed = scenario.seed if args.seed is None else args.seed

    epsilon = args.epsilon
    if epsilon is None and args.eval_report is not None:
        epsilon = read_eval_epsilon(args.eval_report)

    cfg = ClipConfig(scenario.clip_threshold, scenario.dimension)
    result = price_claim(params, x, args.t, payoff, args.n, seed, cfg, epsilon)
    _write_json(
        args.out,
        {
            "scenario_hash": scenario.hash,
            "tool_version": __version__,
            "x": x.tolist(),
            "t": args.t,
            "price": result.price,
            "se": result.standard_error,
            "bias_bound": result.certified_bias_bound,
            "n": result.n,
            "seed": result.seed,
        },
    )
    print(
        f"price: {result.price!r} (se {result.standard_error:.3e}, "
        f"certified bias bound {result.certified_bias_bound:.3e})"
    )
    return 0


def cmd_portfolio(args) -> int:
    explicit = args.mu is not None or args.sigma is not None
    if explicit and (args.mu is None or args.sigma is None):
        raise ConfigError("explicit mode needs both --mu and --sigma")

    if explicit:
        mu = np.asarray([float(v) for v in args.mu.split(",")])
        try:
            sigma = np.asarray(json.loads(args.sigma), dtype=float)
        except (json.JSONDecodeError, ValueError):
            raise ConfigError(f"--sigma must be a JSON matrix, got '{args.sigma}'") from None
        gamma = 0.0 if args.gamma is None else args.gamma
        weights = efficient_portfolio(PortfolioInput(gamma=gamma, mu=mu, sigma=sigma))
        payload = {
            "scenario_hash": "",
            "tool_version": __version__,
            "source": "explicit",
            "gamma": gamma,
            "weights": weights.tolist(),
        }
    else:
        if args.scenario is None or args.checkpoint is None:
            raise ConfigError(
                "model mode needs --scenario and --checkpoint (or pass --mu/--sigma)"
            )
        scenario = load_scenario(args.scenario)
        params, _ = _load_matching_checkpoint(args.checkpoint, scenario)
        query = scenario.portfolio or {}
        gamma = args.gamma if args.gamma is not None else float(query.get("gamma", 0.0))
        x_text = args.x if args.x is not None else ",".join(
            str(v) for v in query.get("x", [])
        )
        if not x_text:
            raise ConfigError("portfolio query needs --x or a scenario 'portfolio.x' entry")
        x = _parse_vector(x_text, scenario.dimension, "--x")
        t = args.t if args.t is not None else query.get("t")
        if t is None:
            raise ConfigError("portfolio query needs --t or a scenario 'portfolio.t' entry")
        _check_in_box(x, scenario)
        _check_time(float(t), scenario)
        weights = portfolio_from_model(params, x, float(t), gamma)
        payload = {
            "scenario_hash": scenario.hash,
            "tool_version": __version__,
            "source": "model",
            "gamma": gamma,
            "x": x.tolist(),
            "t": float(t),
            "weights": weights.tolist(),
        }
    _write_json(args.out, payload)
    print(f"portfolio: weights {np.asarray(payload['weights'])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genmarket",
        description="Gaussian market generator: simulate, fit, evaluate, price, allocate.",
    )
    parser.add_argument("--version", action="version", version=f"genmarket {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Euler-Maruyama paths plus the exact marginal law")
    p.add_argument("--scenario", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--x", required=True, help="initial state, comma-separated")
    p.add_argument("--n-paths", type=int, default=10000)
    p.add_argument("--n-steps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quad-steps", type=int, default=1024)
    p.add_argument("--out-paths", default="paths.csv")
    p.add_argument("--out-marginal", default="marginal.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="train the Gaussian-valued network on a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--checkpoint", default="checkpoint.json")
    p.add_argument("--report", default="training_report.csv")
    p.add_argument("--n-x", type=int, default=128)
    p.add_argument("--n-t", type=int, default=8)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--activation", default="tanh")
    p.add_argument("--epochs", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=0.02)
    p.add_argument("--lr-decay", type=float, default=0.9995)
    p.add_argument("--warmup-epochs", type=int, default=40)
    p.add_argument("--momentum", type=float, default=0.95)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--quad-steps", type=int, default=1024)
    p.add_argument("--seed", type=int, default=None, help="optimizer seed")
    p.add_argument("--data-seed", type=int, default=None, help="training-set seed")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="grid evaluation against the exact conditional law")
    p.add_argument("--scenario", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="eval_report.csv")
    p.add_argument("--grid-nx", type=int, default=5)
    p.add_argument("--grid-nt", type=int, default=5)
    p.add_argument("--spot-checks", type=int, default=0)
    p.add_argument("--spot-samples", type=int, default=1024)
    p.add_argument("--quad-steps", type=int, default=1024)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("price", help="Monte Carlo price of the scenario's payoff")
    p.add_argument("--scenario", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--n", type=int, default=100000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-report", default=None, help="evaluation CSV to read epsilon from")
    p.add_argument("--epsilon", type=float, default=None, help="override epsilon directly")
    p.add_argument("--out", default="price.json")
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("portfolio", help="mean-variance weights from model or explicit inputs")
    p.add_argument("--scenario", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--x", default=None)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--mu", default=None, help="explicit expected returns, comma-separated")
    p.add_argument("--sigma", default=None, help="explicit covariance as a JSON matrix")
    p.add_argument("--out", default="weights.json")
    p.set_defaults(func=cmd_portfolio)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    limit = os.environ.get("GENMARKET_THREADS")
    try:
        if limit is not None:
            import threadpoolctl

            with threadpoolctl.threadpool_limits(int(limit)):
                return args.func(args)
        return args.func(args)
    except (ConfigError, DomainError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
