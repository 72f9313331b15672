"""Gaussian market generator.

Learns the conditional law of a generalized Ornstein-Uhlenbeck log-state
as a Gaussian-valued network in Bures-Wasserstein geometry, pushes it
through a clipped exponential into price space, prices Lipschitz claims by
Monte Carlo, and computes closed-form mean-variance portfolios.
"""

__version__ = "0.1.0"

from .bw_geometry import (
    ChartCoords,
    GaussianMeasure,
    chart_decode,
    chart_encode,
    matrix_exp,
    matrix_log,
    spd_sqrt,
    sym_embed,
    sym_extract,
    w2_distance,
)
from .ou_dynamics import (
    MarginalLaw,
    OUCoefficients,
    build_training_set,
    euler_maruyama_paths,
    exact_marginal,
    exact_marginal_batch,
)
from .market_map import (
    ClipConfig,
    clipped_exp,
    empirical_w2,
    pushforward_sample,
)
from .gdn_model import (
    EvalGrid,
    EvalReport,
    GDNParams,
    TrainConfig,
    TrainReport,
    chart_mse,
    evaluate_rcd,
    fixed_t_params,
    fixed_t_width,
    gdn_forward,
    gdn_from_measure,
    gdn_gradient,
    init_gdn_params,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .pricing_portfolio import (
    PayoffSpec,
    PortfolioInput,
    PriceResult,
    efficient_portfolio,
    portfolio_from_model,
    price_claim,
)
from .scenario import Scenario, load_scenario, scenario_hash

__all__ = [
    "__version__",
    "ChartCoords",
    "GaussianMeasure",
    "chart_decode",
    "chart_encode",
    "matrix_exp",
    "matrix_log",
    "spd_sqrt",
    "sym_embed",
    "sym_extract",
    "w2_distance",
    "MarginalLaw",
    "OUCoefficients",
    "build_training_set",
    "euler_maruyama_paths",
    "exact_marginal",
    "exact_marginal_batch",
    "ClipConfig",
    "clipped_exp",
    "empirical_w2",
    "pushforward_sample",
    "EvalGrid",
    "EvalReport",
    "GDNParams",
    "TrainConfig",
    "TrainReport",
    "chart_mse",
    "evaluate_rcd",
    "fixed_t_params",
    "fixed_t_width",
    "gdn_forward",
    "gdn_from_measure",
    "gdn_gradient",
    "init_gdn_params",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "PayoffSpec",
    "PortfolioInput",
    "PriceResult",
    "efficient_portfolio",
    "portfolio_from_model",
    "price_claim",
    "Scenario",
    "load_scenario",
    "scenario_hash",
]
