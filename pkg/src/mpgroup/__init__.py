"""Insurance portfolio compression with model points optimised through neural surrogates."""

from .actuarial import (
    MortalityModel,
    RetirementTable,
    ValuationAssumptions,
    bounds_for_model_point,
    policy_values,
    survival_prob,
    value_portfolio,
)
from .clustering import baseline_grouping, kmeans
from .grouping import GroupingOptions, backtest, group_portfolio, optimize_model_points
from .portfolio import Contract, Portfolio, ProductLine, synth_dc, synth_term_life
from .sobol import sobol_points
from .surrogate import SurrogateEnsemble, TrainConfig, evaluate, split, train_ensemble

__version__ = "0.1.0"
