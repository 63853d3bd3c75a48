"""Federated hyperparameter tuning under noisy evaluation, as a desk-scale simulator."""

from fedtune.federated import (
    ClientDataset,
    ClientPopulation,
    FederatedLogisticRegression,
    FederatedWorkload,
    ModelState,
    aggregate_error,
    client_error,
    client_opt,
    full_validation_error,
    generate_population,
    oracle_population,
    server_opt,
    train,
)
from fedtune.noise import (
    BudgetExhausted,
    EvalPolicy,
    PrivacyBudget,
    biased_sample,
    noisy_evaluate,
    oneshot_topk,
    private_release,
    repartition_iid,
    subsample_uniform,
)
from fedtune.space import Dimension, HpConfig, SearchSpace, default_space, nested_server_lr_space, sample_config
from fedtune.surrogate import SurrogateResponse, SurrogateWorkload, make_surrogate, surrogate_error
from fedtune.tuners import BOHB, TPE, Hyperband, RandomSearch, make_tuner

__version__ = "0.1.0"
