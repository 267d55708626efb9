"""scikit-learn style wrappers.

``MADEDensity`` is a regular density estimator (``fit`` / ``score_samples`` /
``score`` / ``sample``). ``ContinualFederatedMADE`` fits a whole scenario given
as nested arrays and exposes the resulting report.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .config import Hyperparams
from .data import scenario_from_arrays
from .made import MadeConfig, MadeModel, check_binary_input, train_epoch
from .numeric import AdamState
from .runner import run_scenario


def _seed(random_state):
    return int(check_random_state(random_state).randint(0, 2**31 - 1))


class MADEDensity(DensityMixin, BaseEstimator):
    """MADE density estimator over binary feature vectors.

    Parameters
    ----------
    hidden_sizes : tuple of int
    activation : {"relu", "tanh"}
    direct_connection : bool
    n_epochs : int
    batch_size : int
    learning_rate : float
    weight_decay : float
        Decoupled (AdamW) weight decay.
    random_state : int, RandomState or None
    """

    def __init__(self, hidden_sizes=(64,), activation="relu", direct_connection=True,
                 n_epochs=10, batch_size=32, learning_rate=1e-3, weight_decay=0.0,
                 random_state=None):
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.direct_connection = direct_connection
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        X = check_binary_input(X, X.shape[1])
        seed = _seed(self.random_state)
        config = MadeConfig(n_inputs=X.shape[1], hidden_sizes=tuple(self.hidden_sizes),
                            activation=self.activation,
                            direct_connection=self.direct_connection, mask_seed=seed)
        rng = np.random.default_rng(seed)
        model = MadeModel.create(config, rng)
        state = AdamState.for_params(model.params, lr=self.learning_rate,
                                     weight_decay=self.weight_decay)
        self.loss_curve_ = [train_epoch(model, X, rng, state, self.batch_size)
                            for _ in range(self.n_epochs)]
        self.model_ = model
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        """Log-likelihood (nats) of each row."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return -self.model_.nll(check_binary_input(X, self.n_features_in_))

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "model_")
        return self.model_.sample(np.random.default_rng(_seed(random_state)), n_samples)


class ContinualFederatedMADE(BaseEstimator):
    """Run a continual federated method on ``tasks[client][task]`` binary arrays.

    After ``fit``: ``report_`` (a :class:`RunReport`), ``loss_matrix_`` and
    ``forgetting_``.
    """

    def __init__(self, method="confedmade", rounds_per_task=10, epochs_per_round=1,
                 hyperparams=None, test_fraction=0.2, workers=1, random_state=None):
        self.method = method
        self.rounds_per_task = rounds_per_task
        self.epochs_per_round = epochs_per_round
        self.hyperparams = hyperparams
        self.test_fraction = test_fraction
        self.workers = workers
        self.random_state = random_state

    def fit(self, tasks, y=None):
        hyper = self.hyperparams
        if isinstance(hyper, dict):
            hyper = Hyperparams.from_dict(hyper)
        tasks = [[check_array(X, dtype=np.float64) for X in seq] for seq in tasks]
        scenario = scenario_from_arrays(
            tasks, seed=_seed(self.random_state),
            split=(1.0 - self.test_fraction, 0.0, self.test_fraction),
            rounds_per_task=self.rounds_per_task, epochs_per_round=self.epochs_per_round,
            hyper=hyper or Hyperparams(), workers=self.workers)
        self.report_ = run_scenario(scenario, self.method)
        self.loss_matrix_ = self.report_.loss_matrix.values.copy()
        self.forgetting_ = self.report_.forgetting
        self.n_features_in_ = scenario.n_inputs
        return self
