"""Experiment configuration: hyperparameters, task specs and scenario configs."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

from .exceptions import ConfigurationError

OPTIMIZERS = ("adam", "adamw")
MASK_INITS = ("uniform", "constant")


@dataclass(frozen=True)
class Hyperparams:
    # model
    hidden_sizes: tuple = (128,)
    activation: str = "relu"
    # optimizer; weight decay only applies to "adamw"
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    # decomposition
    lambda1: float = 1e-4
    lambda2: float = 100.0
    lambda3: float = 100.0
    mask_cutoff: float = 0.1
    mask_init: str = "uniform"
    mask_init_logit: float = 0.0
    alpha_init: float = 0.1
    kb_sparsity: float = 1e-6
    decompose_biases: bool = False
    train_adaptive: bool = True
    # baselines
    mu: float = 0.01
    lambda_ewc: float = 100.0
    # per-method overrides; None keeps the method's own wiring
    direct_connection: bool | None = None
    sync_masks: bool | None = None
    upload_made_mask: bool | None = None
    order_agnostic: bool | None = None
    connectivity_agnostic: bool | None = None
    resample_every: str = "round"
    # metrics
    literal_forgetting: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.mask_init not in MASK_INITS:
            raise ConfigurationError(f"mask_init must be one of {MASK_INITS}")
        if not self.lambda3 > 0:
            raise ConfigurationError(f"lambda3 must be positive, got {self.lambda3}")
        if not 0.0 <= self.mask_cutoff < 1.0:
            raise ConfigurationError(f"mask_cutoff must lie in [0, 1), got {self.mask_cutoff}")
        for name in ("lambda1", "lambda2", "mu", "lambda_ewc", "weight_decay", "kb_sparsity"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")

    @property
    def adam_kwargs(self):
        wd = self.weight_decay if self.optimizer == "adamw" else 0.0
        return {"lr": self.lr, "weight_decay": wd}

    def to_dict(self):
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        if math.isinf(d["lambda3"]):
            d["lambda3"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown hyperparameters {unknown}; valid: {sorted(known)}")
        d = dict(d)
        if d.get("lambda3") == "inf":
            d["lambda3"] = math.inf
        return cls(**d)

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class TaskSpec:
    """One task of one client: a data source and (for labeled sources) a class subset."""

    source: str
    classes: tuple | None = None
    n_train: int = 0
    n_validation: int = 0
    n_test: int = 0

    def to_dict(self):
        return {"source": self.source,
                "classes": None if self.classes is None else list(self.classes),
                "n_train": self.n_train, "n_validation": self.n_validation,
                "n_test": self.n_test}


@dataclass
class ScenarioConfig:
    name: str
    n_clients: int
    tasks: list  # tasks[client][task] -> TaskSpec
    rounds_per_task: int = 50
    epochs_per_round: int = 1
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    workers: int = 1

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigurationError("need at least one client")
        if len(self.tasks) != self.n_clients:
            raise ConfigurationError(
                f"{len(self.tasks)} task sequences given for {self.n_clients} clients")
        lengths = {len(seq) for seq in self.tasks}
        if len(lengths) != 1 or 0 in lengths:
            raise ConfigurationError(f"all clients need the same non-zero task count, got {lengths}")
        for c, seq in enumerate(self.tasks):
            seen = set()
            for spec in seq:
                key = {(spec.source, k) for k in spec.classes} if spec.classes is not None \
                    else {(spec.source, None)}
                if seen & key:
                    raise ConfigurationError(
                        f"client {c} sees {sorted(seen & key, key=str)} in more than one task")
                seen |= key
        if self.rounds_per_task < 1 or self.epochs_per_round < 1:
            raise ConfigurationError("rounds_per_task and epochs_per_round must be positive")

    @property
    def n_tasks(self):
        return len(self.tasks[0])

    def to_dict(self):
        return {
            "name": self.name,
            "n_clients": self.n_clients,
            "n_tasks": self.n_tasks,
            "rounds_per_task": self.rounds_per_task,
            "epochs_per_round": self.epochs_per_round,
            "seed": self.seed,
            "hyper": self.hyper.to_dict(),
            "tasks": [[t.to_dict() for t in seq] for seq in self.tasks],
        }
