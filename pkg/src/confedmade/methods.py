"""Method registry: how each named method is wired.

``regime`` selects the driver:

- ``joint``: one task holding all data (``offline`` on one learner,
  ``fed-offline`` spread evenly over the clients with FedAvg);
- ``sequential``: each client learns its task sequence alone;
- ``fedavg``: FedAvg over the clients' current tasks;
- ``decomposed``: base / task-adaptive decomposition with a knowledge base.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from .exceptions import UsageError


@dataclass(frozen=True)
class MethodSpec:
    name: str
    regime: str
    federated: bool
    loss: str  # nll | ewc | fedprox | fedweit | confedmade
    sync_masks: bool = True
    direct_connection: bool = True
    upload_made_mask: bool = True
    masked_composition: bool = False
    replay: bool = False
    order_agnostic: bool = False
    connectivity_agnostic: bool = False

    def to_dict(self):
        return asdict(self)


METHODS = {
    "offline": MethodSpec("offline", "joint", False, "nll"),
    "fed-offline": MethodSpec("fed-offline", "joint", True, "nll"),
    "finetune": MethodSpec("finetune", "sequential", False, "nll"),
    "cumulative-replay": MethodSpec("cumulative-replay", "sequential", False, "nll", replay=True),
    "ewc": MethodSpec("ewc", "sequential", False, "ewc"),
    "fedprox": MethodSpec("fedprox", "fedavg", True, "fedprox"),
    "fedavg-made": MethodSpec("fedavg-made", "fedavg", True, "nll"),
    "fedweit-made": MethodSpec("fedweit-made", "decomposed", True, "fedweit", sync_masks=False,
                               direct_connection=False, upload_made_mask=False),
    "fedweit-made-star": MethodSpec("fedweit-made-star", "decomposed", True, "fedweit",
                                    upload_made_mask=False),
    "confedmade": MethodSpec("confedmade", "decomposed", True, "confedmade",
                             masked_composition=True),
}

OVERRIDABLE = ("direct_connection", "sync_masks", "upload_made_mask", "order_agnostic",
               "connectivity_agnostic")


def get_method(name) -> MethodSpec:
    if name not in METHODS:
        raise UsageError(f"unknown method {name!r}; valid methods: {', '.join(METHODS)}")
    return METHODS[name]


def resolve_method(name, hyper) -> MethodSpec:
    """The method's wiring with any non-``None`` overrides from ``hyper`` applied."""
    spec = get_method(name)
    changes = {k: getattr(hyper, k) for k in OVERRIDABLE if getattr(hyper, k) is not None}
    return replace(spec, **changes) if changes else spec
