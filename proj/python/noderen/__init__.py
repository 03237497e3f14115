"""NodeREN models with contraction and incremental dissipativity certificates."""

import json as _json

from ._noderen import (
    Certificate,
    ConstructionError,
    Dataset,
    ExplicitParams,
    InputError,
    Model,
    NumericalError,
    TrainResult,
    cayley_contract,
    certificate_margin,
    certified_rate,
    contractivity_lmi,
    evaluate,
    generate_dataset,
    grad_fd,
    init_model,
    iqc_lmi,
    lipschitz_bound,
    load_dataset,
    load_model,
    loss_and_grad,
    pd_check,
    run_cli,
    save_checkpoint,
    save_dataset,
    simulate,
    supply_rate,
    train,
    tube,
)
from ._noderen import verify as _verify


def verify(path, empirical=False, pairs=10, seed=0):
    """Check a saved checkpoint; returns the report as a dict."""
    return _json.loads(_verify(path, empirical, pairs, seed))


__all__ = [name for name in dir() if not name.startswith("_")]
