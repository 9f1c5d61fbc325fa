"""Deterministic multi-participant simulator for decentralized collaborative
training with distributed differential privacy.

Subpackages roughly follow the protocol stack: :mod:`~decaph.numerics`
(streams + fixed point) under :mod:`~decaph.secagg` (masked aggregation)
under :mod:`~decaph.protocol` (round state machine), with :mod:`~decaph.dp`
supplying clipping/noising/accounting, :mod:`~decaph.models` the gradient
engine, :mod:`~decaph.data` the shards, :mod:`~decaph.metrics` the task
scores, and :mod:`~decaph.audit` the membership-inference auditor.
"""

from .data import DatasetShard, SyntheticSpec, generate, global_normalize, kfold
from .dp import DpConfig, PrivacyLedger, rdp_step, rdp_to_dp
from .models import Arch, ModelState, init_model, per_example_grads, predict
from .numerics import FixedPointCodec, Prng, gaussian
from .protocol import ProtocolConfig, TrainResult, select_leader, train
from .secagg import SecAggSession, aggregate, comm_cost, mask

__version__ = "0.1.0"

__all__ = [
    "Arch",
    "DatasetShard",
    "DpConfig",
    "FixedPointCodec",
    "ModelState",
    "PrivacyLedger",
    "Prng",
    "ProtocolConfig",
    "SecAggSession",
    "SyntheticSpec",
    "TrainResult",
    "aggregate",
    "comm_cost",
    "gaussian",
    "generate",
    "global_normalize",
    "init_model",
    "kfold",
    "mask",
    "per_example_grads",
    "predict",
    "rdp_step",
    "rdp_to_dp",
    "select_leader",
    "train",
    "__version__",
]
