"""Round state machine for decentralized private training plus baselines.

One ``decaph`` round:

1. a leader is drawn uniformly for the round;
2. every participant Poisson-samples its shard at the shared rate p and the
   leader securely aggregates the batch sizes into |B_t|;
3. participants compute per-example gradients, clip each to norm C, sum, and
   add Gaussian noise of variance (|B_h|/|B_t|)*(C*sigma)^2;
4. the noised local sums travel to the leader as masked shares;
5. the leader securely aggregates, divides by |B_t|, and takes the SGD step
   (the aggregate noise has variance exactly (C*sigma)^2, i.e. one central
   DP-SGD step on the pooled data);
6. everyone synchronizes to the leader's parameters;
7. the accountant advances one subsampled-Gaussian step.

``fl`` is the same pipeline with clipping and noising disabled and no
accounting. ``local_dp`` is the local-DP baseline: each participant runs its
own full-noise DP-SGD step at its own local sampling rate and active
participants' models are merged FedAvg-style; a participant whose own ledger
exhausts drops out.

The harness is in-process: participants are logical actors driven round by
round, all messages pass through a :class:`MessageLog`, and a single master
seed makes every run replayable bit for bit. The leader's code path only
ever sees masked shares and decoded aggregates, never an individual
participant's plaintext gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import DatasetShard
from .dp import DpConfig, PrivacyLedger, clip, local_noise_and_sum, poisson_sample
from .models import ModelState, apply_update, per_example_grads
from .numerics import FixedPointCodec, Prng
from .secagg import MaskedShare, SecAggSession, aggregate, mask

__all__ = [
    "MODES",
    "ProtocolConfig",
    "RoundMessage",
    "RoundRecord",
    "MessageLog",
    "TrainResult",
    "select_leader",
    "run_decaph_round",
    "run_fl_round",
    "run_local_dp_round",
    "train",
]

MODES = ("decaph", "fl", "local_dp")

_NO_CLIP = 1e9  # effectively disables clipping in the fl pipeline


@dataclass(frozen=True)
class ProtocolConfig:
    mode: str
    n_participants: int
    aggregate_batch_target: int
    dp: Optional[DpConfig] = None
    max_rounds: Optional[int] = None
    max_epochs: Optional[int] = None
    leader_seed: int = 0
    seed: int = 0
    sync_every_step: bool = True
    use_secagg: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_participants < 1:
            raise ValueError("need at least one participant")
        if self.aggregate_batch_target < 1:
            raise ValueError("aggregate_batch_target must be >= 1")
        if self.mode == "decaph":
            if not self.sync_every_step:
                raise ValueError("decaph requires synchronizing every step")
            if not self.use_secagg:
                raise ValueError("decaph requires secure aggregation")
            if self.dp is None:
                raise ValueError("decaph requires a DP configuration")
        if self.mode == "local_dp" and self.dp is None:
            raise ValueError("local_dp requires a DP configuration")
        if self.max_rounds is None and self.max_epochs is None:
            raise ValueError("set max_rounds or max_epochs")
        if (self.max_rounds is not None and self.max_rounds < 0) or (
            self.max_epochs is not None and self.max_epochs < 0
        ):
            raise ValueError("round/epoch limits must be >= 0")


@dataclass(frozen=True)
class RoundMessage:
    kind: str  # BatchSizeShare | GradientShare | ModelSync | LeaderAnnounce
    sender: int
    round_index: int
    payload: object

    def n_bytes(self) -> int:
        if isinstance(self.payload, MaskedShare):
            return self.payload.n_bytes
        if isinstance(self.payload, np.ndarray):
            return 8 * self.payload.size
        return 8  # scalar announcements (leader id, aggregate batch size)


class MessageLog:
    """Ordered record of every message: (recipient, message) pairs."""

    def __init__(self):
        self.entries: list[tuple[int, RoundMessage]] = []

    def send(self, to: int, msg: RoundMessage) -> None:
        self.entries.append((to, msg))

    def bytes_in_round(self, round_index: int) -> int:
        return sum(m.n_bytes() for _, m in self.entries if m.round_index == round_index)

    def received_by(self, pid: int, kind: str | None = None) -> list[RoundMessage]:
        return [
            m
            for to, m in self.entries
            if to == pid and (kind is None or m.kind == kind)
        ]


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    leader_id: int
    aggregate_batch_size: int
    batch_sizes: tuple[int, ...]
    epsilon: Optional[float]
    train_loss: float
    bytes_communicated: int


@dataclass
class TrainResult:
    models: list[ModelState]  # one per participant (consensus in pooled modes)
    records: list[RoundRecord]
    ledgers: dict[int, dict]  # participant id -> ledger dump (-1 = shared)

    @property
    def model(self) -> ModelState:
        return self.models[0]


def select_leader(round_index: int, leader_seed: int, participant_ids: list[int]) -> int:
    """Uniform leader draw, deterministic in (seed, round)."""
    if not participant_ids:
        raise ValueError("participant list is empty")
    gen = Prng(leader_seed).derive("leader", round_index).generator()
    return participant_ids[int(gen.integers(len(participant_ids)))]


# ---------------------------------------------------------------------------
# Internal round machinery
# ---------------------------------------------------------------------------

_BROADCAST = -1  # recipient id for messages delivered to every participant


def _secagg_session(cfg: ProtocolConfig, pids: list[int], length: int, round_index: int, tag: str):
    seed = Prng(cfg.seed).derive("secagg", tag, round_index).stream_id
    return SecAggSession(
        session_id=Prng(cfg.seed).derive("session-id", tag, round_index).stream_id & 0x7FFFFFFF,
        participant_ids=pids,
        vector_len=length,
        codec=FixedPointCodec(),
        seed=seed,
    )


def _sum_via_secagg(
    cfg: ProtocolConfig,
    pids: list[int],
    vectors: dict[int, np.ndarray],
    round_index: int,
    tag: str,
    kind: str,
    leader: int,
    log: MessageLog,
) -> np.ndarray:
    """Masked-share sum of one vector per participant, delivered to the leader.

    With use_secagg off (fl only), plaintext vectors are summed in fixed
    participant order instead.
    """
    length = len(next(iter(vectors.values())))
    if cfg.use_secagg:
        session = _secagg_session(cfg, pids, length, round_index, tag)
        shares = []
        for pid in pids:
            share = mask(session, pid, vectors[pid])
            log.send(leader, RoundMessage(kind, pid, round_index, share))
            shares.append(share)
        return aggregate(session, shares)
    total = np.zeros(length, dtype=np.float64)
    for pid in pids:
        log.send(leader, RoundMessage(kind, pid, round_index, vectors[pid]))
        total += vectors[pid]
    return total


def _local_contribution(
    model: ModelState,
    shard: DatasetShard,
    batch_idx: np.ndarray,
    aggregate_batch: int,
    clip_norm: float,
    noise_multiplier: float,
    noise_prng: Prng,
) -> tuple[np.ndarray, float]:
    """Clipped, noised local gradient sum plus the local loss sum."""
    if len(batch_idx) == 0:
        empty = np.zeros((0, model.arch.n_params))
        return (
            local_noise_and_sum(
                empty, 0, aggregate_batch, clip_norm, noise_multiplier, noise_prng
            ),
            0.0,
        )
    grads, losses = per_example_grads(
        model, shard.features[batch_idx], shard.labels[batch_idx]
    )
    clipped = clip(grads, clip_norm)
    noised = local_noise_and_sum(
        clipped, len(batch_idx), aggregate_batch, clip_norm, noise_multiplier, noise_prng
    )
    return noised, float(losses.sum())


def _pooled_round(
    model: ModelState,
    shards: list[DatasetShard],
    round_index: int,
    cfg: ProtocolConfig,
    sampling_rate: float,
    clip_norm: float,
    noise_multiplier: float,
    ledger: Optional[PrivacyLedger],
    log: MessageLog,
) -> tuple[ModelState, RoundRecord]:
    """Shared engine for decaph and fl rounds (fl: no clip, no noise)."""
    pids = [s.participant_id for s in shards]
    root = Prng(cfg.seed)

    leader = select_leader(round_index, cfg.leader_seed, pids)
    log.send(_BROADCAST, RoundMessage("LeaderAnnounce", leader, round_index, leader))

    batches = {
        pid: poisson_sample(
            shard.n_rows, sampling_rate, root.derive("sample", pid, round_index)
        )
        for pid, shard in zip(pids, shards)
    }
    size_vecs = {pid: np.array([float(len(batches[pid]))]) for pid in pids}
    agg_size = _sum_via_secagg(
        cfg, pids, size_vecs, round_index, "batch-sizes", "BatchSizeShare", leader, log
    )
    aggregate_batch = int(round(agg_size[0]))
    # the leader announces |B_t| so participants can calibrate their noise
    log.send(
        _BROADCAST,
        RoundMessage("BatchSizeShare", leader, round_index, float(aggregate_batch)),
    )

    if ledger is not None:
        ledger.step()
    epsilon = ledger.converted()[0] if ledger is not None else None

    if aggregate_batch == 0:
        # nobody sampled anything: skip the update, accounting already charged
        log.send(_BROADCAST, RoundMessage("ModelSync", leader, round_index, model.params))
        record = RoundRecord(
            round_index,
            leader,
            0,
            tuple(len(batches[pid]) for pid in pids),
            epsilon,
            math.nan,
            log.bytes_in_round(round_index),
        )
        return model, record

    contributions = {}
    loss_total = 0.0
    for pid, shard in zip(pids, shards):
        noised, loss_sum = _local_contribution(
            model,
            shard,
            batches[pid],
            aggregate_batch,
            clip_norm,
            noise_multiplier,
            root.derive("noise", pid, round_index),
        )
        contributions[pid] = noised
        loss_total += loss_sum

    grad_sum = _sum_via_secagg(
        cfg, pids, contributions, round_index, "gradients", "GradientShare", leader, log
    )
    new_model = apply_update(model, grad_sum / aggregate_batch)
    log.send(_BROADCAST, RoundMessage("ModelSync", leader, round_index, new_model.params))

    record = RoundRecord(
        round_index=round_index,
        leader_id=leader,
        aggregate_batch_size=aggregate_batch,
        batch_sizes=tuple(len(batches[pid]) for pid in pids),
        epsilon=epsilon,
        train_loss=loss_total / aggregate_batch,
        bytes_communicated=log.bytes_in_round(round_index),
    )
    return new_model, record


def run_decaph_round(
    model: ModelState,
    shards: list[DatasetShard],
    round_index: int,
    cfg: ProtocolConfig,
    ledger: PrivacyLedger,
    log: MessageLog,
) -> tuple[ModelState, RoundRecord]:
    """One full distributed-DP round (steps 1-7).

    sigma = 0 is the non-private diagnostic slice: the ledger reports +inf
    from the first step, so budget exhaustion is not used as a stop signal
    there (the run is bounded by its round limit instead).
    """
    if ledger.exhausted and cfg.dp.noise_multiplier > 0:
        raise StopIteration("privacy budget exhausted")
    dcfg = cfg.dp
    return _pooled_round(
        model,
        shards,
        round_index,
        cfg,
        dcfg.sampling_rate,
        dcfg.clip_norm,
        dcfg.noise_multiplier,
        ledger,
        log,
    )


def run_fl_round(
    model: ModelState,
    shards: list[DatasetShard],
    round_index: int,
    cfg: ProtocolConfig,
    log: MessageLog,
    sampling_rate: float,
) -> tuple[ModelState, RoundRecord]:
    """Identical pipeline with clipping and noising absent and no ledger."""
    return _pooled_round(
        model, shards, round_index, cfg, sampling_rate, _NO_CLIP, 0.0, None, log
    )


def run_local_dp_round(
    models: dict[int, ModelState],
    shards: list[DatasetShard],
    round_index: int,
    cfg: ProtocolConfig,
    ledgers: dict[int, PrivacyLedger],
    log: MessageLog,
) -> tuple[dict[int, ModelState], RoundRecord]:
    """Local-DP baseline round: local full-noise DP-SGD steps + FedAvg merge.

    Every active participant pays the full central noise (C*sigma)^2 on its
    own sum -- H participants add H times the aggregate-matched total -- and
    each ledger runs at its own local sampling rate, so small shards exhaust
    their budget in fewer rounds and drop out.
    """
    pids = [s.participant_id for s in shards]
    active = [pid for pid in pids if not ledgers[pid].exhausted]
    if not active:
        raise StopIteration("all local budgets exhausted")
    root = Prng(cfg.seed)
    dcfg = cfg.dp
    shard_by_pid = {s.participant_id: s for s in shards}
    local_batch = max(1, cfg.aggregate_batch_target // cfg.n_participants)

    updated = dict(models)
    batch_sizes = {pid: 0 for pid in pids}
    total_rows = sum(shard_by_pid[pid].n_rows for pid in active)
    merged = np.zeros_like(next(iter(models.values())).params)
    for pid in active:
        shard = shard_by_pid[pid]
        p_local = min(1.0, local_batch / shard.n_rows)
        batch = poisson_sample(shard.n_rows, p_local, root.derive("sample", pid, round_index))
        batch_sizes[pid] = len(batch)
        model = models[pid]
        if len(batch) > 0:
            noised, _ = _local_contribution(
                model,
                shard,
                batch,
                len(batch),  # aggregate = local: full (C*sigma)^2 variance
                dcfg.clip_norm,
                dcfg.noise_multiplier,
                root.derive("noise", pid, round_index),
            )
            model = apply_update(model, noised / len(batch))
        ledgers[pid].step()
        updated[pid] = model
        merged += (shard.n_rows / total_rows) * model.params

    # FedAvg merge of active models, broadcast to the active set
    for pid in active:
        updated[pid] = ModelState(
            merged.copy(),
            updated[pid].arch,
            updated[pid].l2_weight_decay,
            updated[pid].learning_rate,
        )
        log.send(pid, RoundMessage("ModelSync", _BROADCAST, round_index, merged))

    eps_all = [ledgers[pid].converted()[0] for pid in pids if ledgers[pid].steps]
    record = RoundRecord(
        round_index=round_index,
        leader_id=-1,
        aggregate_batch_size=sum(batch_sizes.values()),
        batch_sizes=tuple(batch_sizes[pid] for pid in pids),
        epsilon=max(eps_all) if eps_all else None,
        train_loss=math.nan,
        bytes_communicated=log.bytes_in_round(round_index),
    )
    return updated, record


def rounds_per_epoch(sampling_rate: float) -> int:
    """Poisson sampling has no epoch boundary; define one as ceil(1/p) rounds."""
    return max(1, math.ceil(1.0 / sampling_rate))


def train(
    cfg: ProtocolConfig,
    shards: list[DatasetShard],
    model0: ModelState,
    log: MessageLog | None = None,
) -> TrainResult:
    """Run the configured mode to its round limit or budget exhaustion.

    Pass a MessageLog to observe the protocol traffic (e.g. to audit that
    gradient shares are always masked).
    """
    if len(shards) != cfg.n_participants:
        raise ValueError(
            f"config expects {cfg.n_participants} participants, got {len(shards)} shards"
        )
    total_rows = sum(s.n_rows for s in shards)
    sampling_rate = min(1.0, cfg.aggregate_batch_target / total_rows)
    dcfg = cfg.dp
    if dcfg is not None and cfg.mode == "decaph" and dcfg.sampling_rate != sampling_rate:
        # preparation phase: p = B / sum of shard sizes
        dcfg = replace(dcfg, sampling_rate=sampling_rate)
        cfg = replace(cfg, dp=dcfg)

    max_rounds = cfg.max_rounds
    if max_rounds is None:
        max_rounds = cfg.max_epochs * rounds_per_epoch(sampling_rate)

    if log is None:
        log = MessageLog()
    records: list[RoundRecord] = []
    pids = [s.participant_id for s in shards]

    if cfg.mode in ("decaph", "fl"):
        ledger = PrivacyLedger(dcfg) if cfg.mode == "decaph" else None
        model = model0
        for t in range(max_rounds):
            if ledger is not None and ledger.exhausted and dcfg.noise_multiplier > 0:
                break
            if cfg.mode == "decaph":
                model, rec = run_decaph_round(model, shards, t, cfg, ledger, log)
            else:
                model, rec = run_fl_round(model, shards, t, cfg, log, sampling_rate)
            records.append(rec)
        ledgers = {-1: ledger.dump()} if ledger is not None else {}
        return TrainResult(models=[model] * len(shards), records=records, ledgers=ledgers)

    # local_dp
    if dcfg is None:
        raise ValueError("local_dp requires a DP configuration")
    local_batch = max(1, cfg.aggregate_batch_target // cfg.n_participants)
    ledgers = {}
    for s in shards:
        p_local = min(1.0, local_batch / s.n_rows)
        ledgers[s.participant_id] = PrivacyLedger(
            DpConfig(
                clip_norm=dcfg.clip_norm,
                noise_multiplier=dcfg.noise_multiplier,
                target_epsilon=dcfg.target_epsilon,
                target_delta=dcfg.target_delta,
                sampling_rate=p_local,
                alpha_grid=dcfg.alpha_grid,
            )
        )
    models = {pid: model0 for pid in pids}
    for t in range(max_rounds):
        if all(ledgers[pid].exhausted for pid in pids):
            break
        models, rec = run_local_dp_round(models, shards, t, cfg, ledgers, log)
        records.append(rec)
    return TrainResult(
        models=[models[pid] for pid in pids],
        records=records,
        ledgers={pid: ledgers[pid].dump() for pid in pids},
    )
