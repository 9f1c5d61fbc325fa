"""Experiment runner.

Subcommands:

* ``gen-data``  -- materialize a synthetic cross-silo dataset as CSV shards
* ``train``     -- per-fold, per-seed training across the requested modes
                   (decaph / fl / local_dp / solo) with metrics, round logs,
                   ledgers, and final-fold checkpoints
* ``audit``     -- online LiRA membership audit of the configured modes
* ``commcost``  -- communication-cost table across model sizes and cohort
                   sizes, with and without secure aggregation

Configuration is one declarative JSON file (see ``example_config`` in this
module or the README schema); a handful of flags override the common knobs.
Every output file starts with a provenance line carrying the hash of the
resolved configuration and the seeds, and identical config+seed reruns
produce byte-identical outputs. ``DECAPH_WORKERS`` sets the worker-pool size
for independent (mode, seed, fold) tasks.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import audit as audit_mod
from .data import (
    DatasetShard,
    SyntheticSpec,
    apply_normalization,
    generate,
    kfold,
    load_shard_csv,
    normalization_stats,
    replicate_minority,
    save_shard_csv,
)
from .dp import DpConfig, default_alpha_grid, default_delta
from .metrics import auroc, binary_metrics, multiclass_metrics, youden_threshold
from .models import Arch, init_model, predict, save_model
from .numerics import Prng
from .protocol import MODES, ProtocolConfig, TrainResult, train
from .secagg import SecAggSession, comm_cost

ALL_MODES = MODES + ("solo",)

example_config = {
    "data": {
        "synthetic": {
            "sizes": [400, 200, 100],
            "n_features": 10,
            "task": "binary",
            "n_classes": 2,
            "heterogeneity": 0.3,
            "seed": 7,
        },
        "replicate": None,
    },
    "model": {
        "hidden": [],
        "head": None,
        "learning_rate": 0.15,
        "l2_weight_decay": 0.0002,
    },
    "protocol": {
        "aggregate_batch_target": 64,
        "max_epochs": 5,
        "max_rounds": None,
        "leader_seed": 0,
        "use_secagg": True,
    },
    "dp": {
        "clip_norm": 0.5,
        "noise_multiplier": 1.0,
        "target_epsilon": 2.0,
        "target_delta": None,
        "alpha_grid": None,
    },
    "modes": ["fl", "decaph"],
    "folds": 5,
    "seeds": [1],
    "out": "results",
    "audit": {"n_shadow": 32, "modes": ["fl", "decaph"], "variance": "per_example"},
    "commcost": {"param_counts": [437, 166771], "n_participants": [8], "rounds": 1},
}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _load_config(path: str) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "modes", None):
        cfg["modes"] = [m.strip() for m in args.modes.split(",") if m.strip()]
    if getattr(args, "seeds", None):
        cfg["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "folds", None) is not None:
        cfg["folds"] = args.folds
    if getattr(args, "out", None):
        cfg["out"] = args.out
    dp = cfg.setdefault("dp", {})
    if getattr(args, "epsilon", None) is not None:
        dp["target_epsilon"] = args.epsilon
    if getattr(args, "sigma", None) is not None:
        dp["noise_multiplier"] = args.sigma
    if getattr(args, "clip", None) is not None:
        dp["clip_norm"] = args.clip
    return cfg


def _config_hash(cfg: dict) -> str:
    # the destination directory is not part of the experiment's identity
    canon = json.dumps(
        {k: v for k, v in cfg.items() if k != "out"},
        sort_keys=True, separators=(",", ":"), default=str,
    )
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _load_shards(cfg: dict) -> tuple[list[DatasetShard], SyntheticSpec | None]:
    data = cfg.get("data") or {}
    if data.get("synthetic"):
        raw = dict(data["synthetic"])
        raw["sizes"] = tuple(raw["sizes"])
        if raw.get("class_balance") is not None:
            raw["class_balance"] = tuple(tuple(row) for row in raw["class_balance"])
        try:
            spec = SyntheticSpec(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.synthetic: {exc}") from None
        return generate(spec), spec
    if data.get("csv"):
        shards = []
        for pid, path in enumerate(data["csv"]):
            try:
                shards.append(load_shard_csv(path, participant_id=pid))
            except (OSError, ValueError) as exc:
                raise ConfigError(str(exc)) from None
        return shards, None
    raise ConfigError("config needs data.synthetic or data.csv")


def _task_of(cfg: dict, shards: list[DatasetShard]) -> tuple[str, int]:
    synth = (cfg.get("data") or {}).get("synthetic")
    if synth:
        return synth.get("task", "binary"), synth.get("n_classes", 2)
    if shards[0].labels.ndim == 2:
        return "multilabel", shards[0].labels.shape[1]
    n_classes = int(max(s.labels.max() for s in shards)) + 1
    return ("binary", 2) if n_classes <= 2 else ("multiclass", n_classes)


def _build_arch(cfg: dict, task: str, n_classes: int, n_features: int) -> tuple[Arch, float, float]:
    model = cfg.get("model") or {}
    head = model.get("head")
    if head is None:
        head = {"binary": "sigmoid_bce", "multiclass": "softmax_ce", "multilabel": "multilabel_bce"}[task]
    n_out = 1 if head == "sigmoid_bce" else n_classes
    widths = (n_features, *[int(w) for w in model.get("hidden", [])], n_out)
    try:
        arch = Arch(widths=widths, head=head)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    return arch, float(model.get("learning_rate", 0.1)), float(model.get("l2_weight_decay", 0.0))


def _build_dp(cfg: dict, total_rows: int) -> DpConfig:
    dp = cfg.get("dp") or {}
    delta = dp.get("target_delta")
    if delta is None:
        delta = default_delta(total_rows)
    grid = dp.get("alpha_grid")
    try:
        return DpConfig(
            clip_norm=float(dp.get("clip_norm", 1.0)),
            noise_multiplier=float(dp.get("noise_multiplier", 1.0)),
            target_epsilon=float(dp.get("target_epsilon", 2.0)),
            target_delta=float(delta),
            alpha_grid=tuple(float(a) for a in grid) if grid else default_alpha_grid(),
        )
    except ValueError as exc:
        raise ConfigError(f"dp: {exc}") from None


def _build_protocol(cfg: dict, mode: str, n_participants: int, dp: DpConfig | None, seed: int) -> ProtocolConfig:
    proto = cfg.get("protocol") or {}
    try:
        return ProtocolConfig(
            mode=mode,
            n_participants=n_participants,
            aggregate_batch_target=int(proto.get("aggregate_batch_target", 64)),
            dp=dp if mode in ("decaph", "local_dp") else None,
            max_rounds=proto.get("max_rounds"),
            max_epochs=proto.get("max_epochs"),
            leader_seed=int(proto.get("leader_seed", 0)) + seed,
            seed=seed,
            use_secagg=bool(proto.get("use_secagg", True)),
        )
    except ValueError as exc:
        raise ConfigError(f"protocol: {exc}") from None


# ---------------------------------------------------------------------------
# Deterministic output helpers
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, provenance: str, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [provenance, ",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)

    def _clean(obj):
        if isinstance(obj, float) and math.isnan(obj):
            return None
        if isinstance(obj, dict):
            return {k: _clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [_clean(v) for v in obj]
        return obj

    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _prepare_fold(cfg: dict, shards, seed: int, fold: int, folds: int):
    """Split, replicate the minority into the train shards, normalize globally."""
    train_shards, test_shards = kfold(shards, folds, fold, seed=seed)
    repl = (cfg.get("data") or {}).get("replicate")
    if repl:
        train_shards = [
            replicate_minority(s, int(repl["class_id"]), int(repl["factor"]), seed=seed)
            for s in train_shards
        ]
    mean, std = normalization_stats(train_shards, seed=seed)
    train_shards = [apply_normalization(s, mean, std) for s in train_shards]
    test_shards = [apply_normalization(s, mean, std) for s in test_shards]
    return train_shards, test_shards


def _evaluate(model, test_shards, task: str, n_classes: int) -> dict:
    features = np.concatenate([s.features for s in test_shards])
    labels = np.concatenate([s.labels for s in test_shards])
    scores = predict(model, features)
    out = {k: math.nan for k in (
        "auroc", "ppv", "npv", "macro_f1", "weighted_f1",
        "median_f1", "weighted_precision", "weighted_recall", "youden_threshold",
    )}
    if task == "binary":
        s = scores[:, 0] if scores.shape[1] == 1 else scores[:, 1]
        out["auroc"] = auroc(s, labels)
        thr = youden_threshold(s, labels)
        bm = binary_metrics(s, labels, thr)
        out.update(
            ppv=bm.ppv, npv=bm.npv, macro_f1=bm.macro_f1,
            weighted_f1=bm.weighted_f1, youden_threshold=thr,
        )
    elif task == "multiclass":
        preds = np.argmax(scores, axis=1)
        mm = multiclass_metrics(preds, labels, n_classes)
        out.update(
            median_f1=mm.median_f1,
            weighted_precision=mm.weighted_precision,
            weighted_recall=mm.weighted_recall,
        )
    else:  # multilabel: mean per-label AUROC over labels present in the test set
        per_label = []
        for j in range(n_classes):
            col = labels[:, j]
            if 0 < col.sum() < len(col):
                per_label.append(auroc(scores[:, j], col))
        out["auroc"] = float(np.mean(per_label)) if per_label else math.nan
    return out


_METRIC_COLS = [
    "auroc", "ppv", "npv", "macro_f1", "weighted_f1",
    "median_f1", "weighted_precision", "weighted_recall", "youden_threshold",
]


def _run_one_training(cfg, shards, task, n_classes, mode, seed, fold, folds):
    """One (mode, seed, fold) unit of work; returns metric rows + artifacts."""
    train_shards, test_shards = _prepare_fold(cfg, shards, seed, fold, folds)
    arch, lr, wd = _build_arch(cfg, task, n_classes, train_shards[0].n_features)
    total_rows = sum(s.n_rows for s in train_shards)
    dp = _build_dp(cfg, total_rows) if mode in ("decaph", "local_dp") else None
    model0 = init_model(arch, Prng(seed), lr, wd)

    rows, artifacts = [], []
    if mode == "solo":
        proto = cfg.get("protocol") or {}
        target = int(proto.get("aggregate_batch_target", 64))
        p_global = min(1.0, target / total_rows)
        for shard in train_shards:
            solo_cfg = _build_protocol(cfg, "fl", 1, None, seed)
            # match the pooled sampling rate on this shard alone
            solo_cfg = replace(
                solo_cfg, aggregate_batch_target=max(1, round(p_global * shard.n_rows))
            )
            result = train(solo_cfg, [shard], model0)
            m = _evaluate(result.model, test_shards, task, n_classes)
            rows.append([mode, shard.participant_id, seed, fold, len(result.records), None]
                        + [m[c] for c in _METRIC_COLS])
    else:
        pcfg = _build_protocol(cfg, mode, len(train_shards), dp, seed)
        result = train(pcfg, train_shards, model0)
        m = _evaluate(result.model, test_shards, task, n_classes)
        eps = None
        if result.ledgers:
            eps = max(d.get("epsilon", 0.0) for d in result.ledgers.values())
        rows.append([mode, -1, seed, fold, len(result.records), eps]
                    + [m[c] for c in _METRIC_COLS])
        artifacts.append(("result", mode, seed, fold, result))
    return rows, artifacts


def cmd_train(cfg: dict) -> int:
    out_dir = Path(cfg.get("out", "results"))
    shards, _ = _load_shards(cfg)
    task, n_classes = _task_of(cfg, shards)
    modes = cfg.get("modes", ["fl", "decaph"])
    bad = [m for m in modes if m not in ALL_MODES]
    if bad:
        raise ConfigError(f"unknown mode(s) {bad}; valid: {ALL_MODES}")
    seeds = [int(s) for s in cfg.get("seeds", [1])]
    folds = int(cfg.get("folds", 5))
    chash = _config_hash(cfg)
    provenance = f"# config_hash={chash} seeds={','.join(str(s) for s in seeds)}"

    tasks = [(mode, seed, fold) for mode in modes for seed in seeds for fold in range(folds)]
    workers = max(1, int(os.environ.get("DECAPH_WORKERS", "1")))

    def work(key):
        mode, seed, fold = key
        return key, _run_one_training(cfg, shards, task, n_classes, mode, seed, fold, folds)

    results = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for key, value in pool.map(work, tasks):
                results[key] = value
    else:
        for key in tasks:
            results[key] = work(key)[1]

    metric_rows = []
    for key in sorted(results):
        rows, artifacts = results[key]
        metric_rows.extend(rows)
        for kind, mode, seed, fold, result in artifacts:
            stem = out_dir / f"{mode}_seed{seed}_fold{fold}"
            _write_round_log(stem.with_name(stem.name + "_rounds.csv"), provenance, result)
            if result.ledgers:
                _write_json(
                    stem.with_name(stem.name + "_ledger.json"),
                    {"config_hash": chash, "seed": seed, "ledgers":
                     {str(k): v for k, v in result.ledgers.items()}},
                )
            if fold == folds - 1:
                save_model(result.model, stem.with_name(stem.name + "_model"))

    header = ["mode", "participant", "seed", "fold", "rounds", "epsilon"] + _METRIC_COLS
    _write_csv(out_dir / "metrics.csv", provenance, header, metric_rows)
    resolved = dict(cfg)
    resolved["config_hash"] = chash
    _write_json(out_dir / "config.resolved.json", resolved)
    print(f"wrote {out_dir / 'metrics.csv'} ({len(metric_rows)} rows)")
    return 0


def _write_round_log(path: Path, provenance: str, result: TrainResult) -> None:
    header = ["round", "leader", "aggregate_batch", "batch_sizes", "epsilon", "train_loss", "bytes"]
    rows = [
        [
            r.round_index,
            r.leader_id,
            r.aggregate_batch_size,
            ";".join(str(b) for b in r.batch_sizes),
            r.epsilon,
            r.train_loss,
            r.bytes_communicated,
        ]
        for r in result.records
    ]
    _write_csv(path, provenance, header, rows)


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


def cmd_audit(cfg: dict) -> int:
    out_dir = Path(cfg.get("out", "results"))
    shards, _ = _load_shards(cfg)
    task, n_classes = _task_of(cfg, shards)
    acfg = cfg.get("audit") or {}
    n_shadow = int(acfg.get("n_shadow", 32))
    if n_shadow < 4 or n_shadow % 2:
        raise ConfigError(f"audit.n_shadow must be an even number >= 4, got {n_shadow}")
    modes = acfg.get("modes", ["fl", "decaph"])
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ConfigError(f"audit modes {bad} not in {MODES}")
    variance = acfg.get("variance", "per_example")
    seeds = [int(s) for s in cfg.get("seeds", [1])]
    chash = _config_hash(cfg)
    provenance = f"# config_hash={chash} seeds={','.join(str(s) for s in seeds)}"

    # audit trains on member halves; normalize once on the full pool
    mean, std = normalization_stats(shards, seed=0)
    shards = [apply_normalization(s, mean, std) for s in shards]
    arch, lr, wd = _build_arch(cfg, task, n_classes, shards[0].n_features)

    report = {"config_hash": chash, "n_shadow": n_shadow, "modes": {}}
    score_rows = []
    roc_rows = []
    for mode in modes:
        dp = _build_dp(cfg, sum(s.n_rows for s in shards) // 2) if mode != "fl" else None
        per_seed = {}
        for seed in seeds:
            trainer = _build_protocol(cfg, mode, len(shards), dp, seed)
            ref = init_model(arch, Prng(seed), lr, wd)
            rep = audit_mod.run_lira_audit(
                shards, trainer, ref, n_shadow=n_shadow, seed=seed, variance=variance
            )
            per_seed[str(seed)] = {
                "auroc": rep.auroc,
                "tpr_at_fpr": {repr(k): v for k, v in rep.tpr_at_fpr.items()},
            }
            for s in rep.scores:
                score_rows.append([mode, seed, s.example_id, s.lira_statistic, int(s.is_member)])
            fpr, tpr = rep.roc_points
            roc_rows += [[mode, seed, float(f), float(t)] for f, t in zip(fpr, tpr)]
        aurocs = [v["auroc"] for v in per_seed.values()]
        report["modes"][mode] = {"per_seed": per_seed, "mean_auroc": float(np.mean(aurocs))}

    _write_json(out_dir / "attack_report.json", report)
    _write_csv(out_dir / "attack_scores.csv", provenance,
               ["mode", "seed", "example_id", "lira_statistic", "is_member"], score_rows)
    _write_csv(out_dir / "attack_roc.csv", provenance,
               ["mode", "seed", "fpr", "tpr"], roc_rows)
    print(f"wrote {out_dir / 'attack_report.json'}")
    return 0


# ---------------------------------------------------------------------------
# commcost
# ---------------------------------------------------------------------------


def cmd_commcost(cfg: dict) -> int:
    out_dir = Path(cfg.get("out", "results"))
    ccfg = cfg.get("commcost") or {}
    param_counts = [int(p) for p in ccfg.get("param_counts", [437])]
    cohort_sizes = [int(h) for h in ccfg.get("n_participants", [8])]
    rounds = int(ccfg.get("rounds", 1))
    chash = _config_hash(cfg)
    rows = []
    for n_params in param_counts:
        for h in cohort_sizes:
            session = SecAggSession(0, list(range(h)), n_params)
            with_sa = comm_cost(session, with_secagg=True)
            without = comm_cost(session, with_secagg=False)
            rows.append([
                n_params, h, rounds,
                with_sa.participant_bytes * rounds, with_sa.aggregator_bytes * rounds,
                without.participant_bytes * rounds, without.aggregator_bytes * rounds,
            ])
    header = ["n_params", "n_participants", "rounds",
              "with_secagg_participant_bytes", "with_secagg_aggregator_bytes",
              "without_secagg_participant_bytes", "without_secagg_aggregator_bytes"]
    _write_csv(out_dir / "commcost.csv", f"# config_hash={chash} seeds=", header, rows)
    print(f"wrote {out_dir / 'commcost.csv'}")
    return 0


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> int:
    out_dir = Path(cfg.get("out", "results"))
    shards, spec = _load_shards(cfg)
    if spec is None:
        raise ConfigError("gen-data requires data.synthetic")
    out_dir.mkdir(parents=True, exist_ok=True)
    for shard in shards:
        save_shard_csv(shard, out_dir / f"shard_{shard.participant_id}.csv")
    _write_json(out_dir / "dataset.json", {
        "config_hash": _config_hash(cfg),
        "sizes": list(spec.sizes),
        "n_features": spec.n_features,
        "task": spec.task,
        "n_classes": spec.n_classes,
        "heterogeneity": spec.heterogeneity,
        "seed": spec.seed,
    })
    print(f"wrote {len(shards)} shard CSVs to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decaph", description="private collaborative training simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "audit", "commcost", "gen-data"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--modes", help="comma-separated mode override")
        p.add_argument("--seeds", help="comma-separated seed override")
        p.add_argument("--folds", type=int, help="fold-count override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--epsilon", type=float, help="dp.target_epsilon override")
        p.add_argument("--sigma", type=float, help="dp.noise_multiplier override")
        p.add_argument("--clip", type=float, help="dp.clip_norm override")
        p.add_argument(
            "--deterministic", action="store_true",
            help="force the single-threaded scheduler (ignore DECAPH_WORKERS)",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(_load_config(args.config), args)
        if args.deterministic:
            os.environ["DECAPH_WORKERS"] = "1"
        handler = {
            "train": cmd_train,
            "audit": cmd_audit,
            "commcost": cmd_commcost,
            "gen-data": cmd_gen_data,
        }[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
