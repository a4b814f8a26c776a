"""Command-line front end: JSON-configured, reproducible experiment runs.

Flags only select the subcommand, config path, and output directory; every
knob lives in the config file so runs are diffable and rerunnable. Each run
echoes its input config verbatim plus the fully resolved effective config
into the output directory. Exit codes: 0 success, 1 config error,
2 runtime/numeric error.

Set CMM_OUTPUT_ROOT to resolve relative output directories under a common
root. Relative paths inside config files resolve against the config file's
directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import encoder, evaluation, gradcheck, synthdata
from .errors import CmmError, ConfigError, GenerationError
from .loss import GAMMA_GRID, M_GRID, LossConfig
from .schema import load_dataset_jsonl, save_dataset_jsonl

TRACE_HEADER = ("epoch", "train_loss", "dev_f1", "dev_ign_f1", "dev_positives")
GRID_HEADER = ("kind", "gamma", "m", "seed", "dev_f1", "dev_ign_f1", "dev_positives", "best")
OUTPUT_ROOT_ENV = "CMM_OUTPUT_ROOT"
DEFAULT_COMPARE_KINDS = ("cmm", "plain_margin", "atl_reference")


def _load_config(path: Path) -> tuple[dict[str, Any], bytes]:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top-level config must be a JSON object")
    return obj, raw


def _resolve_path(value: Any, config_dir: Path, field: str) -> Path:
    if not isinstance(value, str) or not value:
        raise ConfigError(f"config field {field!r} must be a non-empty path string")
    p = Path(value)
    return p if p.is_absolute() else config_dir / p


def _require(config: dict[str, Any], field: str) -> Any:
    if field not in config:
        raise ConfigError(f"missing required config field {field!r}")
    return config[field]


def _build_gen_config(obj: dict[str, Any]) -> synthdata.GenConfig:
    obj = dict(obj)
    preset = obj.pop("preset", None)
    try:
        if preset is not None:
            return synthdata.preset_config(preset, **obj)
        return synthdata.GenConfig(**obj)
    except TypeError as exc:
        raise ConfigError(f"bad generator config: {exc}") from exc
    except GenerationError as exc:
        raise ConfigError(f"bad generator config: {exc}") from exc


def _build_loss_config(obj: Any) -> LossConfig:
    if not isinstance(obj, dict):
        raise ConfigError("'loss' must be a JSON object")
    try:
        return LossConfig(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad loss config: {exc}") from exc


def _build_train_config(obj: Any) -> encoder.TrainConfig:
    if not isinstance(obj, dict):
        raise ConfigError("'train' must be a JSON object")
    obj = dict(obj)
    loss_cfg = _build_loss_config(obj.pop("loss", {}))
    try:
        return encoder.TrainConfig(loss=loss_cfg, **obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def _load_dataset(path: Path, field: str):
    if not path.is_file():
        raise ConfigError(f"config field {field!r}: no such file {path}")
    return load_dataset_jsonl(str(path))


def _write_json(path: Path, obj: dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def _write_effective(outdir: Path, effective: dict[str, Any]) -> None:
    _write_json(outdir / "effective_config.json", {"format": "cmm-config/1", **effective})


def _cfg_as_dict(train_cfg: encoder.TrainConfig) -> dict[str, Any]:
    d = {k: getattr(train_cfg, k) for k in (
        "epochs", "seed", "learning_rate", "beta1", "beta2", "epsilon", "weight_decay",
        "eval_every", "architecture", "hidden_dim", "accumulate_documents")}
    d["loss"] = {"kind": train_cfg.loss.kind, "gamma": train_cfg.loss.gamma,
                 "m": train_cfg.loss.m, "aggregation": train_cfg.loss.aggregation,
                 "plugin": train_cfg.loss.plugin}
    return d


def _write_trace_csv(path: Path, trace: Sequence[encoder.TraceRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for rec in trace:
            writer.writerow([rec.epoch, float(rec.train_loss), float(rec.dev_f1),
                             float(rec.dev_ign_f1), rec.dev_positives])


# --- subcommand handlers ---------------------------------------------------

def cmd_generate(config: dict[str, Any], config_dir: Path, outdir: Path) -> int:
    gen_cfg = _build_gen_config(config)
    _write_effective(outdir, {"generate": gen_cfg.to_dict()})
    dataset = synthdata.generate(gen_cfg)
    if gen_cfg.false_negative_rate > 0.0:
        dataset = synthdata.inject_false_negatives(dataset, gen_cfg.false_negative_rate,
                                                   seed=gen_cfg.seed)
    save_dataset_jsonl(dataset, str(outdir / "dataset.jsonl"))
    report = synthdata.distribution_report(dataset)
    _write_json(outdir / "distribution_report.json",
                {"format": "cmm-distribution/1", **report.to_dict()})
    return 0


def cmd_train(config: dict[str, Any], config_dir: Path, outdir: Path) -> int:
    train_ds = _load_dataset(_resolve_path(_require(config, "dataset"), config_dir, "dataset"),
                             "dataset")
    dev_ds = _load_dataset(_resolve_path(_require(config, "dev"), config_dir, "dev"), "dev")
    base = _build_train_config(_require(config, "train"))
    arms = config.get("arms")
    if arms is None:
        arms = [{"name": base.loss.kind, "loss": None}]
    if not isinstance(arms, list) or not arms:
        raise ConfigError("'arms' must be a non-empty list")
    resolved_arms: list[dict[str, Any]] = []
    traces: dict[str, list[encoder.TraceRecord]] = {}
    for arm in arms:
        if not isinstance(arm, dict):
            raise ConfigError("each arm must be a JSON object")
        loss_cfg = base.loss if arm.get("loss") is None else _build_loss_config(arm["loss"])
        name = arm.get("name", loss_cfg.kind)
        cfg = replace(base, loss=loss_cfg)
        resolved_arms.append({"name": name, "train": _cfg_as_dict(cfg)})
        params, trace = encoder.train(train_ds, dev_ds, cfg)
        traces[name] = trace
        encoder.save_checkpoint(str(outdir / f"{name}.checkpoint.json"), params, None,
                                config=_cfg_as_dict(cfg))
        _write_trace_csv(outdir / f"{name}.trace.csv", trace)
    evaluation.write_positive_count_csv(evaluation.positive_count_trace(traces),
                                        str(outdir / "positives.csv"))
    _write_effective(outdir, {"train": {"arms": resolved_arms}})
    return 0


@dataclass(frozen=True)
class GridRow:
    kind: str
    gamma: float | None
    m: float | None
    seed: int
    dev_f1: float
    dev_ign_f1: float
    dev_positives: int


def run_compare_grid(train_ds, dev_ds, base: encoder.TrainConfig,
                     kinds: Sequence[str] = DEFAULT_COMPARE_KINDS,
                     gammas: Sequence[float] = GAMMA_GRID,
                     ms: Sequence[float] = M_GRID,
                     seeds: Sequence[int] = (0,)) -> list[GridRow]:
    """Train one arm per (kind, gamma, m, seed) tuple; cmm sweeps the grid,
    other kinds run once per seed."""
    rows: list[GridRow] = []
    for kind in kinds:
        tuples = ([(g, m) for g in gammas for m in ms] if kind == "cmm"
                  else [(None, None)])
        for gamma, m in tuples:
            for seed in seeds:
                if gamma is None:
                    loss_cfg = replace(base.loss, kind=kind)
                else:
                    loss_cfg = replace(base.loss, kind=kind, gamma=float(gamma), m=float(m))
                cfg = replace(base, loss=loss_cfg, seed=int(seed))
                _, trace = encoder.train(train_ds, dev_ds, cfg)
                final = trace[-1]
                rows.append(GridRow(kind=kind, gamma=gamma, m=m, seed=int(seed),
                                    dev_f1=final.dev_f1, dev_ign_f1=final.dev_ign_f1,
                                    dev_positives=final.dev_positives))
    return rows


def cmd_compare(config: dict[str, Any], config_dir: Path, outdir: Path) -> int:
    train_ds = _load_dataset(_resolve_path(_require(config, "dataset"), config_dir, "dataset"),
                             "dataset")
    dev_ds = _load_dataset(_resolve_path(_require(config, "dev"), config_dir, "dev"), "dev")
    base = _build_train_config(_require(config, "train"))
    kinds = tuple(config.get("kinds", DEFAULT_COMPARE_KINDS))
    gammas = tuple(config.get("gammas", GAMMA_GRID))
    ms = tuple(config.get("ms", M_GRID))
    seeds = tuple(config.get("seeds", [base.seed]))
    _write_effective(outdir, {"compare": {"train": _cfg_as_dict(base), "kinds": list(kinds),
                                          "gammas": list(gammas), "ms": list(ms),
                                          "seeds": [int(s) for s in seeds]}})
    rows = run_compare_grid(train_ds, dev_ds, base, kinds, gammas, ms, seeds)
    best_idx = max(range(len(rows)), key=lambda i: rows[i].dev_f1) if rows else -1
    with open(outdir / "grid.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GRID_HEADER)
        for i, row in enumerate(rows):
            writer.writerow([
                row.kind,
                "" if row.gamma is None else float(row.gamma),
                "" if row.m is None else float(row.m),
                row.seed, float(row.dev_f1), float(row.dev_ign_f1), row.dev_positives,
                1 if i == best_idx else 0,
            ])
    return 0


def cmd_gradcheck(config: dict[str, Any], config_dir: Path, outdir: Path) -> int:
    allowed = {"trials", "tolerance", "seed", "gammas", "ms", "logit_range",
               "relation_counts", "step"}
    unknown = set(config) - allowed
    if unknown:
        raise ConfigError(f"unknown gradcheck config fields: {sorted(unknown)}")
    kwargs = dict(config)
    if "logit_range" in kwargs:
        kwargs["logit_range"] = tuple(kwargs["logit_range"])
    try:
        report = gradcheck.check_gradients(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad gradcheck config: {exc}") from exc
    _write_effective(outdir, {"gradcheck": {"trials": report.trials,
                                            "tolerance": report.tolerance,
                                            "seed": report.seed, "step": report.step}})
    _write_json(outdir / "gradcheck.json", {"format": "cmm-gradcheck/1", **report.to_dict()})
    return 0 if report.ok else 2


def cmd_curves(config: dict[str, Any], config_dir: Path, outdir: Path) -> int:
    allowed = {"gammas", "d_min", "d_max", "d_step", "m"}
    unknown = set(config) - allowed
    if unknown:
        raise ConfigError(f"unknown curves config fields: {sorted(unknown)}")
    gammas = tuple(config.get("gammas", GAMMA_GRID))
    grid = evaluation.default_d_grid(config.get("d_min", -5.0), config.get("d_max", 5.0),
                                     config.get("d_step", 0.05))
    try:
        rows = evaluation.curve_export(gammas, grid, m=config.get("m", 0.2))
    except ValueError as exc:
        raise ConfigError(f"bad curves config: {exc}") from exc
    _write_effective(outdir, {"curves": {"gammas": [float(g) for g in gammas],
                                         "d_points": len(grid),
                                         "m": config.get("m", 0.2)}})
    evaluation.write_curve_csv(rows, str(outdir / "curves.csv"))
    return 0


def cmd_eval(config: dict[str, Any], config_dir: Path, outdir: Path) -> int:
    dataset = _load_dataset(_resolve_path(_require(config, "dataset"), config_dir, "dataset"),
                            "dataset")
    ckpt_path = _resolve_path(_require(config, "checkpoint"), config_dir, "checkpoint")
    if not ckpt_path.is_file():
        raise ConfigError(f"config field 'checkpoint': no such file {ckpt_path}")
    gold_source = config.get("gold", "labels")
    if gold_source not in ("labels", "true_labels"):
        raise ConfigError(f"'gold' must be 'labels' or 'true_labels', got {gold_source!r}")
    params, _, _ = encoder.load_checkpoint(str(ckpt_path))
    features = np.stack([ex.features for ex in dataset.examples])
    logits = encoder.encode_batch(params, features)
    predictions = {ex.pair_id: evaluation.decode(row)
                   for ex, row in zip(dataset.examples, logits)}
    gold = evaluation.gold_from_dataset(dataset, source=gold_source)
    seen = evaluation.seen_from_dataset(dataset)
    _write_effective(outdir, {"eval": {"gold": gold_source}})
    micro = evaluation.micro_f1(predictions, gold)
    ign = evaluation.ign_f1(predictions, gold, seen)
    record = micro.to_dict()
    record["ign_f1"] = ign.f1
    _write_json(outdir / "metrics.json",
                {"format": "cmm-metrics/1", "gold": gold_source, "metrics": record})
    return 0


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "curves": cmd_curves,
    "eval": cmd_eval,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmm",
        description="Concentrated margin maximization experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name, help=f"run the {name} step from a JSON config")
        p.add_argument("config", help="path to the JSON config file")
        p.add_argument("-o", "--out", required=True,
                       help=f"output directory (relative paths resolve under "
                            f"${OUTPUT_ROOT_ENV} when set)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    outdir = Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not outdir.is_absolute():
        outdir = Path(root) / outdir
    config_path = Path(args.config)
    try:
        config, raw = _load_config(config_path)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "config.json").write_bytes(raw)
        code = HANDLERS[args.command](config, config_path.resolve().parent, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except CmmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code


if __name__ == "__main__":
    sys.exit(main())
