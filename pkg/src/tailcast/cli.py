"""Command-line front end tying the pipeline together.

Subcommands: ``synth | train | finetune | evaluate | export-embeddings``.
A single JSON config drives everything; every default mirrors the
reference protocol (72-hour look-back, 12-step horizon, 95th percentile,
70/15/15 split, widths 128..16, learning rate 1e-4, batch 500, patience
50, L2 1e-6), so a near-empty config runs the full shape of the protocol.

Outputs land in a run directory named by a content hash of the resolved
config, which makes reruns idempotent and seed sweeps collision-free.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluate, finetune, mlp, reweight, synth, train
from .errors import ConfigError, DataError, NumericError, TailcastError

DEFAULT_CONFIG: dict = {
    "data": {
        "source": "synth",
        "csv": {
            "path": None,
            "timestamp_column": "timestamp",
            "feature_columns": [],
            "target_columns": [],
        },
        "synth": {
            "length": 20000,
            "ar_coeff": 0.8,
            "noise_scale": 0.1,
            "spike_prob": 0.01,
            "spike_scale": 2.0,
            "spike_shape": 0.2,
            "spike_duration": 3,
            "spike_lead": 4,
            "n_covariates": 2,
            "covariate_spikes": False,
            "initial_value": 0.0,
            "seed": 0,
        },
    },
    "window": {"lookback": 72, "horizon": 12},
    "extreme": {"mode": "target", "percentile": 95.0},
    "split": {"fractions": [0.70, 0.15, 0.15]},
    "model": {
        "hidden_widths": list(mlp.DEFAULT_HIDDEN_WIDTHS),
        "dropout_rate": mlp.DEFAULT_DROPOUT,
    },
    "train": {
        "strategy": "unweighted",
        "learning_rate": 1e-4,
        "batch_size": 500,
        "eval_batch_size": 500,
        "max_epochs": 1000,
        "patience": 50,
        "l2": 1e-6,
        "seed": 0,
        "training_subset": "both",
    },
    "reweight": {"bins": 20, "normal_weight": 1.0},
    "finetune": {
        "prefixes": list(finetune.DEFAULT_FREEZE_SWEEP),
        "l2": 1e-6,
        "max_epochs": 500,
    },
    "eval": {"subsets": ["extreme", "all"]},
    "embeddings": {"n_extreme": 50, "n_normal": 50, "seed": 0},
    "checkpoint": None,
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key: {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config section in override: {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key in override: {dotted!r}")
    node[parts[-1]] = value


def load_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    user = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _deep_merge(DEFAULT_CONFIG, user)
    for assignment in overrides:
        _apply_override(cfg, assignment)
    if seed is not None:
        cfg["train"]["seed"] = int(seed)
        cfg["data"]["synth"]["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    """Reject any module-precondition violation before side effects."""
    w = cfg["window"]
    if w["lookback"] < 1 or w["horizon"] < 1:
        raise ConfigError("window lookback and horizon must be >= 1")
    if not 0.0 < cfg["extreme"]["percentile"] < 100.0:
        raise ConfigError("extreme.percentile must lie in (0, 100)")
    mode = cfg["extreme"]["mode"]
    if mode != "target" and not mode.startswith("covariate:"):
        raise ConfigError("extreme.mode must be 'target' or 'covariate:<name>'")
    fr = cfg["split"]["fractions"]
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("split.fractions must be 3 positive values summing to 1")
    if cfg["data"]["source"] not in ("synth", "csv"):
        raise ConfigError("data.source must be 'synth' or 'csv'")
    if cfg["data"]["source"] == "csv" and not cfg["data"]["csv"]["path"]:
        raise ConfigError("data.csv.path is required when data.source is 'csv'")
    if any(int(h) < 1 for h in cfg["model"]["hidden_widths"]):
        raise ConfigError("model.hidden_widths must all be >= 1")
    if not 0.0 <= cfg["model"]["dropout_rate"] < 1.0:
        raise ConfigError("model.dropout_rate must lie in [0, 1)")
    if cfg["reweight"]["bins"] < 2:
        raise ConfigError("reweight.bins must be >= 2")
    if cfg["reweight"]["normal_weight"] <= 0:
        raise ConfigError("reweight.normal_weight must be > 0")
    for subset in cfg["eval"]["subsets"]:
        if subset not in evaluate.SUBSETS:
            raise ConfigError(f"eval.subsets entries must be in {evaluate.SUBSETS}")
    if any(int(k) < 0 for k in cfg["finetune"]["prefixes"]):
        raise ConfigError("finetune.prefixes must be >= 0")
    # constructing the config dataclass runs its own validation
    train_config(cfg)
    if cfg["embeddings"]["n_extreme"] < 0 or cfg["embeddings"]["n_normal"] < 0:
        raise ConfigError("embeddings counts must be >= 0")


def train_config(cfg: dict) -> train.TrainConfig:
    t = cfg["train"]
    return train.TrainConfig(
        strategy=t["strategy"],
        learning_rate=float(t["learning_rate"]),
        batch_size=int(t["batch_size"]),
        eval_batch_size=int(t["eval_batch_size"]),
        max_epochs=int(t["max_epochs"]),
        patience=int(t["patience"]),
        l2=float(t["l2"]),
        seed=int(t["seed"]),
        training_subset=t["training_subset"],
    )


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def run_dir(cfg: dict, out: str) -> Path:
    path = Path(out) / config_hash(cfg)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _synth_spec(cfg: dict) -> synth.SynthSpec:
    return synth.SynthSpec(**cfg["data"]["synth"])


def load_frame(cfg: dict) -> dataio.TimeSeriesFrame:
    if cfg["data"]["source"] == "synth":
        return synth.generate(_synth_spec(cfg)).frame
    c = cfg["data"]["csv"]
    schema = dataio.CsvSchema(
        timestamp_column=c["timestamp_column"],
        feature_columns=tuple(c["feature_columns"]),
        target_columns=tuple(c["target_columns"]),
    )
    return dataio.load_csv(c["path"], schema)


def prepare_data(cfg: dict):
    """frame -> normalizer -> windows -> labels -> split, per the config."""
    frame = load_frame(cfg)
    fractions = tuple(cfg["split"]["fractions"])
    normalizer = dataio.fit_normalizer(frame, fractions[0])
    windows = dataio.make_windows(
        frame, normalizer, cfg["window"]["lookback"], cfg["window"]["horizon"]
    )
    train_end = dataio.training_row_count(frame.n_rows, fractions)
    labeled, thresholds = dataio.label_extremes(
        windows, frame, mode=cfg["extreme"]["mode"],
        percentile=cfg["extreme"]["percentile"], train_end=train_end,
    )
    split = dataio.chrono_split(labeled, frame.n_rows, fractions)
    return frame, normalizer, split, thresholds


def compute_static_weights(cfg: dict, frame, split, thresholds):
    """Strategy-specific training weights plus audit artifacts."""
    strategy = cfg["train"]["strategy"]
    if strategy not in ("ipf", "evt"):
        return None, {}
    aggregates = dataio.window_aggregates(split.train, frame, mode=cfg["extreme"]["mode"])
    if strategy == "ipf":
        hist, weights = reweight.ipf_weights(aggregates, bins=int(cfg["reweight"]["bins"]))
        audit = {"histogram_counts": hist.counts.tolist()}
        return weights, audit
    mu = float(thresholds[0])
    exceedances = aggregates[aggregates > mu]
    fit_result = reweight.fit_gpd(exceedances, mu, n_total=aggregates.size)
    weights = reweight.evt_weights(
        aggregates, fit_result, normal_weight=float(cfg["reweight"]["normal_weight"])
    )
    return weights, {"gpd_fit": fit_result.to_dict()}


def _model_spec(cfg: dict, split: dataio.SplitResult) -> mlp.MlpSpec:
    sample = split.train[0]
    return mlp.MlpSpec(
        input_dim=sample.x.size,
        output_dim=sample.y.size,
        hidden_widths=tuple(int(h) for h in cfg["model"]["hidden_widths"]),
        dropout_rate=float(cfg["model"]["dropout_rate"]),
    )


def _checkpoint_path(cfg: dict, directory: Path) -> Path:
    if cfg["checkpoint"]:
        return Path(cfg["checkpoint"])
    return directory / "model.json"


def cmd_synth(cfg: dict, directory: Path) -> int:
    result = synth.generate(_synth_spec(cfg))
    path = synth.write_csv(result.frame, directory / "series.csv")
    _write_json(directory / "synth_meta.json", {
        "rows": result.frame.n_rows,
        "spike_count": int(result.spike_indices.size),
        "spike_indices": result.spike_indices.tolist(),
    })
    print(f"wrote {path} ({result.frame.n_rows} rows, "
          f"{result.spike_indices.size} spike events)")
    return 0


def cmd_train(cfg: dict, directory: Path) -> int:
    frame, normalizer, split, thresholds = prepare_data(cfg)
    dataio.write_split_manifest(split, directory / "split.json")
    weights, audit = compute_static_weights(cfg, frame, split, thresholds)
    if weights is not None:
        reweight.write_weights_csv(directory / "weights.csv",
                                   dataio.origins(split.train), weights)
    if "gpd_fit" in audit:
        _write_json(directory / "gpd_fit.json", audit["gpd_fit"])

    config = train_config(cfg)
    params = mlp.init_params(_model_spec(cfg, split), seed=config.seed)
    best, report = train.fit(params, split, config, static_weights=weights)

    ckpt = mlp.save_checkpoint(best, {
        "seed": config.seed,
        "strategy": config.strategy,
        "epoch": report.best_epoch,
        "config_hash": config_hash(cfg),
    }, directory / "model.json")
    report.checkpoint_ref = ckpt.name
    (directory / "report.json").write_text(report.to_json() + "\n")
    print(f"trained strategy={config.strategy} seed={config.seed}: "
          f"best epoch {report.best_epoch}, eval loss {report.best_eval_loss:.6g}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_finetune(cfg: dict, directory: Path) -> int:
    frame, normalizer, split, thresholds = prepare_data(cfg)
    ckpt = _checkpoint_path(cfg, directory)
    params, spec, meta = mlp.load_checkpoint(ckpt)
    config = train_config(cfg)
    rows = finetune.freeze_sweep(
        params, split, config, normalizer,
        prefixes=[int(k) for k in cfg["finetune"]["prefixes"]],
        l2=float(cfg["finetune"]["l2"]),
        max_epochs=int(cfg["finetune"]["max_epochs"]),
    )
    finetune.write_sweep_csv(rows, directory / "finetune_sweep.csv")
    best_k = finetune.select_best_prefix(rows)
    spec_best = finetune.FreezeSpec(
        frozen_prefix=best_k, l2=float(cfg["finetune"]["l2"]),
        max_epochs=int(cfg["finetune"]["max_epochs"]),
    )
    tuned, report = finetune.finetune_run(params, split, spec_best, config)
    out = mlp.save_checkpoint(tuned, {
        **meta, "finetuned": True, "frozen_prefix": best_k,
    }, directory / "model_finetuned.json")
    (directory / "finetune_report.json").write_text(report.to_json() + "\n")
    print(f"fine-tune sweep over prefixes {[r.frozen_prefix for r in rows]}; "
          f"best prefix {best_k}")
    print(f"checkpoint: {out}")
    return 0


def cmd_evaluate(cfg: dict, directory: Path) -> int:
    frame, normalizer, split, thresholds = prepare_data(cfg)
    ckpt = _checkpoint_path(cfg, directory)
    params, _, meta = mlp.load_checkpoint(ckpt)
    reports = {}
    for subset in cfg["eval"]["subsets"]:
        reports[subset] = evaluate.score(params, split.test, normalizer,
                                         subset=subset).to_dict()
    payload = {"checkpoint": ckpt.name, "metadata": meta, "test": reports}
    _write_json(directory / "metrics.json", payload)
    for subset, rep in reports.items():
        print(f"test[{subset}]: MAE {rep['mae']:.6g}  RMSE {rep['rmse']:.6g} "
              f"({rep['n_windows']} windows)")
    return 0


def cmd_export_embeddings(cfg: dict, directory: Path) -> int:
    frame, normalizer, split, thresholds = prepare_data(cfg)
    ckpt = _checkpoint_path(cfg, directory)
    params, _, _ = mlp.load_checkpoint(ckpt)
    e = cfg["embeddings"]
    path = directory / "embeddings.csv"
    rows = evaluate.export_embeddings(
        params, list(split.test), n_extreme=int(e["n_extreme"]),
        n_normal=int(e["n_normal"]), seed=int(e["seed"]), path=path,
    )
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tailcast",
        description="Train and evaluate reweighted forecasters on long-tailed series",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the training and data seeds")
        p.add_argument("--out", default="runs", help="parent output directory")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.override, args.seed)
        directory = run_dir(cfg, args.out)
        _write_json(directory / "config.json", cfg)
        return COMMANDS[args.command](cfg, directory)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except TailcastError as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
