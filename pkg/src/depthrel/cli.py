"""Command line entry point: synth, train, eval, ablate, report.

Every command reads an optional INI config (one [command] section of flat
key = value lines), applies command line flags on top (flags win), echoes
the effective config into the output directory, and writes only
deterministic artifacts, so re-running a command from its echoed config
reproduces byte-identical outputs.

Exit codes: 0 success, 1 usage error, 2 I/O or validation error,
3 internal failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import configparser
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from .data import (
    ParseError,
    ValidationError,
    parse_annotations,
    serialize_annotations,
    split_dataset,
)
from .features import (
    AblationMask,
    FeatureFileError,
    MissingFeatureError,
    read_feature_file,
    write_feature_file,
)
from .metrics import (
    K_EFFECTIVE,
    PredictionSet,
    RecallReport,
    delta_report,
    format_report_table,
    recall_report,
    report_to_doc,
)
from .model import (
    AdamConfig,
    CheckpointError,
    MaskMismatchError,
    ModelConfig,
    TrainConfig,
    build_model,
    load_checkpoint,
    predict_image,
    save_checkpoint,
    train,
)
from .model import DEFAULT_BRANCH_DROPOUT, DEFAULT_BRANCH_WIDTHS
from .synth import RULE_SETS, SynthConfig, synth_generate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config plumbing

# key -> default; None means the command requires it.
_COMMAND_KEYS: dict[str, dict[str, str | None]] = {
    "synth": {
        "images": None,
        "entities": "4,7",
        "depth_range": "0.5,3.0",
        "rules": "spatial-3d",
        "noise": "0.0",
        "seed": "0",
        "train_fraction": "",
        "out": None,
    },
    "train": {
        "dataset": None,
        "features": None,
        "out": None,
        "mask": "l,c,v,d",
        "lr": "1e-05",
        "batch_size": "16",
        "epochs": "30",
        "seed": "0",
        "shuffle": "on",
        "fusion_width": "4096",
        "widths": "",
        "dropouts": "",
    },
    "eval": {
        "dataset": None,
        "features": None,
        "checkpoint": None,
        "out": None,
        "k": "20,50,100",
        "graph_constraint": "on",
        "micro_averaging": "per-image",
        "mask": "",
    },
    "ablate": {
        "dataset": None,
        "features": None,
        "eval_dataset": "",
        "out": None,
        "masks": None,
        "jobs": "0",
        "k": "20,50,100",
        "graph_constraint": "on",
        "micro_averaging": "per-image",
        "lr": "1e-05",
        "batch_size": "16",
        "epochs": "30",
        "seed": "0",
        "shuffle": "on",
        "fusion_width": "4096",
        "widths": "",
        "dropouts": "",
    },
    "report": {
        "before": None,
        "after": None,
        "out": None,
    },
}


def _effective_config(command: str, args: argparse.Namespace) -> dict[str, str]:
    keys = _COMMAND_KEYS[command]
    cfg = {k: v for k, v in keys.items() if v is not None}
    if args.config:
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(args.config)
        if not read:
            raise FileNotFoundError(f"config file not found: {args.config}")
        if command not in parser:
            raise UsageError(f"config file {args.config} has no [{command}] section")
        for key, value in parser[command].items():
            if key not in keys:
                raise UsageError(f"unknown config key '{key}' for command '{command}'")
            cfg[key] = value
    for key in keys:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            cfg[key] = flag_value
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m for m in missing)}")
    return cfg


def _echo_config(out_dir: Path, command: str, cfg: dict[str, str]) -> None:
    lines = [f"[{command}]"]
    lines += [f"{key} = {cfg[key]}" for key in _COMMAND_KEYS[command] if key in cfg]
    (out_dir / f"{command}.config.ini").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _usage_int(value: str, name: str, minimum: int | None = None) -> int:
    try:
        parsed = int(value)
    except ValueError:
        raise UsageError(f"--{name} must be an integer, got {value!r}") from None
    if minimum is not None and parsed < minimum:
        raise UsageError(f"--{name} must be >= {minimum}, got {parsed}")
    return parsed


def _usage_float(value: str, name: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise UsageError(f"--{name} must be a number, got {value!r}") from None


def _usage_pair(value: str, name: str, cast) -> tuple:
    parts = value.split(",")
    if len(parts) != 2:
        raise UsageError(f"--{name} must be 'low,high', got {value!r}")
    try:
        return (cast(parts[0]), cast(parts[1]))
    except ValueError:
        raise UsageError(f"--{name} must be 'low,high', got {value!r}") from None


def _usage_onoff(value: str, name: str) -> bool:
    if value not in ("on", "off"):
        raise UsageError(f"--{name} must be 'on' or 'off', got {value!r}")
    return value == "on"


def _usage_mask(value: str, name: str = "mask") -> AblationMask:
    try:
        return AblationMask.from_label(value)
    except ValueError as exc:
        raise UsageError(f"--{name}: {exc}") from None


def _usage_k_list(value: str) -> list:
    ks: list = []
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        if part == K_EFFECTIVE:
            ks.append(K_EFFECTIVE)
        else:
            ks.append(_usage_int(part, "k", minimum=1))
    if not ks:
        raise UsageError("--k must list at least one value")
    return ks


def _usage_dropouts(value: str) -> tuple[dict[str, float], float]:
    branch = dict(DEFAULT_BRANCH_DROPOUT)
    fusion = 0.1
    if not value.strip():
        return branch, fusion
    for item in value.split(","):
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or key not in ("l", "c", "v", "d", "fusion"):
            raise UsageError(f"--dropouts items must be 'l|c|v|d|fusion=<rate>', got {item!r}")
        rate = _usage_float(raw.strip(), "dropouts")
        if not (0.0 <= rate < 1.0):
            raise UsageError(f"--dropouts rates must lie in [0, 1), got {rate}")
        if key == "fusion":
            fusion = rate
        else:
            branch[key] = rate
    return branch, fusion


def _usage_widths(value: str) -> dict[str, int]:
    widths = dict(DEFAULT_BRANCH_WIDTHS)
    if not value.strip():
        return widths
    for item in value.split(","):
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or key not in widths:
            raise UsageError(f"--widths items must be 'l|c|v|d=<int>', got {item!r}")
        widths[key] = _usage_int(raw.strip(), "widths", minimum=1)
    return widths


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_dataset(path: str):
    with open(path, "rb") as fh:
        return parse_annotations(fh.read())


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: dict[str, str]) -> int:
    try:
        synth_cfg = SynthConfig(
            num_images=_usage_int(cfg["images"], "images", minimum=1),
            entities_per_image=_usage_pair(cfg["entities"], "entities", int),
            depth_range=_usage_pair(cfg["depth_range"], "depth-range", float),
            rule_set=cfg["rules"],
            noise_level=_usage_float(cfg["noise"], "noise"),
            seed=_usage_int(cfg["seed"], "seed"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset, store = synth_generate(synth_cfg)

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "dataset.json").write_text(serialize_annotations(dataset), encoding="utf-8")
    write_feature_file(store, out_dir / "features.rfb")
    if cfg["train_fraction"].strip():
        fraction = _usage_float(cfg["train_fraction"], "train-fraction")
        if not (0.0 < fraction < 1.0):
            raise UsageError(f"--train-fraction must lie in (0, 1), got {fraction}")
        train_ds, test_ds = split_dataset(dataset, fraction, synth_cfg.seed)
        (out_dir / "dataset_train.json").write_text(
            serialize_annotations(train_ds), encoding="utf-8"
        )
        (out_dir / "dataset_test.json").write_text(
            serialize_annotations(test_ds), encoding="utf-8"
        )
    _echo_config(out_dir, "synth", cfg)
    n_entities = sum(len(img.entities) for img in dataset.images)
    print(
        f"synth: wrote {len(dataset.images)} images, {n_entities} entities, "
        f"{dataset.total_triples()} triples to {out_dir}"
    )
    return EXIT_OK


def _model_config_from(cfg: dict[str, str], dims, num_predicates: int, mask: AblationMask):
    branch_dropout, fusion_dropout = _usage_dropouts(cfg["dropouts"])
    return ModelConfig(
        dims=dims,
        num_predicates=num_predicates,
        mask=mask,
        branch_widths=_usage_widths(cfg["widths"]),
        branch_dropout=branch_dropout,
        fusion_width=_usage_int(cfg["fusion_width"], "fusion-width", minimum=1),
        fusion_dropout=fusion_dropout,
    )


def _train_one(cfg: dict[str, str], mask: AblationMask, out_dir: Path) -> None:
    dataset = _load_dataset(cfg["dataset"])
    store = read_feature_file(cfg["features"])
    store.validate_against(dataset)
    seed = _usage_int(cfg["seed"], "seed")
    model_cfg = _model_config_from(cfg, store.dims, dataset.num_predicates, mask)
    train_cfg = TrainConfig(
        adam=AdamConfig(learning_rate=_usage_float(cfg["lr"], "lr")),
        batch_size=_usage_int(cfg["batch_size"], "batch-size", minimum=1),
        epochs=_usage_int(cfg["epochs"], "epochs", minimum=1),
        seed=seed,
        shuffle=_usage_onoff(cfg["shuffle"], "shuffle"),
    )
    model = build_model(model_cfg, np.random.default_rng(seed))
    report = train(model, dataset, store, train_cfg)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, model_cfg, out_dir / "checkpoint.rck")
    # Wall time goes to the console only; the report file must be reproducible.
    _write_json(
        out_dir / "train_report.json",
        {
            "epoch_mean_loss": report.epoch_mean_loss,
            "final_train_accuracy": report.final_train_accuracy,
            "seed": seed,
            "mask": mask.label(),
            "epochs": train_cfg.epochs,
            "batch_size": train_cfg.batch_size,
            "learning_rate": train_cfg.adam.learning_rate,
        },
    )
    print(
        f"train[{mask.label()}]: final accuracy {report.final_train_accuracy:.4f}, "
        f"loss {report.epoch_mean_loss[0]:.4f} -> {report.epoch_mean_loss[-1]:.4f}, "
        f"{report.wall_time_s:.1f}s"
    )


def cmd_train(cfg: dict[str, str]) -> int:
    mask = _usage_mask(cfg["mask"])
    out_dir = Path(cfg["out"])
    _train_one(cfg, mask, out_dir)
    _echo_config(out_dir, "train", cfg)
    return EXIT_OK


def _evaluate_checkpoint(
    checkpoint_path: str,
    dataset_path: str,
    features_path: str,
    k_values,
    graph_constraint: bool,
    pooled: bool,
) -> tuple[RecallReport, AblationMask, dict]:
    model, model_cfg = load_checkpoint(checkpoint_path)
    dataset = _load_dataset(dataset_path)
    store = read_feature_file(features_path)
    if store.dims != model_cfg.dims:
        raise ValidationError(
            [f"feature dims: checkpoint expects {model_cfg.dims}, file has {store.dims}"]
        )
    if dataset.num_predicates != model_cfg.num_predicates:
        raise ValidationError(
            [
                f"predicate count: checkpoint expects {model_cfg.num_predicates}, "
                f"dataset has {dataset.num_predicates}"
            ]
        )
    store.validate_against(dataset)
    ranked = {
        img.image_id: predict_image(model, img, store, graph_constraint=graph_constraint)
        for img in dataset.images
    }
    preds = PredictionSet.from_ranked(ranked)
    report = recall_report(preds, dataset, k_values, pooled_micro=pooled)
    doc = report_to_doc(report, dataset.predicate_names, graph_constraint=graph_constraint)
    doc["mask"] = model_cfg.mask.label()
    doc["micro_averaging"] = "pooled" if pooled else "per-image"
    return report, model_cfg.mask, doc


def cmd_eval(cfg: dict[str, str]) -> int:
    k_values = _usage_k_list(cfg["k"])
    graph_constraint = _usage_onoff(cfg["graph_constraint"], "graph-constraint")
    if cfg["micro_averaging"] not in ("per-image", "pooled"):
        raise UsageError(
            f"--micro-averaging must be 'per-image' or 'pooled', got {cfg['micro_averaging']!r}"
        )
    if cfg["mask"].strip():
        requested = _usage_mask(cfg["mask"])
        _, saved_cfg = load_checkpoint(cfg["checkpoint"])
        if requested != saved_cfg.mask:
            raise MaskMismatchError(
                f"checkpoint was trained with mask '{saved_cfg.mask.label()}' but "
                f"'{requested.label()}' was requested"
            )
    report, mask, doc = _evaluate_checkpoint(
        cfg["checkpoint"],
        cfg["dataset"],
        cfg["features"],
        k_values,
        graph_constraint,
        cfg["micro_averaging"] == "pooled",
    )
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    table = format_report_table([(mask.label(), report)])
    (out_dir / "eval_report.txt").write_text(table, encoding="utf-8")
    _write_json(out_dir / "eval_report.json", doc)
    _echo_config(out_dir, "eval", cfg)
    print(table, end="")
    return EXIT_OK


def _mask_sort_key(mask: AblationMask):
    enabled = mask.enabled()
    if len(enabled) == 1:
        return (0, "dcvl".index(enabled[0]), "")
    if len(enabled) == 4:
        return (2, 0, "")
    return (1, len(enabled), mask.label())


def _ablate_worker(args: tuple) -> dict:
    cfg, label, run_dir = args
    try:
        mask = AblationMask.from_label(label)
        _train_one(cfg, mask, Path(run_dir))
        eval_dataset = cfg["eval_dataset"].strip() or cfg["dataset"]
        _, _, doc = _evaluate_checkpoint(
            str(Path(run_dir) / "checkpoint.rck"),
            eval_dataset,
            cfg["features"],
            _usage_k_list(cfg["k"]),
            _usage_onoff(cfg["graph_constraint"], "graph-constraint"),
            cfg["micro_averaging"] == "pooled",
        )
        _write_json(Path(run_dir) / "eval_report.json", doc)
        return {"mask": label, "status": "ok", "micro": doc["micro"], "macro": doc["macro"]}
    except UsageError:
        raise
    except Exception as exc:  # noqa: BLE001 - row failure must not kill the table
        return {"mask": label, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def cmd_ablate(cfg: dict[str, str]) -> int:
    labels = [part.strip() for part in cfg["masks"].split(";") if part.strip()]
    if not labels:
        raise UsageError("--mask must be given at least once (or set 'masks' in the config)")
    masks = [_usage_mask(label, "mask") for label in labels]
    k_values = _usage_k_list(cfg["k"])
    _usage_onoff(cfg["graph_constraint"], "graph-constraint")
    if cfg["micro_averaging"] not in ("per-image", "pooled"):
        raise UsageError(
            f"--micro-averaging must be 'per-image' or 'pooled', got {cfg['micro_averaging']!r}"
        )
    ordered = sorted(set(m.label() for m in masks))
    ordered = sorted(ordered, key=lambda lbl: _mask_sort_key(AblationMask.from_label(lbl)))

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = _usage_int(cfg["jobs"], "jobs")
    if jobs <= 0:
        jobs = min(len(ordered), os.cpu_count() or 1)
    tasks = [
        (cfg, label, str(out_dir / "runs" / label.replace(",", "+"))) for label in ordered
    ]
    if jobs > 1 and len(tasks) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_ablate_worker, tasks))
    else:
        rows = [_ablate_worker(task) for task in tasks]

    table_rows = []
    failed = []
    for row in rows:
        if row["status"] == "ok":
            report = RecallReport(
                tuple(k_values),
                {k: row["micro"][str(k)] for k in k_values},
                {k: row["macro"][str(k)] for k in k_values},
                {},
                {},
            )
            table_rows.append((row["mask"], report))
        else:
            failed.append(row)
    text = format_report_table(table_rows) if table_rows else ""
    for row in failed:
        text += f"{row['mask']}  FAILED: {row['error']}\n"
    (out_dir / "ablation.txt").write_text(text, encoding="utf-8")
    _write_json(out_dir / "ablation.json", {"k": list(map(str, k_values)), "rows": rows})
    _echo_config(out_dir, "ablate", cfg)
    print(text, end="")
    return EXIT_INTERNAL if failed else EXIT_OK


def cmd_report(cfg: dict[str, str]) -> int:
    docs = []
    for key in ("before", "after"):
        with open(cfg[key], "r", encoding="utf-8") as fh:
            docs.append(json.load(fh))
    before, after = docs
    if before["k"] != after["k"]:
        raise ValidationError([f"K lists differ: {before['k']} vs {after['k']}"])
    names_before = [e["name"] for e in before["per_predicate"]]
    names_after = [e["name"] for e in after["per_predicate"]]
    if set(names_before) != set(names_after):
        raise ValidationError(
            [
                "predicate vocabularies differ: "
                f"only-before={sorted(set(names_before) - set(names_after))}, "
                f"only-after={sorted(set(names_after) - set(names_before))}"
            ]
        )

    k_strings = [str(k) for k in before["k"]]
    deltas_by_k: dict[str, list[tuple[str, float, int]]] = {}
    for k in k_strings:
        before_map = {
            e["name"]: (e["recall"][k], e["support"]) for e in before["per_predicate"]
        }
        after_map = {
            e["name"]: (e["recall"][k], e["support"]) for e in after["per_predicate"]
        }
        deltas_by_k[k] = delta_report(before_map, after_map)

    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    rows_doc: dict[str, list[dict]] = {}
    for k in k_strings:
        lines.append(f"delta per predicate at K={k} (after - before):")
        rows_doc[k] = []
        for name, delta, support in deltas_by_k[k]:
            lines.append(f"  {name:<24} {delta:+.4f}  support={support}")
            rows_doc[k].append({"name": name, "delta": delta, "support": support})
        if not deltas_by_k[k]:
            lines.append("  (no changes)")
        lines.append("")
    (out_dir / "delta.txt").write_text("\n".join(lines), encoding="utf-8")
    _write_json(out_dir / "delta.json", {"k": before["k"], "deltas": rows_doc})
    _echo_config(out_dir, "report", cfg)
    print("\n".join(lines), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="depthrel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="INI config file with a [%s] section" % name)
        return p

    p = add("synth", "generate a synthetic dataset and feature file")
    p.add_argument("--images", default=None)
    p.add_argument("--entities", default=None, help="min,max entities per image")
    p.add_argument("--depth-range", dest="depth_range", default=None)
    p.add_argument("--rules", default=None, choices=list(RULE_SETS))
    p.add_argument("--noise", default=None)
    p.add_argument("--seed", default=None)
    p.add_argument("--train-fraction", dest="train_fraction", default=None)
    p.add_argument("--out", default=None)

    p = add("train", "train one model")
    p.add_argument("--dataset", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--lr", default=None)
    p.add_argument("--batch-size", dest="batch_size", default=None)
    p.add_argument("--epochs", default=None)
    p.add_argument("--seed", default=None)
    p.add_argument("--shuffle", default=None, choices=["on", "off"])
    p.add_argument("--fusion-width", dest="fusion_width", default=None)
    p.add_argument("--widths", default=None, help="branch width overrides, e.g. l=20,c=64")
    p.add_argument("--dropouts", default=None,
                   help="dropout overrides, e.g. l=0,fusion=0.2")

    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--dataset", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--k", default=None, help="comma list, e.g. 20,50,100 or effective")
    p.add_argument("--graph-constraint", dest="graph_constraint", default=None,
                   choices=["on", "off"])
    p.add_argument("--micro-averaging", dest="micro_averaging", default=None,
                   choices=["per-image", "pooled"])
    p.add_argument("--mask", default=None, help="expected checkpoint mask (safety check)")

    p = add("ablate", "train and evaluate one model per ablation mask")
    p.add_argument("--dataset", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--eval-dataset", dest="eval_dataset", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--mask", action="append", default=None,
                   help="repeatable; each use adds one mask, e.g. --mask l --mask l,d")
    p.add_argument("--jobs", default=None)
    p.add_argument("--k", default=None)
    p.add_argument("--graph-constraint", dest="graph_constraint", default=None,
                   choices=["on", "off"])
    p.add_argument("--micro-averaging", dest="micro_averaging", default=None,
                   choices=["per-image", "pooled"])
    p.add_argument("--lr", default=None)
    p.add_argument("--batch-size", dest="batch_size", default=None)
    p.add_argument("--epochs", default=None)
    p.add_argument("--seed", default=None)
    p.add_argument("--shuffle", default=None, choices=["on", "off"])
    p.add_argument("--fusion-width", dest="fusion_width", default=None)
    p.add_argument("--widths", default=None)
    p.add_argument("--dropouts", default=None)

    p = add("report", "per-predicate recall deltas between two eval reports")
    p.add_argument("--before", default=None)
    p.add_argument("--after", default=None)
    p.add_argument("--out", default=None)
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "ablate" and getattr(args, "mask", None) is not None:
            args.masks = ";".join(args.mask)
        elif args.command == "ablate":
            args.masks = None
        cfg = _effective_config(args.command, args)
        return _COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        ParseError,
        ValidationError,
        FeatureFileError,
        CheckpointError,
        MissingFeatureError,
        MaskMismatchError,
        OSError,
        json.JSONDecodeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


def entry_point() -> None:
    sys.exit(main(sys.argv[1:]))
