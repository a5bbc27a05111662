"""Command-line entry point: ``ccfcnet {synth,train,eval,counter,analyze}``.

Settings resolve in increasing precedence: built-in defaults, the
``CCFCNET_SEED`` environment variable (seed only), a ``--config`` file of
``key = value`` lines, then explicit flags. Each command writes the
resolved settings to ``<out>/resolved_config``; passing that file back via
``--config`` reproduces the run.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis, plotting
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CCFCError, ConfigError, DataError, TooFewPatients
from .fc_data import (
    PATIENT,
    SyntheticSpec,
    choose_planted_edges,
    generate_synthetic,
    kfold,
    load_dataset,
    save_dataset,
    split,
)
from .model import ModelConfig
from .training import Ablations, TrainConfig, evaluate, train, write_epoch_log

log = logging.getLogger("ccfcnet")

SEED_ENV = "CCFCNET_SEED"
SPLIT_FILE = "splits.csv"
CONFIG_FILE = "resolved_config"

# key -> (type, default); one flat namespace shared by all commands
SETTINGS = {
    "seed": (int, 0),
    "out": (str, None),
    # synth
    "r": (int, 20),
    "n_per_class": (int, 100),
    "planted": (int, 40),
    "effect": (float, 0.6),
    "subtypes": (int, 1),
    "overlap": (float, 0.25),
    "noise": (float, 0.05),
    "n_sites": (int, 1),
    "site_effect": (float, 0.0),
    # train
    "data": (str, None),
    "epochs": (int, 60),
    "lr_step1": (float, 5e-4),
    "lr_step2": (float, 1e-4),
    "batch_size": (int, 32),
    "weight_decay": (float, 1e-4),
    "lambda_recon": (float, 1.0),
    "lambda_class": (float, 0.1),
    "ablate": (str, ""),
    "split_fractions": (str, "0.6,0.2,0.2"),
    "folds": (int, 0),
    "d": (int, 0),
    "hidden_enc": (int, 128),
    "n_blocks": (int, 2),
    "n_heads": (int, 10),
    "tau_gumbel": (float, 5.0),
    "softmax_temp": (float, 0.5),
    "dropout": (float, 0.5),
    "attn_scale": (str, "full"),
    # eval / counter / analyze
    "run": (str, None),
    "split": (str, "test"),
    "report_split": (str, "all"),
    "extreme_mode": (str, "exclude"),
    "k": (int, 3),
    "plots": (bool, True),
}

COMMAND_KEYS = {
    "synth": ["seed", "out", "r", "n_per_class", "planted", "effect", "subtypes", "overlap", "noise",
              "n_sites", "site_effect"],
    "train": ["seed", "out", "data", "epochs", "lr_step1", "lr_step2", "batch_size", "weight_decay",
              "lambda_recon", "lambda_class", "ablate", "split_fractions", "folds", "d", "hidden_enc",
              "n_blocks", "n_heads", "tau_gumbel", "softmax_temp", "dropout", "attn_scale", "plots"],
    "eval": ["out", "run", "data", "split", "plots"],
    "counter": ["out", "run", "data", "split", "report_split", "extreme_mode", "plots"],
    "analyze": ["out", "run", "data", "split", "extreme_mode", "k", "plots"],
}
COMMAND_DEFAULTS = {"analyze": {"split": "all"}}


# --------------------------------------------------------------------------
# settings


def _convert(key: str, raw):
    typ, _ = SETTINGS[key]
    if raw is None or isinstance(raw, typ) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if text == "" and typ is not str:
            return None
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text("utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "command":
            continue
        if key not in SETTINGS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def resolve(command: str, flags: dict, config_path=None, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    keys = COMMAND_KEYS[command]
    cfg = {k: SETTINGS[k][1] for k in keys}
    cfg.update({k: v for k, v in COMMAND_DEFAULTS.get(command, {}).items() if k in keys})
    if "seed" in keys and environ.get(SEED_ENV):
        cfg["seed"] = _convert("seed", environ[SEED_ENV])
    if config_path:
        cfg.update({k: v for k, v in read_config_file(config_path).items() if k in keys})
    cfg.update({k: _convert(k, v) for k, v in flags.items() if k in keys and v is not None})
    return cfg


def _fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_resolved(cfg: dict, command: str, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command = {command}"] + [f"{k} = {_fmt_value(cfg[k])}" for k in COMMAND_KEYS[command]]
    path = out_dir / CONFIG_FILE
    path.write_text("\n".join(lines) + "\n", "utf-8")
    return path


def _require(cfg, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def model_config_from(cfg: dict, r: int) -> ModelConfig:
    return ModelConfig(
        r=r,
        d=cfg["d"] or None,
        hidden_enc=cfg["hidden_enc"],
        n_blocks=cfg["n_blocks"],
        n_heads=cfg["n_heads"],
        tau_gumbel=cfg["tau_gumbel"],
        softmax_temp=cfg["softmax_temp"],
        dropout=cfg["dropout"],
        attn_scale=cfg["attn_scale"],
    )


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr_step1=cfg["lr_step1"],
        lr_step2=cfg["lr_step2"],
        batch_size=cfg["batch_size"],
        weight_decay=cfg["weight_decay"],
        lambda_recon=cfg["lambda_recon"],
        lambda_class=cfg["lambda_class"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        ablations=Ablations.parse(cfg["ablate"]),
    )


def parse_fractions(text: str):
    try:
        fr = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"split fractions must be three comma-separated numbers, got {text!r}") from None
    if len(fr) != 3:
        raise ConfigError(f"split fractions must be three comma-separated numbers, got {text!r}")
    return fr


# --------------------------------------------------------------------------
# shared IO


def _write_rows(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt_value(v) if not isinstance(v, str) else v for v in row])


def _write_splits(path: Path, parts: dict):
    rows = [(rec.subject_id, name) for name, ds in parts.items() for rec in ds.records]
    _write_rows(path, ["subject_id", "split"], rows)


def _read_splits(path: Path) -> dict[str, str]:
    with open(path, encoding="utf-8", newline="") as fh:
        return {row["subject_id"]: row["split"] for row in csv.DictReader(fh)}


def _print_metrics(title: str, rows):
    print(title)
    print(f"{'split':<10}{'AUC':>8}{'ACC':>8}{'SEN':>8}{'SPC':>8}")
    for name, m in rows:
        print(f"{name:<10}" + "".join(f"{v:>8.4f}" for v in m.as_row()))


def _locate_run(run) -> tuple[Path, Path]:
    """Return ``(run_dir, checkpoint_dir)`` for a run directory or a bare checkpoint."""
    run = Path(run)
    if (run / "checkpoint" / "config.json").exists():
        return run, run / "checkpoint"
    if (run / "config.json").exists():
        return run.parent, run
    raise DataError(f"no checkpoint found under {run}")


def load_run(cfg: dict):
    """Model, metadata and the dataset subset named by ``cfg['split']``."""
    _require(cfg, "run")
    run_dir, ckpt = _locate_run(cfg["run"])
    model, meta = load_checkpoint(ckpt)
    data = cfg.get("data") or meta.get("data")
    if not data:
        raise ConfigError("dataset path unknown: pass --data")
    dataset = load_dataset(data)
    return run_dir, model, meta, dataset


def select_split(run_dir: Path, dataset, name: str):
    if name == "all":
        return dataset
    if name not in ("train", "val", "test"):
        raise ConfigError(f"split must be one of train, val, test, all; got {name!r}")
    path = run_dir / SPLIT_FILE
    if not path.exists():
        raise DataError(f"{path} not found; only --split all is available")
    assignment = _read_splits(path)
    idx = [k for k, rec in enumerate(dataset.records) if assignment.get(rec.subject_id) == name]
    if not idx:
        raise DataError(f"split {name!r} is empty")
    return dataset.subset(idx)


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out")
    out = Path(cfg["out"])
    spec = SyntheticSpec(
        r=cfg["r"],
        n_per_class=cfg["n_per_class"],
        planted_edges=choose_planted_edges(cfg["r"], cfg["planted"], cfg["seed"]),
        effect_size=cfg["effect"],
        n_subtypes=cfg["subtypes"],
        subtype_edge_overlap=cfg["overlap"],
        noise_std=cfg["noise"],
        seed=cfg["seed"],
        n_sites=cfg["n_sites"],
        site_effect=cfg["site_effect"],
    )
    dataset = generate_synthetic(spec)
    save_dataset(dataset, out)
    write_resolved(cfg, "synth", out)
    print(f"wrote {len(dataset)} subjects (R={dataset.r}, {len(spec.planted_edges)} planted edges) to {out}")
    return 0


def _train_one(cfg, train_set, val_set, test_set, out: Path, data_path):
    mcfg = model_config_from(cfg, train_set.r)
    tcfg = train_config_from(cfg)
    result = train(train_set, val_set, mcfg, tcfg)
    meta = {
        "seed": tcfg.seed,
        "class_names": list(train_set.class_names),
        "train": tcfg.to_dict(),
        "adamw": {"betas": [0.9, 0.999], "eps": 1e-8},
        "best_epoch": result.best_epoch,
        "data": str(Path(data_path).resolve()),
        "split_fractions": cfg["split_fractions"],
    }
    save_checkpoint(result.model, out / "checkpoint", **meta)
    write_epoch_log(result.logs, out / "epoch_log.csv")
    _write_splits(out / SPLIT_FILE, {"train": train_set, "val": val_set, "test": test_set})
    if cfg["plots"] and result.logs:
        plotting.plot_training_log(result.logs, out / "figures" / "training.png")
    val_m, _ = evaluate(val_set, result.model)
    test_m, _ = evaluate(test_set, result.model)
    return result, val_m, test_m


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    out = Path(cfg["out"])
    dataset = load_dataset(cfg["data"])
    write_resolved(cfg, "train", out)
    torch.set_num_threads(1)
    if cfg["folds"] and cfg["folds"] > 1:
        rows = []
        for f, (tr, va, te) in enumerate(kfold(dataset, cfg["folds"], seed=cfg["seed"]), start=1):
            _, _, test_m = _train_one(cfg, tr, va, te, out / f"fold{f}", cfg["data"])
            rows.append((f, test_m))
            _print_metrics(f"fold {f}", [("test", test_m)])
        arr = np.array([m.as_row() for _, m in rows])
        _write_rows(out / "cv_metrics.csv", ["fold", "auc", "acc", "sen", "spc"],
                    [[f, *m.as_row()] for f, m in rows]
                    + [["mean", *arr.mean(axis=0).tolist()], ["std", *arr.std(axis=0).tolist()]])
        return 0
    tr, va, te = split(dataset, parse_fractions(cfg["split_fractions"]), seed=cfg["seed"])
    result, val_m, test_m = _train_one(cfg, tr, va, te, out, cfg["data"])
    print(f"best epoch {result.best_epoch} of {cfg['epochs']}")
    _print_metrics("checkpoint metrics", [("val", val_m), ("test", test_m)])
    return 0


def cmd_eval(cfg: dict) -> int:
    run_dir, model, meta, dataset = load_run(cfg)
    subset = select_split(run_dir, dataset, cfg["split"])
    out = Path(cfg["out"] or run_dir / f"eval_{cfg['split']}")
    write_resolved(cfg, "eval", out)
    metrics, preds = evaluate(subset, model)
    _write_rows(out / "metrics.csv", ["split", "auc", "acc", "sen", "spc"], [[cfg["split"], *metrics.as_row()]])
    _write_rows(out / "predictions.csv", ["subject_id", "label", "prob_patient", "pred"],
                [[p.subject_id, p.label, p.prob_patient, p.pred] for p in preds])
    if cfg["plots"]:
        plotting.plot_roc([p.prob_patient for p in preds], [p.label for p in preds], out / "figures" / "roc.png")
    _print_metrics(f"evaluation ({len(subset)} subjects)", [(cfg["split"], metrics)])
    return 0


def _diff_plotdata(reports, dataset, out: Path, class_names):
    """Group-mean diff maps (own minus counter-condition) and the observed group difference."""
    r = dataset.r
    iu = np.triu_indices(r, k=1)
    observed = analysis.group_fc_difference(dataset)
    maps = {"observed control - patient": observed}
    rows = [["observed_control_minus_patient", int(i), int(j), observed[i, j]] for i, j in zip(*iu)]
    for c, name in enumerate(class_names):
        mean = analysis.group_mean_diff(reports, c)
        maps[f"{name}: own - counter"] = mean
        if mean is None:
            continue
        rows += [[f"{name}_own_minus_counter", int(i), int(j), mean[i, j]] for i, j in zip(*iu)]
    _write_rows(out / "plotdata" / "diff_group.csv", ["group", "i", "j", "value"], rows)
    return maps


def cmd_counter(cfg: dict) -> int:
    run_dir, model, meta, dataset = load_run(cfg)
    if model.cfg.no_prototype:
        raise ConfigError("checkpoint was trained with no_prototype; counter-condition analysis needs prototypes")
    subset = select_split(run_dir, dataset, cfg["split"])
    out = Path(cfg["out"] or run_dir / "counter")
    write_resolved(cfg, "counter", out)

    res = analysis.counter_condition_classify(subset, model)
    _write_rows(out / "counter_metrics.csv", ["split", "n_subjects", "n_filtered", "auc", "acc", "sen", "spc"],
                [[cfg["split"], res.n_total, len(res.subject_ids), *res.metrics.as_row()]])

    report_set = select_split(run_dir, dataset, cfg["report_split"])
    reports = analysis.build_reports(report_set, model, cfg["extreme_mode"])
    _write_rows(out / "counter_subjects.csv",
                ["subject_id", "label", "own_correct", "cc_correct", "cc_prob_patient"],
                [[rep.subject_id, rep.label, int(rep.own_correct), int(rep.cc_correct), rep.cc_probs[PATIENT]]
                 for rep in reports])
    iu = np.triu_indices(report_set.r, k=1)
    kept = analysis.passing(reports)
    _write_rows(out / "diff_edges.csv", ["subject", "i", "j", "diff"],
                [[rep.subject_id, int(i), int(j), rep.diff[i, j]] for rep in kept for i, j in zip(*iu)])
    _write_rows(out / "excluded_edges.csv", ["subject", "i", "j"],
                [[rep.subject_id, i, j] for rep in kept for i, j in rep.excluded])
    maps = _diff_plotdata(reports, report_set, out, report_set.class_names)
    if cfg["plots"]:
        plotting.plot_diff_maps(maps, out / "figures" / "diff_maps.png")
    _print_metrics(f"counter-condition classification ({len(res.subject_ids)}/{res.n_total} subjects kept)",
                   [(cfg["split"], res.metrics)])
    print(f"{len(kept)}/{len(reports)} subjects pass both classifications ({cfg['report_split']})")
    return 0


def cmd_analyze(cfg: dict) -> int:
    run_dir, model, meta, dataset = load_run(cfg)
    subset = select_split(run_dir, dataset, cfg["split"])
    out = Path(cfg["out"] or run_dir / "analysis")
    write_resolved(cfg, "analyze", out)
    names = subset.class_names

    stats = analysis.mask_statistics(subset, model)
    groups = sorted(stats.mean_mask)
    r = subset.r
    header = ["roi"] + [f"mask_mean_{names[g]}" for g in groups] + [f"dc_{names[g]}" for g in groups] \
        + ["dc_diff_patient_minus_control", "t", "p"]
    dc_diff = stats.dc_difference if len(groups) == 2 else np.full(r, np.nan)
    rows = []
    for i in range(r):
        rows.append([i] + [stats.mean_mask[g][i].sum() / (r - 1) for g in groups]
                    + [stats.degree_centrality[g][i] for g in groups]
                    + [dc_diff[i], stats.dc_tstats[i], stats.dc_pvalues[i]])
    _write_rows(out / "mask_stats.csv", header, rows)
    iu = np.triu_indices(r, k=1)
    _write_rows(out / "plotdata" / "mask_matrix.csv", ["group", "i", "j", "mean", "std"],
                [[names[g], int(i), int(j), stats.mean_mask[g][i, j], stats.std_mask[g][i, j]]
                 for g in groups for i, j in zip(*iu)])
    _write_rows(out / "plotdata" / "dc.csv", ["group", "roi", "dc"],
                [[names[g], i, stats.degree_centrality[g][i]] for g in groups for i in range(r)])
    if cfg["plots"]:
        plotting.plot_masks(stats.mean_mask, stats.std_mask, names, out / "figures" / "masks.png")
        plotting.plot_degree_centrality(stats.degree_centrality, stats.dc_pvalues, names, out / "figures" / "dc.png")

    if model.cfg.no_prototype:
        print("mask statistics written; subtype analysis skipped (no prototypes)")
        return 0
    reports = analysis.build_reports(subset, model, cfg["extreme_mode"])
    patients = [rep for rep in analysis.passing(reports) if rep.label == PATIENT]
    if len(patients) < max(cfg["k"], 2):
        raise TooFewPatients(f"only {len(patients)} patients pass both classifications; need k={cfg['k']}")
    scores = [subset.by_id(rep.subject_id).clinical_score for rep in patients]
    res = analysis.subtype_cluster([rep.diff for rep in patients], cfg["k"], scores,
                                   [rep.subject_id for rep in patients])
    _write_rows(out / "subtypes.csv", ["subject", "cluster"], zip(res.subject_ids, res.assignments.tolist()))
    anova_rows = [[f"roi{i}", res.roi_anova_raw[i], res.roi_anova_pvalues[i]] for i in range(r)]
    anova_rows.append(["clinical_score", res.score_anova_pvalue, res.score_anova_pvalue])
    _write_rows(out / "subtype_anova.csv", ["variable", "p_raw", "p_bonferroni"], anova_rows)
    cluster_means = {c: np.mean([rep.diff for rep, a in zip(patients, res.assignments) if a == c], axis=0)
                     for c in sorted(set(res.assignments.tolist()))}
    _write_rows(out / "plotdata" / "subtype_diff.csv", ["cluster", "i", "j", "mean_diff"],
                [[c, int(i), int(j), m[i, j]] for c, m in cluster_means.items() for i, j in zip(*iu)])
    _write_rows(out / "plotdata" / "subtype_scores.csv", ["subject", "cluster", "score"],
                [[sid, a, s] for sid, a, s in zip(res.subject_ids, res.assignments.tolist(), scores)])
    if cfg["plots"]:
        by_cluster = {}
        for a, s in zip(res.assignments.tolist(), scores):
            if s is not None:
                by_cluster.setdefault(a, []).append(s)
        plotting.plot_subtypes(cluster_means, by_cluster, out / "figures" / "subtypes.png")
    applicable = "n/a" if not res.applicable else f"{res.score_anova_pvalue:.4g}"
    print(f"{len(patients)} patients clustered into k={cfg['k']}; clinical-score ANOVA p = {applicable}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "counter": cmd_counter,
            "analyze": cmd_analyze}


# --------------------------------------------------------------------------
# argument parsing


def _flag(parser, key, help_text=None, **kw):
    typ, default = SETTINGS[key]
    name = "--" + key.replace("_", "-")
    kind = str if typ is bool else typ
    parser.add_argument(name, dest=key, type=kind, default=None, help=help_text or f"(default: {default})", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccfcnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic FC dataset with planted group differences",
        "train": "train with alternating Step 1 / Step 2 epochs",
        "eval": "AUC/ACC/SEN/SPC of a trained run on one split",
        "counter": "counter-condition classification and per-subject diff maps",
        "analyze": "mask statistics, degree centrality and patient subtypes",
    }
    for command, keys in COMMAND_KEYS.items():
        p = sub.add_parser(command, help=helps[command])
        p.add_argument("--config", default=None, help="key = value settings file")
        for key in keys:
            _flag(p, key)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(args).items() if k in SETTINGS}
    try:
        cfg = resolve(args.command, flags, args.config)
        return COMMANDS[args.command](cfg)
    except CCFCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
