"""Command-line entry points: ``ltgcd synth|train|eval|report|gradcheck|ablate``.

Every command takes ``--config PATH`` plus trailing ``key=value`` overrides
and writes its resolved configuration next to its outputs. Failures print a
single ``ltgcd: error code=N type=Name: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import report as rpt
from . import trainer as T
from .config import ConfigError, TrainConfig, load_config
from .data import (DatasetError, DatasetFormatError, ImbalanceProfile, export_labels_csv,
                   load_dataset, save_dataset, synth_dataset)
from .gradcheck import TOLERANCE, run_suite
from .pseudo_label import total_variation

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

ABLATION_VALUES = {
    "gamma": ("1.5", "2", "2.5", "3"),
    "beta": ("200", "300", "400", "500", "600"),
    "K": ("2", "3", "5", "6", "7"),
    "T1": ("1", "5", "10", "25", "50"),
    "T2": ("1", "5", "10", "25", "50"),
    "target_dist": ("uniform", "estimated", "learnable"),
}
ABLATION_COLUMNS = ("axis", "value", "acc_old", "acc_new", "acc_all", "many", "medium",
                    "few", "std", "distribution_tv", "final_L_cls_u")

log = logging.getLogger("ltgcd")


def write_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(cfg.to_json() + "\n")


def make_dataset(cfg: TrainConfig):
    profile = ImbalanceProfile(cfg.profile, cfg.rho, cfg.C, cfg.n_max)
    return synth_dataset(profile, cfg.d, cfg.sep, cfg.data_seed, cfg.n_known,
                         cfg.known_select, cfg.test_per_class, cfg.sigma)


def check_dataset(cfg: TrainConfig, ds) -> None:
    if ds.C != cfg.C:
        raise ConfigError(f"dataset has C={ds.C} but config says C={cfg.C}")


def learned_tv(cfg: TrainConfig, ds, state) -> float | None:
    if state.pi_tilde is None:
        return None
    pi = T.target_distribution(cfg, state, ds.C)
    return total_variation(T.aligned_distribution(state, ds, pi), ds.class_distribution())


def build_report(cfg, ds, state, stage, evaluation=None) -> dict:
    evaluation = evaluation or T.evaluate_state(cfg, ds, state)
    rep = evaluation.to_dict()
    rep["stage"] = stage
    rep["distribution_tv"] = learned_tv(cfg, ds, state)
    return rep


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run_tables(run_dir: Path, ds, state) -> None:
    rpt.write_metrics(run_dir / "metrics.csv", state.history)
    truth = None
    if state.pi_tilde is not None:
        truth = ds.class_distribution()[T.column_classes(state, ds)]
    rpt.write_distribution(run_dir / "pi.csv", state.history, truth)
    rpt.write_estimates(run_dir / "estimates.csv", state.estimates)
    rpt.write_weights(run_dir / "weights.csv", state.refreshes)
    write_json(run_dir / "class_sizes.json", [int(s) for s in ds.class_sizes])


def train_run(cfg: TrainConfig, ds, run_dir, stage="both") -> dict:
    """Run the requested stage(s) into ``run_dir``; returns the final report."""
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    write_config(cfg, run_dir / "config.json")
    if stage in ("1", "both"):
        state = T.run_stage1(cfg, ds)
        T.save_checkpoint(state, ckpt / "stage1.npz")
        rep = build_report(cfg, ds, state, "1")
        write_json(run_dir / "report_stage1.json", rep)
    else:
        path = ckpt / "stage1.npz"
        if not path.exists():
            raise FileNotFoundError(f"stage 2 needs a stage-1 checkpoint at {path}")
        state = T.load_checkpoint(path)
    if stage in ("2", "both"):
        state = T.run_stage2(cfg, ds, state)
        T.save_checkpoint(state, ckpt / "stage2.npz")
        rep = build_report(cfg, ds, state, "2")
    write_json(run_dir / "report.json", rep)
    rpt.write_groups(run_dir / "groups.csv", rep)
    write_run_tables(run_dir, ds, state)
    return rep


# -- commands --------------------------------------------------------------


def cmd_synth(args, cfg):
    ds = make_dataset(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    write_config(cfg, out.with_suffix(".config.json"))
    export_labels_csv(ds, out.with_suffix(".labels.csv"))
    print(f"wrote {out} C={ds.C} M={ds.M} labeled={ds.M1} known={list(ds.known_classes)}")


def _dataset_for(args, cfg, run_dir=None):
    if args.dataset:
        ds = load_dataset(args.dataset)
    else:
        ds = make_dataset(cfg)
        if run_dir is not None:
            save_dataset(ds, Path(run_dir) / "dataset.bin")
    check_dataset(cfg, ds)
    return ds


def cmd_train(args, cfg):
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ds = _dataset_for(args, cfg, run_dir)
    rep = train_run(cfg, ds, run_dir, args.stage)
    print(f"run {run_dir} stage={args.stage} all={rep['acc_all']:.2f} "
          f"old={_fmt(rep['acc_old'])} new={_fmt(rep['acc_new'])}")


def _fmt(v):
    return "nan" if v is None else f"{v:.2f}"


def cmd_eval(args, cfg):
    ckpt = Path(args.checkpoint)
    state = T.load_checkpoint(ckpt)
    ds = load_dataset(args.dataset)
    check_dataset(cfg, ds)
    out_dir = Path(args.out_dir) if args.out_dir else ckpt.parent.parent / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out_dir / "config.json")
    stage = "2" if state.epoch2 else "1"
    evaluation = T.evaluate_state(cfg, ds, state)
    rep = build_report(cfg, ds, state, stage, evaluation)
    write_json(out_dir / "report.json", rep)
    rpt.write_groups(out_dir / "groups.csv", rep)
    print(evaluation.table())


def cmd_report(args, cfg):
    made = rpt.render(args.run_dir)
    for path in made:
        print(path)


def cmd_gradcheck(args, cfg):
    errors = run_suite(args.instances, cfg.seed)
    failed = False
    rows = []
    for name, err in errors.items():
        ok = err < TOLERANCE
        failed |= not ok
        rows.append((name, err, "pass" if ok else "fail"))
        print(f"{name} max_rel_err={err:.3e} {'pass' if ok else 'FAIL'}")
    if args.out:
        rpt.write_csv(args.out, ("loss", "max_rel_err", "result"), rows)
        write_config(cfg, Path(args.out).with_suffix(".config.json"))
    if failed:
        raise T.NumericalError("gradient check failed for " +
                               ",".join(r[0] for r in rows if r[2] == "fail"))


def ablation_row(cfg: TrainConfig, ds, axis, value) -> tuple:
    state = T.run_stage1(cfg, ds)
    final_cls_u = state.history[-1]["L_cls_u"] if state.history else None
    state = T.run_stage2(cfg, ds, state)
    rep = T.evaluate_state(cfg, ds, state)
    g = rep.groups_all
    return (axis, value, rep.acc_old, rep.acc_new, rep.acc_all, g["many"], g["medium"],
            g["few"], g["std"], learned_tv(cfg, ds, state), final_cls_u)


def cmd_ablate(args, cfg):
    values = args.values.split(",") if args.values else ABLATION_VALUES[args.axis]
    ds = _dataset_for(args, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out.with_suffix(".config.json"))
    rows = []
    for v in values:
        run_cfg = cfg.with_overrides({args.axis: v})
        rows.append(ablation_row(run_cfg, ds, args.axis, v))
        print(f"{args.axis}={v} all={rows[-1][4]:.2f}", flush=True)
    rpt.write_csv(out, ABLATION_COLUMNS, rows)


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltgcd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value or JSON config file")
        p.add_argument("overrides", nargs="*", help="key=value overrides")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a long-tailed synthetic dataset")
    p.add_argument("--out", required=True, help="dataset file to write")

    p = add("train", cmd_train, "run stage 1, stage 2 or both")
    p.add_argument("--dataset", help="dataset file (synthesized from config if omitted)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a dataset's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("kmeans", "semi-sup-kmeans"))
    p.add_argument("--out-dir")

    p = add("report", cmd_report, "render figures for a run directory")
    p.add_argument("--run-dir", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--out", help="optional CSV of results")

    p = add("ablate", cmd_ablate, "sweep one hyperparameter")
    p.add_argument("--axis", required=True, choices=tuple(ABLATION_VALUES))
    p.add_argument("--values", help="comma-separated values (default: the standard sweep)")
    p.add_argument("--dataset")
    p.add_argument("--out", required=True, help="CSV to write")
    return parser


def resolve_config(args) -> TrainConfig:
    config_path = args.config
    if config_path is None and args.command in ("eval", "report"):
        # fall back to the run directory's resolved config
        base = Path(args.run_dir) if args.command == "report" else Path(args.checkpoint).parent.parent
        if (base / "config.json").exists():
            config_path = base / "config.json"
    overrides = list(args.overrides)
    if args.command == "eval" and args.mode:
        overrides.append(f"eval_mode={args.mode}")
    return load_config(config_path, overrides)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (OSError, DatasetFormatError)):
        return EXIT_IO
    if isinstance(exc, (ConfigError, DatasetError)):
        return EXIT_CONFIG
    if isinstance(exc, (ArithmeticError, T.NumericalError, ValueError)):
        return EXIT_NUMERICAL
    return 1


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except Exception as exc:  # one machine-parseable line per failure
        code = exit_code_for(exc)
        msg = " ".join(str(exc).split())
        print(f"ltgcd: error code={code} type={type(exc).__name__}: {msg}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
