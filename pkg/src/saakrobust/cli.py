"""Command-line interface: ``saakrobust <subcommand> --config FILE [options]``.

Every subcommand reads and writes artifacts in the output directory (the
config's ``output`` unless ``--output`` is given), using the file names of
``saakrobust.harness``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness as H
from .attacks import METHODS as ATTACK_METHODS
from .attacks import attack_set
from .config import ConfigError, ExperimentConfig
from .datasets import load_set, save_set
from .defenses import DefenseSpec, apply_defense
from .models import TargetMLP, evaluate_accuracy, train_mlp
from .saak import SaakPipeline, fit_pipeline
from .selection import load_masks, save_masks, write_entropy_csv


class CliError(RuntimeError):
    pass


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.data_dir is not None:
        cfg.data.dir = args.data_dir
    return cfg.validate()


def _outdir(args, cfg) -> Path:
    out = Path(args.output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {path} (run `{hint}` first)")
    return path


def _test_set(args, cfg):
    if getattr(args, "input", None):
        return load_set(args.input, cfg.data.num_classes)
    return H.load_data(cfg.data)[1]


def _target(out: Path) -> TargetMLP:
    return TargetMLP.load(_require(out / H.TARGET_FILE, "train --model target"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(args, cfg, out):
    train, _ = H.load_data(cfg.data)
    pipeline = fit_pipeline(train, cfg.stages, seed=cfg.seed)
    maps, masks = H.fit_selection(pipeline, train, cfg.select)
    pipeline.save(out / H.PIPELINE_FILE)
    save_masks(masks, out / H.MASKS_FILE)
    write_entropy_csv(maps, out / H.ENTROPY_FILE)
    for stage, mask in zip(pipeline.stages, masks):
        print(f"stage {mask.stage_index}: K_ac={stage.num_ac} shape={mask.shape} features={mask.length}")


def cmd_train(args, cfg, out):
    train, _ = H.load_data(cfg.data)
    if args.model in ("head", "all"):
        pipeline = SaakPipeline.load(_require(out / H.PIPELINE_FILE, "fit"))
        masks = load_masks(_require(out / H.MASKS_FILE, "fit"))
        model = H.train_head(pipeline, masks, train, cfg.head)
        model.head.save(out / H.HEAD_FILE)
        print(f"head: train accuracy {100 * evaluate_accuracy(model, train):.4f}")
    if args.model in ("target", "all"):
        target = train_mlp(train, cfg.target_hidden, cfg.target)
        target.save(out / H.TARGET_FILE)
        print(f"target: train accuracy {100 * evaluate_accuracy(target, train):.4f}")


def cmd_attack(args, cfg, out):
    data = _test_set(args, cfg)
    adv, alog = attack_set(data, _target(out), args.method, H.attack_config(cfg, args.epsilon))
    name = args.name or (args.method if args.method in ("none", "deepfool")
                         else f"{args.method}-eps{args.epsilon:g}")
    images, _ = save_set(adv, out / name)
    alog.write_csv(out / f"{name}-log.csv")
    print(f"{images}: success rate {alog.success_rate:.4f}")


def cmd_defend(args, cfg, out):
    spec = DefenseSpec.parse(args.defense)
    data = load_set(args.input, cfg.data.num_classes)
    images, _ = save_set(apply_defense(data, spec), out / (args.name or f"{Path(args.input).name}-{spec.label}"))
    print(images)


def cmd_eval(args, cfg, out):
    data = _test_set(args, cfg)
    if args.model == "saak":
        for name in (H.PIPELINE_FILE, H.MASKS_FILE, H.HEAD_FILE):
            _require(out / name, "fit` and `train --model head")
        model = H.SaakClassifier.load(out)
    else:
        model = _target(out)
    print(f"{args.model} accuracy {100 * evaluate_accuracy(model, data):.4f}")


def cmd_report(args, cfg, out):
    path = Path(args.input) if args.input else _require(out / H.REPORT_FILE, "run")
    report = H.read_report(path)
    print(f"{'defense':<36} {'attack':<9} {'eps':>6} {'clean':>8} {'attack':>8} {'drop':>8}")
    for r in report.rows:
        eps = "" if r.epsilon is None else f"{r.epsilon:g}"
        print(f"{r.defense:<36} {r.attack:<9} {eps:>6} {r.c_clean:8.2f} {r.c_attack:8.2f} {r.drop:8.2f}")


def cmd_diag(args, cfg, out):
    pipeline = SaakPipeline.load(_require(out / H.PIPELINE_FILE, "fit"))
    clean = load_set(args.clean, cfg.data.num_classes) if args.clean else H.load_data(cfg.data)[1]
    if args.attacked:
        attacked = load_set(args.attacked, cfg.data.num_classes)
    else:
        attacked, _ = attack_set(clean, _target(out), "fgsm", H.attack_config(cfg, cfg.diag_epsilon))
    stage = cfg.diag_stage if args.stage is None else args.stage
    diag = H.spectral_diagnostics(clean, attacked, pipeline, stage)
    H.write_diagnostics(diag, out / H.DIAG_FILE)
    lower, upper = diag.half_means()
    print(f"stage {stage}: mean normalized RMSE lower half {lower:.4f}, upper half {upper:.4f}")


def cmd_run(args, cfg, out):
    report = H.run_experiment(cfg, out)
    print(f"{len(report.rows)} rows written to {out / H.REPORT_FILE}")


COMMANDS = {
    "fit": (cmd_fit, "fit the Saak pipeline and selection masks"),
    "train": (cmd_train, "train the softmax head and/or the target MLP"),
    "attack": (cmd_attack, "craft an adversarial set against the target MLP"),
    "defend": (cmd_defend, "apply a pre-processing defense to a stored set"),
    "eval": (cmd_eval, "accuracy of the Saak classifier or the target MLP"),
    "report": (cmd_report, "print a robustness report"),
    "diag": (cmd_diag, "spectral diagnostics of clean vs attacked coefficients"),
    "run": (cmd_run, "run the full experiment from one config file"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (key = value lines)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--output", help="artifact directory (default: config output)")
    common.add_argument("--data-dir", help="override data.dir")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="saakrobust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    ps = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}

    ps["train"].add_argument("--model", choices=("head", "target", "all"), default="all")
    ps["attack"].add_argument("--method", choices=ATTACK_METHODS, required=True)
    ps["attack"].add_argument("--epsilon", type=float, default=0.25)
    ps["attack"].add_argument("--input", help="stored set stem (default: config test set)")
    ps["attack"].add_argument("--name", help="output set stem inside the output directory")
    ps["defend"].add_argument("--defense", required=True, help="e.g. jpeg:q=90 or median:w=3")
    ps["defend"].add_argument("--input", required=True, help="stored set stem")
    ps["defend"].add_argument("--name", help="output set stem inside the output directory")
    ps["eval"].add_argument("--model", choices=("saak", "target"), default="saak")
    ps["eval"].add_argument("--input", help="stored set stem (default: config test set)")
    ps["report"].add_argument("--input", help="report CSV (default: <output>/report.csv)")
    ps["diag"].add_argument("--clean", help="stored clean set stem (default: config test set)")
    ps["diag"].add_argument("--attacked", help="stored attacked set stem (default: FGSM at diag.epsilon)")
    ps["diag"].add_argument("--stage", type=int, help="0-based stage index (default: diag.stage)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _load_config(args)
        out = _outdir(args, cfg)
        COMMANDS[args.command][0](args, cfg, out)
    except (CliError, ConfigError, H.ExperimentError, OSError, ValueError) as exc:
        print(f"saakrobust {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
