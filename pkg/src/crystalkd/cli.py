"""Command line entry point: ``python -m crystalkd <command> [flags]``.

Commands::

    gen-synthetic  write a synthetic JSON Lines corpus
    pretrain       pre-train a teacher; writes teacher.ckpt and pretrain_trace.csv
    distill        train a student (``--delta 1`` is the plain supervised baseline);
                   writes student.ckpt, distill_trace.csv and report.txt
    eval           MAE of a student checkpoint on a dataset
    gradcheck      finite-difference check of both training objectives

Every flag is also a key of the ``--config`` file. Precedence is
defaults < config file < flags. Errors print one line ``error[<tag>]: ...``
on stderr and exit with 2 (usage), 3 (config), 4 (data) or 5 (numerical).
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .config import TrainConfig, read_config_file
from .distill import DistillConfig, eval_mae, eval_mae_by_source, train_predictor, write_metrics
from .encoder import EncoderConfig
from .errors import ConfigError, CrystalKDError, DataError, NumericalError, UsageError
from .graph import FeatureLayout, generate_synthetic, load_dataset, save_dataset
from .gradcheck import run_gradcheck, summarize
from .pretrain import PretrainAborted, run_pretrain, space_group_accuracy, write_trace

OPTIM = ("lr", "beta1", "beta2", "adam_eps", "epochs", "batch_size", "seed")
ARCH = ("num_layers", "embed_dim")
OBJECTIVE = ("alpha", "beta", "gamma", "lam", "tau", "mask", "neg_ratio")
STUDENT = ("student_layers", "student_dim", "delta")

# flags accepted by each command (all are TrainConfig fields)
COMMANDS = {
    "gen-synthetic": ("out", "n", "seed"),
    "pretrain": ("data", "out") + ARCH + OBJECTIVE + OPTIM,
    "distill": ("data", "val_data", "test_data", "extra_data", "teacher", "out") + ARCH + STUDENT + OPTIM,
    "eval": ("data", "student"),
    "gradcheck": ("tolerance", "fd_eps", "gc_seeds", "gc_samples", "seed") + ARCH + OBJECTIVE + STUDENT,
}
REQUIRED = {
    "gen-synthetic": ("out",),
    "pretrain": ("data", "out"),
    "distill": ("data", "out"),
    "eval": ("data", "student"),
    "gradcheck": (),
}
HELP = {
    "gen-synthetic": "write a synthetic JSON Lines corpus",
    "pretrain": "pre-train a teacher encoder",
    "distill": "train a property predictor, distilled from a teacher",
    "eval": "report the MAE of a student checkpoint",
    "gradcheck": "finite-difference check of both objectives",
}


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(field: str) -> str:
    return "--lambda" if field == "lam" else "--" + field.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crystalkd", description="Crystal graph pre-training and distillation.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}",
                                parser_class=_Parser)
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", metavar="FILE", help="key=value file with TrainConfig keys")
        for key in keys:
            p.add_argument(_flag(key), dest=key, default=None, metavar=str(types[key]).split(" |")[0].upper())
    return parser


def parse_cli(argv: Sequence[str]) -> tuple[str, TrainConfig]:
    """(command, config) with defaults < config file < flags applied."""
    argv = list(argv)
    if not argv:
        raise UsageError(f"missing command; choose from {', '.join(COMMANDS)}")
    if not argv[0].startswith("-") and argv[0] not in COMMANDS:
        raise UsageError(f"unknown command {argv[0]!r}; choose from {', '.join(COMMANDS)}")
    ns = build_parser().parse_args(argv)
    if ns.command is None:
        raise UsageError(f"missing command; choose from {', '.join(COMMANDS)}")
    values = read_config_file(ns.config) if ns.config else {}
    config = TrainConfig.from_mapping(values)
    flags = {k: v for k, v in vars(ns).items() if k in COMMANDS[ns.command] and v is not None}
    config = TrainConfig.from_mapping(flags, base=config)
    for key in REQUIRED[ns.command]:
        if getattr(config, key) is None:
            raise UsageError(f"{ns.command}: {_flag(key)} is required")
    return ns.command, config


# --------------------------------------------------------------------------
# commands

def _load(path: str, source: str | None = None):
    try:
        return load_dataset(path, source=source)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from None


def _outdir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc.strerror}") from None
    return out


def cmd_gen_synthetic(config: TrainConfig, out=None) -> int:
    out = out or sys.stdout
    graphs = generate_synthetic(config.n, config.seed)
    path = Path(config.out)
    if path.parent != Path(""):
        _outdir(str(path.parent))
    save_dataset(graphs, path)
    print(f"wrote {len(graphs)} graphs to {path}", file=out)
    return 0


def cmd_pretrain(config: TrainConfig, out=None) -> int:
    out = out or sys.stdout
    dataset = _load(config.data)
    outdir = _outdir(config.out)
    layout = FeatureLayout()
    try:
        result = run_pretrain(dataset, config)
    except PretrainAborted as exc:
        enc_cfg = _encoder_for(dataset, config.num_layers, config.embed_dim)
        ckpt.save_checkpoint(exc.last_good, ckpt.model_meta("teacher", enc_cfg, layout, epochs=len(exc.trace)),
                             outdir / "teacher.ckpt")
        write_trace(exc.trace, outdir / "pretrain_trace.csv")
        raise
    meta = ckpt.model_meta("teacher", result.encoder, layout, epochs=len(result.trace))
    ckpt.save_checkpoint(result.store, meta, outdir / "teacher.ckpt")
    write_trace(result.trace, outdir / "pretrain_trace.csv")
    first, last = result.trace[0], result.trace[-1]
    line = f"epochs={len(result.trace)} loss_first={first.total:.17g} loss_last={last.total:.17g}"
    if any(g.space_group is not None for g in dataset):
        line += f" sg_train_acc={space_group_accuracy(result.store, dataset, result.encoder):.17g}"
    print(line, file=out)
    return 0


def _encoder_for(dataset, num_layers, embed_dim):
    return EncoderConfig(num_layers, embed_dim, dataset[0].feature_dim)


def cmd_distill(config: TrainConfig, out=None) -> int:
    out = out or sys.stdout
    layout = FeatureLayout()
    teacher = None
    if config.delta < 1:
        if config.teacher is None:
            raise UsageError("distill: --teacher is required unless --delta 1")
        teacher, t_layout = ckpt.load_teacher(config.teacher)
        if t_layout != layout:
            raise ConfigError(f"teacher feature layout {t_layout.to_dict()} differs from the data layout")
    mixed = config.extra_data is not None
    train = _load(config.data, source="data" if mixed else None)
    if mixed:
        train = train + _load(config.extra_data, source="extra")
    val = _load(config.val_data) if config.val_data else None
    test = _load(config.test_data) if config.test_data else None

    dcfg = DistillConfig.from_config(config)
    result = train_predictor(train, val, teacher, dcfg)
    outdir = _outdir(config.out)
    ckpt.save_student(result.student, layout, outdir / "student.ckpt")
    write_metrics(result.trace, outdir / "distill_trace.csv")

    fields = [f"best_epoch={result.best_epoch}"]
    if val:
        fields.append(f"val_mae={eval_mae(result.student, val):.17g}")
    if mixed:
        for src, mae in eval_mae_by_source(result.student, train).items():
            fields.append(f"train_mae[{src}]={mae:.17g}")
    if test:
        fields.append(f"test_mae={eval_mae(result.student, test):.17g}")
    line = " ".join(fields)
    (outdir / "report.txt").write_text(line + "\n", encoding="utf-8")
    print(line, file=out)
    return 0


def cmd_eval(config: TrainConfig, out=None) -> int:
    out = out or sys.stdout
    student, layout = ckpt.load_student(config.student)
    if layout != FeatureLayout():
        raise ConfigError(f"student feature layout {layout.to_dict()} differs from the data layout")
    data = _load(config.data)
    if data[0].feature_dim != student.encoder.feature_dim:
        raise ConfigError(
            f"student expects feature width {student.encoder.feature_dim}, data has {data[0].feature_dim}")
    print(f"mae={eval_mae(student, data):.17g} n={len(data)}", file=out)
    return 0


def run_gradcheck_command(config: TrainConfig, out=None) -> tuple[int, dict[str, float]]:
    """Check both objectives; print the worst relative error per parameter group.

    Returns (exit status, report). The status is 0 when every group passes.
    """
    out = out or sys.stdout
    out = out or sys.stdout
    checks = run_gradcheck(config)
    worst = summarize(checks)
    for key, err in worst.items():
        if np.isnan(err):
            verdict = "FAIL (no sample above the noise floor)"
        else:
            verdict = "ok" if err < config.tolerance else "FAIL"
        print(f"{key} {err:.3e} {verdict}", file=out)
    unresolved = sum(c.report.unresolved() for c in checks)
    samples = sum(len(c.report.samples) for c in checks)
    print(f"samples={samples} below_noise_floor={unresolved} tolerance={config.tolerance:g}", file=out)
    failed = [k for k, err in worst.items() if not err < config.tolerance]
    if failed:
        more = f" and {len(failed) - 1} more" if len(failed) > 1 else ""
        print(f"error[numerical]: gradient check failed for {failed[0]}{more}", file=sys.stderr)
        return NumericalError.exit_code, worst
    return 0, worst


def cmd_gradcheck(config: TrainConfig, out=None) -> int:
    return run_gradcheck_command(config, out)[0]


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if list(argv) in (["-h"], ["--help"]):
        build_parser().print_help()
        return 0
    try:
        command, config = parse_cli(argv)
        return HANDLERS[command](config)
    except SystemExit as exc:  # --help inside a subcommand
        return int(exc.code or 0)
    except CrystalKDError as exc:
        msg = " ".join(str(exc).split())
        print(f"error[{exc.tag}]: {msg}", file=sys.stderr)
        return exc.exit_code
