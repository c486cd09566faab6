"""Command-line entry point: ``safer <command> [options]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .conformal import bh_select, conformal_pvalues, estimate_fdr_power
from .errors import SaferError
from .metrics import evaluate_model
from .outcomes import train_outcome_model
from .pipeline import (RunConfig, ScoreTable, case_study_cohort, load_config, parse_grid, prepare,
                       score_table)
from .synthgen import generate_cohort, read_cohort, split_cohort, write_cohort
from .teacher import FusionParams, TrainLog, train_teacher
from .uncertainty import (StudentParams, cohort_trajectories, risk_aware_finetune,
                          train_student_on_cohort, uncertainty_records, write_uncertainty_csv)

COMMANDS = ("gen", "split", "train", "student", "finetune", "calibrate", "select", "sweep", "eval",
            "case-study")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(command, argv, cfg: RunConfig, inputs, outputs, started, target, extra=None):
    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed,
        "config": cfg.snapshot(),
        "code_version": __version__,
        "inputs": {str(p): sha256(p) for p in inputs if p},
        "outputs": {str(p): sha256(p) for p in outputs if p},
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
        **(extra or {}),
    }
    path = Path(str(target) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# -- subcommands: each returns (inputs, outputs, manifest anchor) ----------------


def cmd_gen(args, cfg):
    write_cohort(generate_cohort(cfg.cohort_config()), args.out)
    return [], [args.out], args.out


def cmd_split(args, cfg):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = split_cohort(read_cohort(args.cohort), cfg.split, cfg.stage_seed("split"))
    paths = [out / f"{name}.jsonl" for name in ("train", "cal", "test")]
    for part, path in zip(parts, paths):
        write_cohort(part, path)
    return [args.cohort], paths, out / "split"


def cmd_train(args, cfg):
    train = read_cohort(args.train)
    log = TrainLog()
    teacher = train_teacher(train, cfg.teacher_init(train), cfg.teacher_train(), log)
    teacher.save(args.out)
    outputs = [args.out]
    if args.log:
        log.to_csv(args.log)
        outputs.append(args.log)
    return [args.train], outputs, args.out


def cmd_student(args, cfg):
    teacher = FusionParams.load(args.teacher)
    log = TrainLog()
    student = train_student_on_cohort(teacher, read_cohort(args.train), cfg.student_hyper(), log)
    student.save(args.out)
    outputs = [args.out]
    if args.log:
        log.to_csv(args.log)
        outputs.append(args.log)
    return [args.teacher, args.train], outputs, args.out


def cmd_finetune(args, cfg):
    teacher, student = FusionParams.load(args.teacher), StudentParams.load(args.student)
    train = read_cohort(args.train)
    records, _ = uncertainty_records(teacher, student, train)
    log = TrainLog()
    tuned = risk_aware_finetune(teacher, train, student, cfg.finetune_hyper(), records, log)
    tuned.save(args.out)
    outputs = [args.out]
    if args.uncertainty:
        write_uncertainty_csv(records, args.uncertainty)
        outputs.append(args.uncertainty)
    if args.log:
        log.to_csv(args.log)
        outputs.append(args.log)
    return [args.teacher, args.student, args.train], outputs, args.out


def cmd_calibrate(args, cfg):
    teacher, student = FusionParams.load(args.teacher), StudentParams.load(args.student)
    table = score_table(teacher, student, read_cohort(args.train), read_cohort(args.cal),
                        read_cohort(args.test), cfg.conformal)
    table.to_csv(args.out)
    args.extra = {"score_bound": table.bound, "score_floor": table.lower}
    print(f"score bound {table.bound:.6g} (training range starts at {table.lower:.6g})")
    return [args.teacher, args.student, args.train, args.cal, args.test], [args.out], args.out


def cmd_select(args, cfg):
    table = ScoreTable.from_csv(args.scores)
    alpha = cfg.conformal.alpha if args.alpha is None else args.alpha
    c = cfg.conformal.c if args.c is None else args.c
    cal = np.array([s == "cal" for s in table.split])
    test_idx = np.nonzero(~cal)[0]
    if not cal.any() or not len(test_idx):
        raise SaferError("score table needs both calibration and test rows")
    u = np.random.default_rng(np.random.SeedSequence([cfg.stage_seed("conformal"), 5, 0])) \
        .random(len(test_idx))
    p = conformal_pvalues(table.kappa_pred[cal], table.kappa_norm[cal] >= c,
                          table.kappa_pred[test_idx], u)
    null = table.kappa_norm[test_idx] >= c
    result = bh_select(p, alpha, is_null=null)
    chosen = np.zeros(len(p), dtype=bool)
    chosen[result.selected] = True
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("patient_id,kappa_norm,kappa_pred,p_value,selected,is_null\n")
        for j, i in enumerate(test_idx):
            fh.write(f"{table.patient_id[i]},{table.kappa_norm[i]:.9g},{table.kappa_pred[i]:.9g},"
                     f"{p[j]:.9g},{int(chosen[j])},{int(null[j])}\n")
    print(f"alpha={alpha:g} c={c:g}: selected {result.k} of {len(p)}; "
          f"FDP {result.fdp:.3f}, power {result.power:.3f}")
    return [args.scores], [args.out], args.out


def cmd_sweep(args, cfg):
    inputs = []
    if args.scores:
        table = ScoreTable.from_csv(args.scores)
        inputs.append(args.scores)
    else:
        prep = prepare(cfg)
        table = score_table(prep.teacher, prep.student, prep.train, prep.cal, prep.test,
                            cfg.conformal)
    alphas = parse_grid(args.alphas) if args.alphas else cfg.conformal.alphas
    cs = parse_grid(args.cs) if args.cs else cfg.conformal.cs
    reps = args.reps or cfg.conformal.replicates
    grid = estimate_fdr_power(table.pool(), alphas, cs, reps, cfg.stage_seed("conformal"),
                              threads=args.threads or cfg.threads)
    grid.to_csv(args.out)
    return inputs, [args.out], args.out


def cmd_eval(args, cfg):
    teacher = FusionParams.load(args.teacher)
    cohort = read_cohort(args.cohort)
    inputs = [args.teacher, args.cohort]
    outcome_model = None
    if not args.no_outcome:
        source = read_cohort(args.outcome_train) if args.outcome_train else cohort
        if args.outcome_train:
            inputs.append(args.outcome_train)
        outcome_model = train_outcome_model(source, cfg.outcome_hyper())
    report = evaluate_model(teacher, cohort, args.subset, outcome_model,
                            seed=cfg.stage_seed("outcome"))
    report.to_json(args.out)
    outputs = [args.out]
    if args.csv:
        report.to_csv(args.csv)
        outputs.append(args.csv)
    print(report.to_json())
    return inputs, outputs, args.out


def cmd_case_study(args, cfg):
    inputs = []
    if args.teacher and args.student:
        teacher, student = FusionParams.load(args.teacher), StudentParams.load(args.student)
        inputs += [args.teacher, args.student]
    else:
        prep = prepare(cfg)
        teacher, student = prep.teacher, prep.student
    n_surv = cfg.case_study.survivors if args.survivors is None else args.survivors
    n_dec = cfg.case_study.deceased if args.deceased is None else args.deceased
    cohort = case_study_cohort(cfg, n_surv, n_dec)
    windows = ([int(w) for w in parse_grid(args.windows)] if args.windows
               else list(range(1, cohort.config.seq_len + 1)))
    traj = cohort_trajectories(cohort, teacher, student, windows)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("window,survivors_mean_kappa,deceased_mean_kappa\n")
        for w, s, d in zip(traj["window"], traj["survivors"], traj["deceased"]):
            fh.write(f"{w},{s:.9g},{d:.9g}\n")
    return inputs, [args.out], args.out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safer", description="Uncertainty-aware treatment recommendation "
                     "with conformal FDR control on synthetic cohorts.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file (defaults apply when omitted)")
        p.add_argument("--threads", type=int, default=None, help="worker threads for replicates")
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p = add("split", cmd_split, "patient-level train/cal/test split")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out-dir", required=True)
    p = add("train", cmd_train, "train the fusion teacher")
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p = add("student", cmd_student, "train the survivor-only student")
    p.add_argument("--teacher", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p = add("finetune", cmd_finetune, "risk-aware fine-tuning of the teacher")
    for flag in ("--teacher", "--student", "--train", "--out"):
        p.add_argument(flag, required=True)
    p.add_argument("--uncertainty", help="write the per-patient uncertainty table here")
    p.add_argument("--log")
    p = add("calibrate", cmd_calibrate, "score calibration and test patients")
    for flag in ("--teacher", "--student", "--train", "--cal", "--test", "--out"):
        p.add_argument(flag, required=True)
    p = add("select", cmd_select, "conformal p-values and BH selection")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--c", type=float)
    p = add("sweep", cmd_sweep, "Monte Carlo FDR and power over an (alpha, c) grid")
    p.add_argument("--scores", help="score table from 'calibrate'; built from the config if omitted")
    p.add_argument("--alphas", help="start:stop:step or comma list")
    p.add_argument("--cs", help="start:stop:step or comma list")
    p.add_argument("--reps", type=int)
    p.add_argument("--out", required=True)
    p = add("eval", cmd_eval, "ranking metrics and mortality reduction")
    p.add_argument("--teacher", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.add_argument("--subset", choices=("survivors", "all"), default="survivors")
    p.add_argument("--outcome-train", help="cohort for the outcome model (default: --cohort)")
    p.add_argument("--no-outcome", action="store_true")
    p = add("case-study", cmd_case_study, "uncertainty trajectories over prefix windows")
    p.add_argument("--survivors", type=int)
    p.add_argument("--deceased", type=int)
    p.add_argument("--windows", help="window lengths, start:stop:step or comma list")
    p.add_argument("--teacher")
    p.add_argument("--student")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return 1
    started = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.threads is not None:
            cfg.threads = args.threads
        inputs, outputs, anchor = args.func(args, cfg)
        if args.config:
            inputs = [args.config, *inputs]
        write_manifest(args.command, argv, cfg, inputs, outputs, started, anchor,
                       getattr(args, "extra", None))
    except (SaferError, OSError, ValueError, ArithmeticError) as exc:
        print(f"safer {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
