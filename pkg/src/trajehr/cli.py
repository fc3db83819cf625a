"""Command-line interface: the full pipeline as one executable.

Subcommands: gen-cohort, pretrain, finetune, evaluate, grad-check, explain.
Every run writes its outputs plus a manifest.json (command, version, seed,
resolved config) into --out. Exit codes: 0 success, 1 validation/config
error, 2 runtime error; unknown flags fail fast with exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_manifest, model_from_manifest, save_checkpoint
from .cohort import GeneratorSpec, TASKS, build_vocabulary, generate_cohort, read_cohort, write_cohort
from .config import TrainConfig, load_config
from .errors import CheckpointMismatch, ParseError, TrajehrError, ValidationError
from .interpret import extract_attention, render_report
from .metrics import aggregate_reports
from .network import Model, ModelHyper, grad_check
from .objectives import finetune_loss, pretrain_loss, sample_mask_plan
from .ontology import load_vocabulary, save_vocabulary
from .trainer import evaluate_model, finetune, pretrain

VERSION_STRING = f"trajehr-{__version__}"


class _CliError(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on bad flags, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _CliError(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="trajehr", description=__doc__)
    parser.add_argument("--version", action="version", version=VERSION_STRING)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="worker processes (cohort generation)")
        if config:
            p.add_argument("--cohort", required=True, help="cohort JSONL file")
            p.add_argument("--vocab", required=True, help="vocabulary JSON file")
            p.add_argument("--config", default=None, help="key=value training config file")
            p.add_argument("--alpha", type=float, default=None, help="masking rate override")
            p.add_argument("--k", type=int, default=None, help="chapter-token threshold override")
            p.add_argument("--lambda-anc", type=float, default=None, dest="lambda_anc")
            p.add_argument("--lambda-cov", type=float, default=None, dest="lambda_cov")

    p = sub.add_parser("gen-cohort", help="generate a synthetic cohort + vocabulary")
    p.add_argument("--spec", default=None, help="generator spec JSON (defaults to the built-in spec)")
    common(p, config=False)

    p = sub.add_parser("pretrain", help="stage 1: masked-code + ancestor pretraining")
    common(p)

    p = sub.add_parser("finetune", help="stage 2: task fine-tuning (optionally from a checkpoint)")
    common(p)
    p.add_argument("--task", choices=TASKS, default=None)
    p.add_argument("--init", default=None, help="pretrained checkpoint to initialize from")
    p.add_argument("--seeds", type=int, default=1, help="number of seeded runs to aggregate")

    p = sub.add_parser("evaluate", help="score a checkpoint on a cohort file")
    common(p)
    p.add_argument("--task", choices=TASKS, default=None)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("grad-check", help="finite-difference verification of all gradients")
    common(p, config=False)

    p = sub.add_parser("explain", help="export attention views for one patient")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--threshold", type=float, default=0.001)
    p.add_argument("--format", choices=("json", "dot"), default="json", dest="fmt")
    return parser


def _resolve_config(args) -> TrainConfig:
    config = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    for key in ("seed", "alpha", "k", "lambda_anc", "lambda_cov", "task"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return config.replace(**overrides) if overrides else config


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args, config: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": VERSION_STRING,
        "args": {k: v for k, v in vars(args).items() if k != "command"},
    }
    if config is not None:
        manifest["config"] = config.to_dict()
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")


def _load_world(args):
    vocab = load_vocabulary(args.vocab)
    cohort = read_cohort(args.cohort, vocab)
    return vocab, cohort


def _cmd_gen_cohort(args) -> int:
    out = _outdir(args)
    spec = GeneratorSpec.from_json(args.spec) if args.spec else GeneratorSpec()
    seed = args.seed if args.seed is not None else 0
    vocab = build_vocabulary(spec)
    cohort = generate_cohort(spec, seed=seed, workers=args.workers)
    write_cohort(cohort, out / "cohort.jsonl")
    save_vocabulary(vocab, out / "vocab.json")
    spec.to_json(out / "spec.json")
    _write_manifest(out, "gen-cohort", args, extra={"seed": seed, "n_patients": len(cohort)})
    print(f"wrote {len(cohort)} patients to {out / 'cohort.jsonl'}")
    return 0


def _cmd_pretrain(args) -> int:
    out = _outdir(args)
    config = _resolve_config(args)
    vocab, cohort = _load_world(args)
    result = pretrain(cohort, vocab, config, log_path=out / "loss_log.jsonl")
    save_checkpoint(result.model, out / "best.ckpt")
    with open(out / "history.json", "w", encoding="utf-8") as fh:
        json.dump({"history": result.history, "best_epoch": result.best_epoch,
                   "stopped_epoch": result.stopped_epoch}, fh, indent=2)
    _write_manifest(out, "pretrain", args, config=config)
    print(f"pretrain: best epoch {result.best_epoch} of {result.stopped_epoch}, "
          f"val loss {min(h['val_loss'] for h in result.history):.4f}")
    return 0


def _cmd_finetune(args) -> int:
    out = _outdir(args)
    config = _resolve_config(args)
    vocab, cohort = _load_world(args)
    init_manifest = load_manifest(args.init) if args.init else None
    reports = []
    for i in range(args.seeds):
        run_config = config.replace(seed=config.seed + i)
        run_dir = out / f"seed{run_config.seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        result = finetune(cohort, vocab, run_config, init_manifest=init_manifest,
                          log_path=run_dir / "loss_log.jsonl")
        save_checkpoint(result.model, run_dir / "best.ckpt")
        reports.append(result.report)
        print(f"seed {run_config.seed}: f1 {result.report.f1:.2f} auroc {result.report.auroc:.2f} "
              f"auprc {result.report.auprc:.2f}"
              + (f" macro {result.report.macro_auprc:.2f}" if result.report.macro_auprc is not None else ""))
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(aggregate_reports(reports), fh, indent=2)
    _write_manifest(out, "finetune", args, config=config)
    return 0


def _cmd_evaluate(args) -> int:
    from .trainer import TASK_WIDTHS

    out = _outdir(args)
    config = _resolve_config(args)
    vocab, cohort = _load_world(args)
    model = model_from_manifest(load_manifest(args.ckpt), vocab)
    if model.hyper.task_width != TASK_WIDTHS[config.task]:
        raise CheckpointMismatch(
            f"checkpoint task head width {model.hyper.task_width} does not fit task "
            f"{config.task!r} (needs {TASK_WIDTHS[config.task]})"
        )
    report = evaluate_model(model, cohort, config.task)
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(aggregate_reports([report]), fh, indent=2)
    _write_manifest(out, "evaluate", args, config=config)
    print(f"evaluate[{config.task}]: f1 {report.f1:.2f} auroc {report.auroc:.2f} auprc {report.auprc:.2f}")
    return 0


def _cmd_grad_check(args) -> int:
    """Verify gradients on a small double-precision model with planted data."""
    from .cohort import build_vocabulary as build
    out = _outdir(args)
    seed = args.seed if args.seed is not None else 0
    spec = GeneratorSpec(n_patients=4, diagnosis_codes_per_chapter=3, n_medication=3,
                         n_lab=3, n_procedure=2, chapters=[1, 5, 7])
    vocab = build(spec)
    cohort = generate_cohort(spec, seed=seed)
    traj = cohort[0]
    model = Model(vocab, ModelHyper(hidden_dim=8, n_layers=2, n_gat_blocks=2, n_heads=2,
                                    max_visits=6, max_seq_len=96, k=2, task_width=1), seed=seed)
    plan = sample_mask_plan(traj, vocab, 0.5, seed=seed)
    label = [float(traj.labels["plos"])]

    closures = {
        "pretrain": lambda: pretrain_loss(
            model.forward(traj, mode="pretrain", masked=plan.all_selected), plan, 0.05, 0.005).total,
        "finetune": lambda: finetune_loss(model.forward(traj, mode="finetune"), label, 0.005).total,
    }
    results = {}
    ok = True
    for name, closure in closures.items():
        report = grad_check(model.params, closure, epsilon=1e-5, tolerance=1e-4)
        results[name] = {"max_error": report.max_error, "failures": report.failures,
                         "group_errors": report.group_errors}
        status = "ok" if report.passed else "FAIL"
        print(f"{name}: max rel err {report.max_error:.3e} over {len(report.group_errors)} groups [{status}]")
        ok = ok and report.passed
    with open(out / "grad_check.json", "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2)
    _write_manifest(out, "grad-check", args, extra={"seed": seed})
    if not ok:
        sys.stderr.write("grad-check: analytic gradients disagree with finite differences\n")
        return 2
    return 0


def _cmd_explain(args) -> int:
    out = _outdir(args)
    config = _resolve_config(args)
    vocab, cohort = _load_world(args)
    model = model_from_manifest(load_manifest(args.ckpt), vocab)
    matches = [t for t in cohort if t.patient_id == args.patient]
    if not matches:
        raise ValidationError(f"patient {args.patient!r} not found in {args.cohort}")
    trace = model.forward(matches[0], mode="finetune")
    report = extract_attention(trace, patient_id=args.patient, threshold=args.threshold)
    suffix = "json" if args.fmt == "json" else "dot"
    render_report(report, out / f"attention.{suffix}", fmt=args.fmt)
    _write_manifest(out, "explain", args, config=config)
    print(f"explain: {report.edge_count()} edges retained above {args.threshold}")
    return 0


_COMMANDS = {
    "gen-cohort": _cmd_gen_cohort,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "grad-check": _cmd_grad_check,
    "explain": _cmd_explain,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _CliError as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except SystemExit as exc:  # --help / --version
        return exc.code if isinstance(exc.code, int) else 0
    except (ParseError, ValidationError, CheckpointMismatch, FileNotFoundError) as exc:
        sys.stderr.write(f"trajehr: {type(exc).__name__}: {exc}\n")
        return 1
    except TrajehrError as exc:
        sys.stderr.write(f"trajehr: {type(exc).__name__}: {exc}\n")
        return 2
    except OSError as exc:
        sys.stderr.write(f"trajehr: io error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
