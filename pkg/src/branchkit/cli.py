"""Command-line entry point: ``branchkit <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 run-time failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3

ARCH_ALIASES = {"conformer": "conformer", "e_branchformer": "e_branchformer", "ebranchformer": "e_branchformer"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this CLI reserves 2 for failed checks."""

    def error(self, message):
        self.print_help(sys.stderr)
        sys.stderr.write(f"\n{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _arch_list(text: str) -> list[str]:
    out = []
    for name in text.split(","):
        key = name.strip().lower().replace("-", "_")
        if key not in ARCH_ALIASES:
            raise argparse.ArgumentTypeError(f"unknown architecture {name!r}")
        out.append(ARCH_ALIASES[key])
    return out


def _vocab_arg(text: str):
    if text.lower() == "none":
        return None
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("vocabulary size must be positive")
    return value


# ---------------------------------------------------------------------------
# subcommands


def cmd_profile(args) -> int:
    from .encoders import PRESETS, preset
    from .profiler import diff_reports, profile_report

    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(sorted(PRESETS))}")
    report = profile_report(preset(args.preset), args.seconds, args.frame_rate, args.feat_dim, args.vocab)
    if args.format == "json":
        print(report.to_json())
    elif args.format == "csv":
        writer = csv.writer(sys.stdout)
        writer.writerow(["module", "params", "macs"])
        for m in report.modules:
            writer.writerow([m["name"], m["params"], m["macs"]])
    else:
        print(report.to_text())

    if args.compare:
        if args.compare not in PRESETS:
            raise UsageError(f"unknown preset {args.compare!r}")
        other = profile_report(preset(args.compare), args.seconds, args.frame_rate, args.feat_dim, args.vocab)
        print(f"\ndifferences {args.preset} -> {args.compare}:")
        for row in diff_reports(report, other):
            a, b = row["a"] or {"params": 0, "macs": 0}, row["b"] or {"params": 0, "macs": 0}
            print(f"  {row['name']:<22} params {a['params']:>12,d} -> {b['params']:>12,d}"
                  f"   MACs {a['macs']:>16,d} -> {b['macs']:>16,d}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "profile.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["module", "params", "macs"])
            for m in report.modules:
                writer.writerow([m["name"], m["params"], m["macs"]])
        (out / "profile.json").write_text(report.to_json())
        from .plotting import plot_profile

        plot_profile(report, out / "profile.png")
    return EXIT_OK


def _load_run_config(args):
    from .config import default_config, load_config

    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = load_config(path)
        except ValueError as exc:
            raise UsageError(f"invalid config {path}: {exc}") from None
    else:
        cfg = default_config(ARCH_ALIASES[getattr(args, "arch", None) or "e_branchformer"])
    changes = {}
    for key in ("epochs", "seed", "peak_lr", "warmup_steps"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    return cfg.with_train(**changes) if changes else cfg


def cmd_train(args) -> int:
    from .harness import train

    cfg = _load_run_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force to reuse it)")
    record = train(cfg, out, run_id=args.run_id, plot=not args.no_plot)
    status = f"DIVERGED ({record.divergence_reason})" if record.diverged else "ok"
    ter = record.final_ter
    print(f"run {record.run_id}: {status}; epochs {len(record.epochs)}; "
          f"final val loss {record.final_val_loss}; final TER {ter if ter is None else f'{ter:.4f}'}; "
          f"{record.wall_time:.1f}s")
    print(f"wrote {out / 'run.json'}, {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_stability(args) -> int:
    import dataclasses

    from .harness import format_stability_table, stability_experiment

    if args.seeds < 2:
        raise UsageError("--seeds must be at least 2")
    base = _load_run_config(args)
    if args.n_train is not None:
        base = base.replace(task=dataclasses.replace(base.task, n_train=args.n_train))
    configs = {arch: base.with_model(kind=arch) for arch in args.archs}
    result = stability_experiment(configs, args.lrs, args.seeds, args.out, first_seed=args.first_seed,
                                  plot=not args.no_plot)
    print(format_stability_table(result["cells"]))
    print(f"wrote {Path(args.out) / 'summary.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import GRAD_TOL, GRADCHECK_CASES, run_gradcheck

    names = args.case or [n for n in GRADCHECK_CASES if n != "encoder_stack"]
    unknown = [n for n in names if n not in GRADCHECK_CASES]
    if unknown:
        raise UsageError(f"unknown case(s) {unknown}; choose from {', '.join(GRADCHECK_CASES)}")
    failed = False
    for name in names:
        worst = max(run_gradcheck(name, seed, args.eps) for seed in range(args.seeds))
        ok = worst < args.tol
        failed |= not ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name:<22} max rel. err {worst:.2e} over {args.seeds} seeds")
    print(f"tolerance {args.tol:g} (default {GRAD_TOL:g}), eps {args.eps:g}")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_verify(args) -> int:
    from .checks import VERIFY_CHECKS, verify_suite

    names = args.checks or None
    if names:
        unknown = [n for n in names if n not in VERIFY_CHECKS]
        if unknown:
            raise UsageError(f"unknown check(s) {unknown}; choose from {', '.join(VERIFY_CHECKS)}")
    results = verify_suite(names)
    for r in results:
        print(r.line())
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return EXIT_VERIFY if n_fail else EXIT_OK


def cmd_decode(args) -> int:
    from .config import config_from_dict
    from .ctc import ctc_greedy_decode, format_decoded, token_error_rate
    from .harness import init_model, make_datasets, model_log_probs
    from .nn import load_state
    from . import autodiff as ad

    run_dir = Path(args.run_dir)
    cfg_path, ckpt = run_dir / "config.json", run_dir / "checkpoint"
    if not cfg_path.is_file() or not ckpt.is_dir():
        raise UsageError(f"{run_dir} is not a training output directory (needs config.json and checkpoint/)")
    raw = json.loads(cfg_path.read_text())
    cfg = config_from_dict({"model": {"preset": "toy-" + raw["model"]["kind"].replace("_", ""), **raw["model"]},
                            "task": raw["task"], "train": raw["train"], "specaug": raw["specaug"]})
    vocab = None
    if args.vocab:
        vocab = Path(args.vocab).read_text().split()
        if len(vocab) < cfg.task.vocab_size:
            raise UsageError(f"vocab file lists {len(vocab)} tokens, model emits {cfg.task.vocab_size}")
    model = init_model(cfg)
    load_state(model, ckpt)

    train_set, valid_set = make_datasets(cfg.task)
    data = valid_set if args.split == "valid" else train_set
    limit = len(data) if args.limit is None else min(args.limit, len(data))
    refs, hyps = [], []
    with ad.no_grad():
        for start in range(0, limit, 16):
            batch = data.batch(range(start, min(start + 16, limit)))
            lp, lengths = model_log_probs(model, cfg, batch.feats, batch.feat_lengths, "eval")
            hyps.extend(ctc_greedy_decode(lp, lengths))
            refs.extend(batch.label_lists())
    for i, line in enumerate(format_decoded(hyps, vocab).splitlines()):
        print(f"utt{i:04d}\t{line}")
    print(f"TER {token_error_rate(refs, hyps):.4f} over {len(refs)} utterances", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="branchkit",
        description="Conformer / E-Branchformer encoders: profiling, training and verification.",
        epilog="exit codes: 0 success, 1 usage error, 2 verification failure, 3 run-time failure",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", metavar="{profile,train,stability,gradcheck,decode,verify}",
                                parser_class=_Parser)

    p = sub.add_parser("profile", help="parameter and MAC accounting for an encoder preset")
    p.add_argument("--preset", required=True)
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--frame-rate", type=float, default=100.0)
    p.add_argument("--feat-dim", type=int, default=None)
    p.add_argument("--vocab", type=_vocab_arg, default=500, help="CTC vocabulary size, or 'none' to drop the head")
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.add_argument("--compare", metavar="PRESET", help="also print rows that differ from another preset")
    p.add_argument("--out", help="directory for profile.csv, profile.json and profile.png")
    p.set_defaults(func=cmd_profile)

    def run_options(q):
        q.add_argument("--config", help="TOML run config (defaults to the toy setup)")
        q.add_argument("--epochs", type=int)
        q.add_argument("--peak-lr", type=float)
        q.add_argument("--warmup-steps", type=int)
        q.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("train", help="train one model on the synthetic task")
    run_options(p)
    p.add_argument("--arch", choices=sorted(ARCH_ALIASES), help="toy architecture when no --config is given")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--run-id")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stability", help="seed sweep over architectures and peak learning rates")
    run_options(p)
    p.add_argument("--archs", type=_arch_list, default=["conformer", "e_branchformer"])
    p.add_argument("--lrs", type=_float_list, default=[2e-3, 2.0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--n-train", type=int, help="override the synthetic training-set size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--case", action="append", help="case name (repeatable); default all but encoder_stack")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("decode", help="greedy CTC decoding with a trained checkpoint")
    p.add_argument("run_dir", help="output directory of a train run")
    p.add_argument("--vocab", help="whitespace-separated token file; line i names label i+1")
    p.add_argument("--split", choices=("valid", "train"), default="valid")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("checks", nargs="*", help="subset of checks to run")
    p.set_defaults(func=cmd_verify)
    for p in sub.choices.values():
        p.set_defaults(subparser=p)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            # report unknown flags against the subcommand so its help is shown
            (getattr(args, "subparser", None) or parser).error(f"unrecognized arguments: {' '.join(extra)}")
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with np.errstate(all="ignore"):
            return args.func(args)
    except UsageError as exc:
        print(f"branchkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"branchkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
