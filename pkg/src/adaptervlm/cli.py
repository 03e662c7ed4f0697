"""Command line entry point.

Subcommands: ``gen-data``, ``train``, ``gradcheck``, ``params``, ``score``.
Exit codes are a stable contract: 0 success, 1 check or validation
failure, 2 usage or config error. The ``AG4_OUT`` environment variable
overrides the default output directory; an explicit --out still wins.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import build_run_config, load_run_config
from .data import ManifestError, generate_dataset, load_manifest
from .gradcheck import corrupted_gelu_gradient, run_gradcheck
from .model import ConfigError, Model
from .policy import PRESETS, build_policy, policy_json, render_policy_text
from .scoring import ScoreSheetError, load_scoresheet, render_report
from .training import (CheckpointError, load_checkpoint, load_weights_into,
                       save_checkpoint, train_stage1, train_stage2, write_trace)

USAGE_ERROR = 2
CHECK_ERROR = 1


def _default_out(flag_value: str | None) -> Path:
    if flag_value:
        return Path(flag_value)
    return Path(os.environ.get("AG4_OUT", "out"))


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_gen_data(args) -> int:
    if args.items < 1:
        return _fail(f"--items must be >= 1, got {args.items}", USAGE_ERROR)
    out = _default_out(args.out)
    try:
        manifest = generate_dataset(
            out, seed=args.seed, n_items=args.items, n_classes=args.classes,
            n_levels=args.levels, vocab_size=args.vocab_size,
            vis_width=args.vis_width, stage2_fraction=args.stage2_fraction,
        )
    except ValueError as exc:
        return _fail(str(exc), USAGE_ERROR)
    except OSError as exc:
        return _fail(f"cannot write to {out}: {exc}", CHECK_ERROR)
    print(f"wrote {len(manifest.items)} items to {out / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    try:
        run_cfg = load_run_config(args.config, preset=args.preset)
    except ConfigError as exc:
        return _fail(str(exc), USAGE_ERROR)
    if args.stage == 2 and not (args.init_from or args.resume or args.from_scratch):
        return _fail("stage 2 needs --init-from <stage1 checkpoint>, --resume, "
                     "or --from-scratch", USAGE_ERROR)
    out = _default_out(args.out)
    try:
        manifest = load_manifest(args.data, vocab_size=run_cfg.model.vocab_size)
        model = Model.init(run_cfg.model, run_cfg.seed)
        policy = build_policy(run_cfg.model, run_cfg.preset)
        if args.init_from:
            init_ckpt = load_checkpoint(args.init_from)
            load_weights_into(model, init_ckpt.weights)
        resume = load_checkpoint(args.resume) if args.resume else None
        if args.stage == 1:
            ckpt, trace = train_stage1(model, policy, manifest, run_cfg.train,
                                       resume=resume)
        else:
            ckpt, trace = train_stage2(model, policy, manifest, run_cfg.train,
                                       resume=resume)
    except (ManifestError, CheckpointError, ValueError) as exc:
        return _fail(str(exc), CHECK_ERROR)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / f"stage{args.stage}.ckpt"
    trace_path = out / f"trace_stage{args.stage}.csv"
    save_checkpoint(ckpt, ckpt_path)
    write_trace(trace_path, trace)
    last = trace[-1].loss if trace else float("nan")
    print(f"stage {args.stage} [{run_cfg.preset}]: {len(trace)} steps, "
          f"final loss {last:.6f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"trace: {trace_path}")
    return 0


def cmd_gradcheck(args) -> int:
    try:
        if args.config:
            run_cfg = load_run_config(args.config, preset=args.preset)
            model_cfg, seed = run_cfg.model, run_cfg.seed
            preset = run_cfg.preset
        else:
            run_cfg = build_run_config("toy", seed=args.seed, preset=args.preset)
            model_cfg, seed, preset = run_cfg.model, run_cfg.seed, run_cfg.preset
    except ConfigError as exc:
        return _fail(str(exc), USAGE_ERROR)
    if args.corrupt_backward:
        with corrupted_gelu_gradient():
            errors = run_gradcheck(model_cfg, preset=preset, seed=seed, h=args.h)
    else:
        errors = run_gradcheck(model_cfg, preset=preset, seed=seed, h=args.h)
    width = max(len(p) for p in errors)
    failing = []
    for path, err in errors.items():
        status = "ok" if err < args.tol else "FAIL"
        print(f"{path:<{width}}  max relerr {err:.3e}  {status}")
        if err >= args.tol:
            failing.append(path)
    if failing:
        print(f"gradcheck FAILED for {len(failing)} group(s): {', '.join(failing)}",
              file=sys.stderr)
        return CHECK_ERROR
    print(f"gradcheck passed: {len(errors)} parameter groups under tol {args.tol:g}")
    return 0


def cmd_params(args) -> int:
    try:
        if args.config:
            run_cfg = load_run_config(args.config, preset=args.preset)
            model_cfg, preset = run_cfg.model, run_cfg.preset
        else:
            run_cfg = build_run_config("toy", preset=args.preset)
            model_cfg, preset = run_cfg.model, run_cfg.preset
        policy = build_policy(model_cfg, preset)
    except ConfigError as exc:
        return _fail(str(exc), USAGE_ERROR)
    if args.json:
        print(json.dumps(policy_json(policy), indent=2))
    else:
        print(render_policy_text(policy), end="")
    return 0


def cmd_score(args) -> int:
    sheets = []
    for path in args.sheets:
        if not Path(path).exists():
            return _fail(f"scoresheet not found: {path}", USAGE_ERROR)
        try:
            sheets.append(load_scoresheet(path))
        except ScoreSheetError as exc:
            for v in exc.violations:
                print(f"{path}: {v}", file=sys.stderr)
            return CHECK_ERROR
    try:
        report = render_report(sheets)
    except ValueError as exc:
        return _fail(str(exc), CHECK_ERROR)
    out = _default_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.text, encoding="utf-8")
    (out / "report.csv").write_text(report.csv, encoding="utf-8")
    print(report.text, end="")
    print(f"report written to {out / 'report.txt'} and {out / 'report.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptervlm",
        description="Toy adapter-bridged vision-language model: data, training, "
                    "checking, and rubric scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic image-caption dataset")
    p.add_argument("--out", default=None, help="output directory (default: $AG4_OUT or ./out)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--items", type=int, default=64, help="total manifest items")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--vis-width", type=int, default=8)
    p.add_argument("--stage2-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True, help="run config JSON file")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--preset", choices=PRESETS, default=None,
                   help="freeze policy preset (default: from config)")
    p.add_argument("--out", default=None)
    p.add_argument("--init-from", default=None,
                   help="load weights from this checkpoint before training")
    p.add_argument("--resume", default=None,
                   help="continue an interrupted run from this checkpoint")
    p.add_argument("--from-scratch", action="store_true",
                   help="allow stage 2 without a stage 1 checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=PRESETS, default="artgpt4")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--corrupt-backward", action="store_true",
                   help="negative control: corrupt one backward rule on purpose")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="print the freeze-policy parameter table")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=PRESETS, default="artgpt4")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("score", help="validate and aggregate rubric scoresheets")
    p.add_argument("sheets", nargs="+", help="scoresheet JSON files")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
