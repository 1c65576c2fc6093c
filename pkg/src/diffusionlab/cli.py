"""``lab`` command line: gen-data, train, sample, run <experiment>, report.

Exit codes: 0 success, 2 usage, 3 missing upstream artifact, 4 data/format.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .engine import GuidancePolicy, MODES, export_trajectory, sample_trajectory
from .errors import DataError, DependencyError, FormatError, LabError, VocabularyError
from .experiments import (EXPERIMENTS, ExperimentConfig, checkpoint_dir, generate_data,
                          load_model, report_lines, run_experiment, train_pipeline,
                          write_config, write_report)
from .prompts import ATTRIBUTES, NOUNS, PromptSpec, encode_prompt, switch_eos

log = logging.getLogger("lab")

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_DATA = 0, 2, 3, 4


def parse_prompt(text):
    """'a red circle' -> PromptSpec."""
    words = text.lower().split()
    if len(words) == 3 and words[0] == "a":
        words = words[1:]
    if len(words) != 2 or words[0] not in ATTRIBUTES or words[1] not in NOUNS:
        raise VocabularyError(f"prompt {text!r} is not 'a <attribute> <noun>' in the vocabulary")
    return PromptSpec(NOUNS.index(words[1]), ATTRIBUTES.index(words[0]))


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON file of ExperimentConfig keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--w", type=float, help="guidance scale")
    common.add_argument("--a", type=int, help="guidance drop boundary (sampled steps)")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="lab", description="Toy diffusion guidance lab.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the training dataset")
    sub.add_parser("train", parents=[common], help="train the toy denoiser")
    sp = sub.add_parser("sample", parents=[common], help="sample one prompt and export it")
    sp.add_argument("--prompt", required=True, help="e.g. 'a red circle'")
    sp.add_argument("--prompt2", help="second prompt for switch mode (its EOS is used)")
    rp = sub.add_parser("run", parents=[common], help="run a named experiment")
    rp.add_argument("experiment", help=", ".join(EXPERIMENTS))
    rep = sub.add_parser("report", parents=[common], help="aggregate run summaries")
    rep.add_argument("run_dirs", nargs="*")
    return ap


def _config(args, **extra):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    sets = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise _Usage(f"--set expects KEY=VALUE, got {item!r}")
        sets[key] = json.loads(value) if value[:1] in "[{\"" else value
    return cfg.override(**sets, seed=args.seed, out=args.out, w=args.w, a=args.a,
                        mode=args.mode, **extra)


class _Usage(Exception):
    pass


def _cmd_gen_data(args):
    cfg = _config(args)
    out = args.out or cfg.data_dir
    n = generate_data(cfg, out)
    print(f"wrote {n} images to {out}")


def _cmd_train(args):
    cfg = _config(args)
    out = args.out or checkpoint_dir(cfg)
    _, curve = train_pipeline(cfg, out, log=lambda e, l: log.info("epoch %d loss %.5f", e, l))
    print(f"trained {len(curve.epochs)} epochs in {curve.seconds:.1f}s, "
          f"loss {curve.mean_loss[0]:.4f} -> {curve.mean_loss[-1]:.4f}; model in {out}")


def _cmd_sample(args):
    cfg = _config(args)
    model = load_model(cfg)
    cond = encode_prompt(parse_prompt(args.prompt))
    cond2 = None
    if args.prompt2:
        cond2 = switch_eos(cond, encode_prompt(parse_prompt(args.prompt2)))
    policy = GuidancePolicy(cfg.w, cfg.a, cfg.mode)
    traj = sample_trajectory(model, cfg.schedule(), policy, cond, cond2=cond2, seed=cfg.seed)
    out = args.out or "sample"
    export_trajectory(traj, out)
    write_config(cfg, out)
    np.asarray(traj.x0, dtype="<f4").tofile(os.path.join(out, "image.f32"))
    print(f"{traj.total_evals} forward passes; trajectory in {out}")


def _cmd_run(args):
    if args.experiment not in EXPERIMENTS:
        raise _Usage(f"unknown experiment {args.experiment!r}; choose from "
                     f"{', '.join(EXPERIMENTS)}")
    cfg = _config(args, experiment=args.experiment)
    if args.out is None:
        cfg = cfg.override(out=os.path.join(cfg.out, args.experiment))
    summary = run_experiment(cfg)
    for c in summary["checks"]:
        print(("PASS" if c["passed"] else "FAIL"), c["name"], "=", c["value"])
    print(f"outputs in {cfg.out}")


def _cmd_report(args):
    path = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "report.json")
    report = write_report(args.run_dirs, path)
    print("\n".join(report_lines(report)))


COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "sample": _cmd_sample,
            "run": _cmd_run, "report": _cmd_report}


def main(argv=None):
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except _Usage as exc:
        print(f"lab: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as exc:
        print(f"lab: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (DataError, FormatError, OSError) as exc:
        print(f"lab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LabError as exc:
        print(f"lab: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
