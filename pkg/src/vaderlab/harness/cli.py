"""Command-line entry point: ``vaderlab <subcommand> --config PATH --set key=value``."""

from __future__ import annotations

import argparse
import logging
import sys

from vaderlab.errors import ConfigError, CSVFormatError, VaderError
from vaderlab.harness import experiments as ex
from vaderlab.harness.config import echo, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_TREND = 0, 1, 2, 3

# experiment implied by a subcommand when the config omits it
IMPLIED = {"pretrain": "pretrain", "align": "align", "eval": "align", "extend": "extend",
           "sweep": None}
SWEEPS = ("sweep-efficiency", "sweep-resolution", "generalize")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vaderlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", metavar="PATH", help="key = value config file")
        sp.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override one config key (repeatable)")
        return sp

    with_config("pretrain", "train discriminators and the base denoiser")
    with_config("align", "fine-tune with one algorithm over all seeds")
    sp = with_config("eval", "evaluate a checkpoint on train and test prompts")
    sp.add_argument("--checkpoint", help="model checkpoint (default: the base model)")
    sp = with_config("sweep", "run the experiment named in the config")
    sp.add_argument("--assert", dest="check", action="store_true",
                    help="exit 3 when a trend check fails")
    with_config("extend", "long-horizon consistency experiment")
    sp = sub.add_parser("plot", help="render a metrics CSV")
    sp.add_argument("csv")
    sp.add_argument("--out")
    sp.add_argument("--x", default="reward_queries", choices=("reward_queries", "wallclock_s",
                                                             "step"))
    sp.add_argument("--png", action="store_true")
    sp.add_argument("--config", help=argparse.SUPPRESS)
    sp.add_argument("--set", action="append", default=[], dest="overrides",
                    help=argparse.SUPPRESS)
    return p


def _eval(cfg, checkpoint: str | None) -> None:
    from vaderlab.diffusion import lora_attach
    from vaderlab.harness.checkpoint import load_checkpoint
    from vaderlab.rewards import prompt_split

    lab = ex.load_lab(cfg)
    model = lab.base
    if checkpoint:
        model = lora_attach(lab.base.clone(), cfg.lora_rank)
        load_checkpoint(checkpoint, model)
    reward = ex.make_reward(cfg, lab.discs)
    if lab.mode == "frame":
        _, seeds, rounds = ex._prompts_for(cfg, lab)
        splits = (("seed-frames", seeds),)
    else:
        ps = prompt_split(lab.spec)
        rounds, splits = 1, (("train", ps.train), ("test", ps.test))
    for name, prompts in splits:
        mean, std = ex.eval_model(cfg, lab, model, prompts, reward, rounds)
        print(f"{name}: {'+'.join(cfg.reward)} = {mean:.5f} +/- {std:.5f}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            from vaderlab.harness.plot import emit_plot

            out = emit_plot(args.csv, args.out, x=args.x, png=args.png)
            print(out)
            return EXIT_OK
        cfg = load_config(args.config, args.overrides, IMPLIED[args.command])
        if args.command == "sweep" and cfg.experiment not in SWEEPS:
            raise ConfigError(f"sweep runs one of {', '.join(SWEEPS)}, "
                              f"not {cfg.experiment!r}", key="experiment")
        echo(cfg)
        if args.command == "eval":
            _eval(cfg, args.checkpoint)
            return EXIT_OK
        report = ex.run(cfg)
        sys.stdout.write(report.text())
        for f in report.files:
            print(f"wrote {f}")
        if args.command == "sweep" and args.check and not report.passed:
            return EXIT_TREND
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (VaderError, CSVFormatError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
