"""``layersplit`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import ConfigError, InvalidInputError, LayersplitError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("layersplit")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _out(args, cfg, name: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_root) / name


def cmd_datagen(args) -> dict:
    cfg = load_config(args.config)
    return pipeline.run_datagen(cfg, args.count, _out(args, cfg, "dataset"))


def cmd_pretrain(args) -> dict:
    cfg = load_config(args.config)
    return pipeline.run_pretrain(cfg, args.dataset, _out(args, cfg, "pretrain"))


def cmd_adapt(args) -> dict:
    cfg = load_config(args.config)
    return pipeline.run_adapt(
        cfg, args.base, args.dataset, _out(args, cfg, "adapt"),
        use_fg_context=not args.no_fg_context, use_mm=not args.no_mm, expected_base_hash=args.base_hash,
    )


def cmd_decompose(args) -> dict:
    return pipeline.run_decompose(args.checkpoint, args.image, args.mask, args.out, args.steps, args.seed, args.cues)


def cmd_eval(args) -> dict:
    cfg = load_config(args.config)
    if args.steps is not None:
        cfg.metrics.steps = args.steps
    return pipeline.run_eval(cfg, args.checkpoint, args.dataset, _out(args, cfg, "eval"), args.split, args.ground_truth)


def cmd_probe(args) -> dict:
    cfg = load_config(args.config)
    if args.k:
        cfg.probe.k_values = tuple(args.k)
    return pipeline.run_probe(cfg, _out(args, cfg, "probe"))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layersplit", description="Image layer decomposition at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("datagen", help="curate training triplets")
    s.add_argument("--config")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_datagen)

    s = sub.add_parser("pretrain", help="train the background-inpainting base")
    s.add_argument("--config")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("adapt", help="LoRA-adapt the base for layer decomposition")
    s.add_argument("--config")
    s.add_argument("--base", required=True, help="base checkpoint (.npz)")
    s.add_argument("--dataset", required=True)
    s.add_argument("--base-hash", help="refuse to run unless the base checkpoint has this frozen hash")
    s.add_argument("--no-fg-context", action="store_true", help="ablation: background context for both streams")
    s.add_argument("--no-mm", action="store_true", help="ablation: no fused cue context")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_adapt)

    s = sub.add_parser("decompose", help="split one image into foreground and background layers")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cues", help="sample directory whose cues/ holds edge.png, seg.png, depth.png overrides")
    s.set_defaults(fn=cmd_decompose)

    s = sub.add_parser("eval", help="background-layer metrics over a dataset split")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", help="sample range 'start:stop'")
    s.add_argument("--steps", type=int)
    s.add_argument("--ground-truth", action="store_true", help="score reference backgrounds against themselves")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("probe", help="fusion read-stage complexity sweep")
    s.add_argument("--config")
    s.add_argument("--k", type=int, nargs="+", help="cue-token counts to sweep")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_probe)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.fn(args)
    except (ConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LayersplitError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
