"""Command line entry point.

    blockstyle stylize --config run.json --ref style.ppm --out out.ppm --report out.json
    blockstyle sweep-blocks | sweep-subtraction | sweep-strength | invert  (same flags)
    blockstyle export-net --kind planted --net-seed 3 --hot-block 6 --out net.istn

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .errors import BlockStyleError, ConfigError, ImageIOError
from .imageio import write_ppm
from .unet import save_net

log = logging.getLogger("blockstyle")

# flag name -> RunConfig field
_OVERRIDES = {
    "prompt": "prompt",
    "content": "content",
    "ref": "reference",
    "preset": "preset",
    "strength": "strength",
    "layout_strength": "layout_strength",
    "steps": "steps",
    "seed": "seed",
    "schedule_T": "schedule_T",
    "guidance": "guidance",
}


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    return [int(x) for x in _floats(text)]


def _add_run_flags(p: argparse.ArgumentParser, needs_out: bool = True):
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--prompt")
    p.add_argument("--content", help="content text to subtract from the reference embedding")
    p.add_argument("--ref", help="reference image (binary PPM)")
    p.add_argument("--preset", choices=["all", "style", "style+layout"])
    p.add_argument("--strength", type=float)
    p.add_argument("--layout-strength", type=float, dest="layout_strength")
    p.add_argument("--subtract-lambda", type=float, dest="subtract_lambda", help="enables content subtraction")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--schedule-T", type=int, dest="schedule_T")
    p.add_argument("--guidance", type=float)
    p.add_argument("--net-file", dest="net_file", help="ISTN net weights")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--timings", action="store_true", help="add wall-clock seconds to the report")
    p.add_argument("--out", required=needs_out, help="output PPM")
    p.add_argument("--report", required=True, help="output JSON report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockstyle", description="Block-restricted style injection on a toy latent diffusion model.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_flags(sub.add_parser("stylize", help="one stylization run"))
    p = sub.add_parser("sweep-blocks", help="inject into each block alone and rank them")
    _add_run_flags(p)
    p.add_argument("--sweep-strength", type=float, dest="sweep_strength")
    p = sub.add_parser("sweep-subtraction", help="vary the content-subtraction scale")
    _add_run_flags(p)
    p.add_argument("--lambdas", type=_floats, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p = sub.add_parser("sweep-strength", help="vary the injection strength of a preset")
    _add_run_flags(p)
    p.add_argument("--strengths", type=_floats, default=[0.0, 0.25, 0.5, 1.0, 1.5, 2.0])
    p = sub.add_parser("invert", help="DDIM inversion round-trip report")
    _add_run_flags(p)
    p.add_argument("--invert-steps", type=_ints, dest="invert_steps", help="step counts for the error table, e.g. 10,25,50")
    p.add_argument("--invert-guidance", type=_floats, dest="invert_guidance", help="guidance values for an extra error table")

    p = sub.add_parser("export-net", help="write a toy net to an ISTN file")
    p.add_argument("--kind", default="toy", choices=["toy", "zero", "planted", "style-fixture"])
    p.add_argument("--net-seed", type=int, default=1, dest="net_seed")
    p.add_argument("--hot-block", type=int, dest="hot_block")
    p.add_argument("--space-seed", type=int, default=0, dest="space_seed")
    p.add_argument("--out", required=True)
    return parser


def load_config(args) -> pipeline.RunConfig:
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ImageIOError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for flag, name in _OVERRIDES.items():
        val = getattr(args, flag, None)
        if val is not None:
            data[name] = val
    if args.subtract_lambda is not None:
        data["subtract"] = True
        data["subtract_lambda"] = args.subtract_lambda
    if args.net_file:
        data["net"] = {"path": args.net_file}
    if getattr(args, "invert_steps", None):
        data["invert_steps"] = args.invert_steps
    if getattr(args, "invert_guidance", None):
        data["invert_guidance"] = args.invert_guidance
    data["out"] = args.out
    data["report"] = args.report
    try:
        return pipeline.RunConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _write_report(path, report: dict):
    try:
        with open(path, "w") as fh:
            fh.write(pipeline.dumps(report))
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def run(args) -> None:
    if args.command == "export-net":
        spec = {"kind": args.kind, "seed": args.net_seed}
        if args.hot_block is not None:
            spec["hot_block"] = args.hot_block
        save_net(args.out, pipeline.build_net(spec, args.space_seed))
        log.info("wrote %s", args.out)
        return

    cfg = load_config(args)
    if args.command == "stylize":
        (res, secs) = pipeline.wall_clock(pipeline.stylize, cfg)
        image, report = res.image, res.report
    elif args.command == "invert":
        ((image, report), secs) = pipeline.wall_clock(pipeline.invert_report, cfg, workers=args.workers)
    else:
        if args.command == "sweep-blocks":
            rep, secs = pipeline.wall_clock(pipeline.sweep_blocks, cfg, args.sweep_strength, workers=args.workers)
        elif args.command == "sweep-subtraction":
            rep, secs = pipeline.wall_clock(pipeline.sweep_subtraction, cfg, args.lambdas, workers=args.workers)
        else:
            rep, secs = pipeline.wall_clock(pipeline.sweep_strength, cfg, args.strengths, workers=args.workers)
        image, report = rep.contact_sheet(), rep.to_dict()
    if args.timings:
        report["timings"] = {**report["timings"], "wall_seconds": secs}
    write_ppm(args.out, image)
    _write_report(args.report, report)
    log.info("wrote %s and %s", args.out, args.report)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except BlockStyleError as exc:
        print(f"blockstyle: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"blockstyle: numeric error: {exc}", file=sys.stderr)
        return 4
    return 0


def entry():
    sys.exit(main())
