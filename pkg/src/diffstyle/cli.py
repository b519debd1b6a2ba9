"""Command-line interface for running guided style-transfer tasks."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (MODE_STYLE_TRANSFER, TASK_MODES, list_presets, load_preset,
                     validate_config, with_overrides)
from .errors import ConfigError, DiffstyleError
from .pipeline import StyleTask, derive_seeds, run_batch, run_from_manifest, run_task
from .style import PromptPair


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffstyle",
        description="Text-guided image style transfer with loss-guided diffusion sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="stylize one or more images")
    run.add_argument("--source", nargs="+", required=True,
                     help="source image path(s); several run as a concurrent batch")
    run.add_argument("--output", required=True,
                     help="output image path (a directory when batching)")
    run.add_argument("--target-prompt", default=None,
                     help="style text prompt (falls back to the preset's)")
    run.add_argument("--source-prompt", default=None,
                     help="text describing the source (needed for directional loss)")
    group = run.add_mutually_exclusive_group()
    group.add_argument("--preset", help="named preset (see 'diffstyle presets')")
    group.add_argument("--config", help="path to a config file")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--t0", type=int, default=None, help="override sampler.t0_index")
    run.add_argument("--t-prime", type=int, default=None, help="override sampler.T_prime")
    run.add_argument("--mode", choices=TASK_MODES, default=MODE_STYLE_TRANSFER)
    run.add_argument("--batch-workers", type=int, default=2,
                     help="concurrent tasks when several sources are given")

    rerun = sub.add_parser("rerun", help="reproduce a run from its manifest")
    rerun.add_argument("manifest", help="path to a .manifest.json file")
    rerun.add_argument("--output", default=None, help="alternative output path")

    sub.add_parser("presets", help="list bundled preset names")
    return parser


def _load_config(args):
    if args.preset:
        cfg = load_preset(args.preset)
    elif args.config:
        cfg = validate_config(Path(args.config).read_text())
    else:
        cfg = validate_config("")
    return with_overrides(cfg, t0_index=args.t0, T_prime=args.t_prime)


def _resolve_prompts(args, cfg) -> PromptPair:
    suggested = cfg.prompts
    target = args.target_prompt
    if target is None and suggested is not None:
        target = suggested.p_target
    source = args.source_prompt
    if source is None:
        source = suggested.p_source if suggested is not None else ""
    if not target:
        raise ConfigError([("task.prompts.p_target",
                            "no target prompt given and the config suggests none")])
    return PromptPair(p_source=source, p_target=target)


def _run(args) -> int:
    cfg = _load_config(args)
    prompts = _resolve_prompts(args, cfg)
    sources = args.source
    if len(sources) == 1:
        task = StyleTask(source_image_path=sources[0], output_path=args.output,
                         prompts=prompts, seed=args.seed, mode=args.mode)
        result = run_task(task, cfg)
        print(f"wrote {result.output_path}")
        print(f"manifest {result.manifest_path}")
        return 0
    out_dir = Path(args.output)
    seeds = derive_seeds(args.seed, len(sources))
    tasks = [
        StyleTask(source_image_path=src,
                  output_path=str(out_dir / f"{Path(src).stem}_styled.png"),
                  prompts=prompts, seed=seeds[i], mode=args.mode)
        for i, src in enumerate(sources)
    ]
    results = run_batch(tasks, cfg, max_workers=args.batch_workers)
    for result in results:
        print(f"wrote {result.output_path}")
    return 0


def _error_record(e: Exception) -> dict:
    record = {"error": type(e).__name__, "message": str(e)}
    if isinstance(e, ConfigError):
        record["violations"] = [{"field": path, "message": msg}
                                for path, msg in e.violations]
    return record


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _run(args)
        if args.command == "rerun":
            result = run_from_manifest(args.manifest, args.output)
            print(f"wrote {result.output_path}")
            return 0
        if args.command == "presets":
            for name in list_presets():
                print(name)
            return 0
        return 2
    except DiffstyleError as e:
        print(json.dumps(_error_record(e)), file=sys.stderr)
        return 1
    except OSError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
