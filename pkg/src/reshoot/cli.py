"""Command line entry point.

Exit codes: 0 success, 1 unexpected engine error, 2 schema/config/format
error, 3 backend transport error, 4 incomplete run in strict mode,
5 evaluation join failure. With ``--json-errors`` the error is also written
to stderr as one JSON object.

Configuration precedence: built-in defaults < ``--config`` file < flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import errors as E
from .backends import MockWorld, build_backends
from .config import RunConfig, load_config

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FORMAT = 2
EXIT_TRANSPORT = 3
EXIT_INCOMPLETE = 4
EXIT_JOIN = 5

_EXIT_MAP = [
    (E.IncompleteRun, EXIT_INCOMPLETE),
    (E.EmptyJoin, EXIT_JOIN),
    ((E.TransportError, E.BackendRefusal), EXIT_TRANSPORT),
    ((E.SchemaViolation, E.MalformedJson, E.NonconformingOutput, E.UnderstandingFailed,
      E.ConfigError, E.CorruptManifest, E.InvalidDNA, E.AspectRatioMismatch,
      E.PreconditionViolation, E.UnreadableImage, E.MissingAnchor, E.MissingPortrait,
      E.InsufficientSamples, E.UnknownCharacter, E.UnknownScene, E.UnknownShot), EXIT_FORMAT),
]


def exit_code_for(exc: BaseException) -> int:
    for types, code in _EXIT_MAP:
        if isinstance(exc, types):
            return code
    return EXIT_ERROR


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FORMAT):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    return load_config(args.config, seed=args.seed)


def _backends(cfg: RunConfig):
    world = MockWorld(seed=cfg.seed, fault_rate=cfg.mock.fault_rate,
                      drift_kinds=frozenset(cfg.mock.drift_kinds),
                      clip_fault_rate=cfg.mock.clip_fault_rate)
    return build_backends(cfg.backends, world)


def _print(args, obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_understand(args) -> int:
    from .screenplay import parse_screenplay, serialize_screenplay, validate_screenplay

    cfg = _config(args)
    backends = _backends(cfg)
    text = backends.understanding.understand(args.source, "")
    sp = parse_screenplay(text)
    report = validate_screenplay(sp)
    if not report.ok:
        first = report.errors[0]
        raise E.SchemaViolation(first.path, first.code)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(serialize_screenplay(sp), encoding="utf-8")
    print(f"wrote {out} ({len(sp.shots)} shots, {len(sp.major_scenes)} scenes)")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .screenplay import parse_screenplay, validate_screenplay

    try:
        text = Path(args.file).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read {args.file}: {exc}") from None
    sp = parse_screenplay(text)
    report = validate_screenplay(sp)
    _print(args, report.to_dict())
    return EXIT_OK if report.ok else EXIT_FORMAT


def _source(args, cfg: RunConfig):
    from .pipeline import SourceSpec, load_mapping

    mapping = load_mapping(args.mapping) if args.mapping else {}
    return SourceSpec(
        screenplay_path=str(Path(args.screenplay).resolve()) if args.screenplay else "",
        video_path=args.source or "",
        character_mapping=mapping,
        style=args.style or cfg.style,
        copy_mode=args.copy_mode,
    )


def _remake_config(args) -> RunConfig:
    return load_config(
        args.config, seed=args.seed, output_dir=args.out,
        max_retries=args.max_retries, fault_rate=args.fault_rate,
        strict_stitch=True if args.strict else None,
        global_context=True if args.global_context else None,
        parallelism=args.parallelism,
    )


def _summarize(run) -> None:
    for job in run.state.ordered_jobs(run.sp.shot_ids):
        print(f"shot {job.shot_id:>4}  {job.state:<13} keyframe attempts "
              f"{job.attempts['keyframe']}  clip attempts {job.attempts['clip']}")


def cmd_remake(args) -> int:
    from .pipeline import resume, run_remake

    if not (args.screenplay or args.source):
        raise CliError("remake needs --screenplay or --source")
    cfg = _remake_config(args)
    backends = _backends(cfg)
    run_dir = Path(cfg.output_dir)
    if args.resume and (run_dir / "events.jsonl").exists():
        run = resume(run_dir, backends)
    else:
        run = run_remake(_source(args, cfg), backends, cfg, run_dir)
    _summarize(run)
    print(f"run directory: {run.dir}")
    return EXIT_OK


def cmd_refs(args) -> int:
    from .pipeline import run_remake

    if not (args.screenplay or args.source):
        raise CliError("refs needs --screenplay or --source")
    cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
    try:
        run_remake(_source(args, cfg), _backends(cfg), cfg, cfg.output_dir,
                   stop_after="references")
    except E.RunInterrupted:
        pass
    print(f"references written under {Path(cfg.output_dir) / 'reference_images'}")
    return EXIT_OK


def cmd_resume(args) -> int:
    from .pipeline import open_run, resume

    meta = open_run(args.run_dir)
    cfg = meta.config
    if args.seed is not None and args.seed != cfg.seed:
        raise CliError("--seed cannot change on resume")
    run = resume(args.run_dir, _backends(cfg))
    _summarize(run)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bench import (
        EvalReport,
        emit_report,
        eval_understanding,
        evaluate_run,
        labels_from_screenplay,
        load_json,
        parse_shot_labels,
    )

    cfg = _config(args)
    backends = _backends(cfg)
    if args.mode == "understanding":
        if not (args.pred and args.gt):
            raise CliError("understanding eval needs --pred and --gt")

        def labels(path):
            doc = load_json(path)
            if isinstance(doc, dict) and "major_scenes" in doc:
                from .screenplay import screenplay_from_dict

                return labels_from_screenplay(screenplay_from_dict(doc))
            return parse_shot_labels(doc)

        result = eval_understanding(labels(args.pred), labels(args.gt), backends.judge)
        report = EvalReport(understanding=result,
                            provenance={"mode": "understanding",
                                        "backends": backends.identities()})
    else:
        if not args.run:
            raise CliError("remaking eval needs --run")
        row = evaluate_run(args.run, backends.judge, backends.embed, args.regions)
        report = EvalReport(
            remaking=[{"label": Path(args.run).name, **row["metrics"]}],
            provenance={"mode": "remaking", "backends": backends.identities()},
            warnings=row["warnings"],
        )
    jpath, mpath = emit_report(report, args.out)
    print(f"wrote {jpath} and {mpath}")
    return EXIT_OK


def cmd_mock_demo(args) -> int:
    from .demo import FULL, GLOBAL_CONTEXT, NO_VERIFY, DemoSettings, mock_demo

    try:
        settings = DemoSettings(
            shots=args.shots, fault_rate=args.fault_rate,
            seed=args.seed if args.seed is not None else 0,
            max_retries=args.max_retries, no_verify=args.no_verify,
            global_context=args.global_context, parallelism=args.parallelism or 4,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    result = mock_demo(args.out, settings)
    for line in result.summary_lines():
        print(line)
    full = result.rows[FULL]
    nov = result.rows[NO_VERIFY]
    print(f"verification loop: ID-VLM {full['metrics']['ID-VLM']:.2f} vs "
          f"{nov['metrics']['ID-VLM']:.2f} without")
    if GLOBAL_CONTEXT in result.rows:
        print(f"per-shot context: consistency {full['consistency']:.3f} vs "
              f"{result.rows[GLOBAL_CONTEXT]['consistency']:.3f} with global context")
    print(f"report: {Path(args.out) / 'report.md'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies use SUPPRESS so a flag given before the subcommand survives
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="run config JSON file")
    common.add_argument("--seed", type=int, default=d(None),
                        help="run seed (overrides config)")
    common.add_argument("--json-errors", action="store_true", default=d(False),
                        help="also write errors to stderr as JSON")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    top, common = _common(False), _common(True)

    p = argparse.ArgumentParser(prog="reshoot", description=__doc__.split("\n")[0],
                                parents=[top])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("understand", parents=[common], help="video -> screenplay JSON")
    s.add_argument("--source", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_understand)

    s = sub.add_parser("validate", parents=[common], help="check a screenplay file")
    s.add_argument("file")
    s.set_defaults(fn=cmd_validate)

    def source_args(s):
        s.add_argument("--screenplay")
        s.add_argument("--source")
        s.add_argument("--mapping", help="character mapping JSON")
        s.add_argument("--style")
        s.add_argument("--copy-mode", action="store_true")
        s.add_argument("--out", default=None)

    s = sub.add_parser("refs", parents=[common], help="generate reference images only")
    source_args(s)
    s.set_defaults(fn=cmd_refs)

    s = sub.add_parser("remake", parents=[common], help="run the full remake")
    source_args(s)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--strict", action="store_true", help="fail unless every shot verifies")
    s.add_argument("--max-retries", type=int)
    s.add_argument("--fault-rate", type=float, help="mock drift probability")
    s.add_argument("--global-context", action="store_true")
    s.add_argument("--parallelism", type=int)
    s.set_defaults(fn=cmd_remake)

    s = sub.add_parser("resume", parents=[common], help="continue an interrupted run")
    s.add_argument("run_dir")
    s.set_defaults(fn=cmd_resume)

    s = sub.add_parser("eval", parents=[common], help="evaluate understanding or remaking")
    s.add_argument("--mode", choices=("understanding", "remaking"), required=True)
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--run")
    s.add_argument("--regions")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("mock-demo", parents=[common], help="offline demo with ablations")
    s.add_argument("--shots", type=int, default=20)
    s.add_argument("--fault-rate", type=float, default=0.15)
    s.add_argument("--max-retries", type=int, default=3)
    s.add_argument("--no-verify", action="store_true", help="primary run without retries")
    s.add_argument("--global-context", action="store_true",
                   help="also run with every character in every shot's context")
    s.add_argument("--parallelism", type=int)
    s.add_argument("--out", default="runs/mock-demo")
    s.set_defaults(fn=cmd_mock_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CliError, E.ReshootError) as exc:
        code = exc.code if isinstance(exc, CliError) else exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        if args.json_errors:
            payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
            if getattr(exc, "path", None) is not None:
                payload["path"] = exc.path
            print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
