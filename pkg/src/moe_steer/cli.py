"""``moe-steer`` command line entry point.

Exit codes: 0 success, 1 domain error (bad trace, bad config, violated
invariant), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .evaluation import (
    DEFAULT_MULTIPLIERS,
    METRICS,
    compare_report,
    evaluate,
    read_sweep,
    render_comparison,
    render_sweep,
    summarize,
    sweep,
    write_sweep,
)
from .npmi import count_stats, read_expert_set, read_report, score_experts, write_expert_set, write_report
from .sim import PlantSpec, build_model, make_tasks, plant, simulate
from .steering import DEFAULT_BETA, DEFAULT_L, ConfigError, from_ranked, parse_config, serialize_config
from .trace import FORMAT_VERSION, MarkerSet, ModelShape, TraceParseError, read_corpus, read_table, validate_corpus, write_corpus

log = logging.getLogger("moe_steer")


class DomainError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty list {text!r}")
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _plant_arg(text: str) -> PlantSpec:
    try:
        return PlantSpec.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _load_markers(arg: str | None) -> MarkerSet | None:
    if arg in (None, "default"):
        return None if arg is None else MarkerSet.default()
    with open(arg, encoding="utf-8") as f:
        obj = json.load(f)
    return MarkerSet(tuple((t, c) for t, c in obj))


def _emit_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=1, ensure_ascii=False) + "\n"
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("toy model")
    g.add_argument("--seed", type=int, default=0, help="model and task seed (default 0)")
    g.add_argument("--task-seed", type=int, help="task seed (default: --seed)")
    g.add_argument("--instances", type=int, default=100, help="number of task instances (default 100)")
    g.add_argument("--plant", type=_plant_arg, action="append", default=[], metavar="L,E,BIAS,MARKER",
                   help="plant a ground-truth expert; repeatable")
    g.add_argument("--layers", type=int, default=4, help="L (default 4)")
    g.add_argument("--experts", type=int, default=16, help="N experts per layer (default 16)")
    g.add_argument("--top-o", type=int, default=2, help="O experts selected per token (default 2)")
    g.add_argument("--dim", type=int, default=32, help="hidden size (default 32)")
    g.add_argument("--max-tokens", type=int, default=64, help="generation cap per instance (default 64)")
    g.add_argument("--domain", default="synthetic", help="domain tag written on instances")


def _model_and_tasks(args):
    model = build_model(args.seed, ModelShape(args.layers, args.experts, args.top_o), args.dim)
    for spec in args.plant:
        model = plant(model, spec)
    seed = args.seed if args.task_seed is None else args.task_seed
    return model, make_tasks(args.instances, seed, args.domain)


def _load_table(args):
    table = read_table(args.trace, domain=args.filter_domain)
    markers = _load_markers(args.markers)
    if markers is not None:
        table.markers = markers
    return table


def cmd_validate(args) -> int:
    corpus = read_corpus(args.trace, strict=False)
    report = validate_corpus(corpus)
    if args.report:
        _emit_json(report.to_json(), args.report)
    status = "ok" if report.ok else f"{len(report.violations)} violation(s)"
    print(f"{args.trace}: instances={report.n_instances} T={report.n_tokens} {status}")
    for v in report.violations[:20]:
        print(f"  {v.instance_id} p={v.position} {v.kind}: {v.detail}", file=sys.stderr)
    return 0 if report.ok else 1


def cmd_score(args) -> int:
    stats = count_stats(_load_table(args), workers=args.workers)
    report = score_experts(stats)
    if args.out:
        write_report(report, args.out)
    else:
        write_report(report, sys.stdout)
    log.info("scored %d experts over T=%d tokens", len(report), stats.T)
    return 0


def cmd_identify(args) -> int:
    stats = count_stats(_load_table(args), workers=args.workers)
    report = score_experts(stats)
    experts = report.top(args.l, args.filter_domain or "all")
    if args.out:
        write_expert_set(experts, args.out)
    if args.report_out:
        write_report(report, args.report_out)
    for e in report.entries[: args.l]:
        print(f"{e.rank}\t{e.key.layer}\t{e.key.expert}\t{e.combined:.6f}")
    return 0


def cmd_simulate(args) -> int:
    model, tasks = _model_and_tasks(args)
    config = parse_config(args.steer) if args.steer else None
    corpus = simulate(model, tasks, config, args.max_tokens)
    write_corpus(corpus, args.out)
    log.info("wrote %d instances, T=%d to %s", len(corpus.instances), corpus.n_tokens, args.out)
    return 0


def cmd_steer(args) -> int:
    model, tasks = _model_and_tasks(args)
    if args.config:
        config = parse_config(args.config)
    else:
        config = from_ranked(read_expert_set(args.expert_set), args.beta, args.renormalize)
    if args.config_out:
        serialize_config(config, args.config_out)
    if args.trace_out:
        write_corpus(simulate(model, tasks, config, args.max_tokens), args.trace_out)
    base = summarize(evaluate(model, tasks, None, args.max_tokens))
    steered = summarize(evaluate(model, tasks, config, args.max_tokens))
    comp = compare_report(base, steered, args.domain)
    if args.metrics_out:
        _emit_json({"baseline": base.to_json(), "steered": steered.to_json(), "deltas": comp.deltas}, args.metrics_out)
    sys.stdout.write(render_comparison(comp, "md"))
    return 0


def cmd_sweep(args) -> int:
    if bool(args.trace) == bool(args.report):
        raise DomainError("sweep needs exactly one of --trace or --report")
    if args.report:
        report = read_report(args.report)
    else:
        args.filter_domain, args.markers = None, None
        report = score_experts(count_stats(_load_table(args), workers=1))
    model, tasks = _model_and_tasks(args)
    result = sweep(
        model, tasks, args.multipliers, args.top_l, report,
        random_arm=args.random_arm, renormalize=args.renormalize, seed=args.seed, max_tokens=args.max_tokens,
    )
    write_sweep(result, args.out)
    log.info("sweep of %d x %d cells written to %s", len(result.multipliers), len(result.arms), args.out)
    return 0


def cmd_report(args) -> int:
    result = read_sweep(args.sweep)
    metrics = METRICS if args.metric == "all" else (args.metric,)
    parts = []
    for m in metrics:
        parts.append(f"{m}\n" if args.format == "tsv" else f"### {m}\n\n")
        parts.append(render_sweep(result, m, args.format))
        parts.append("\n")
    arm = f"Top{args.top_l}"
    if (float(args.beta), arm) in result.cells:
        comp = compare_report(result.baseline, result.cell(args.beta, arm), "synthetic", "baseline", f"x{args.beta:g} {arm}")
        parts.append("comparison\n" if args.format == "tsv" else "### comparison\n\n")
        parts.append(render_comparison(comp, args.format))
    text = "".join(parts)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-steer", description="Identify and reinforce cognitive experts in MoE routing traces.")
    parser.add_argument("--version", action="version", version=f"moe-steer {__version__} (trace format v{FORMAT_VERSION})")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a trace file's invariants")
    p.add_argument("trace")
    p.add_argument("--report", help="write the validation report (JSON) here")
    p.set_defaults(func=cmd_validate)

    for name, func, helptext in (
        ("score", cmd_score, "nPMI report for every active expert"),
        ("identify", cmd_identify, "top-l cognitive experts"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("trace")
        p.add_argument("--markers", help="marker file (JSON [[token, coef], ...]) or 'default'; default: trace header")
        p.add_argument("--domain", dest="filter_domain", help="only count instances of this domain")
        p.add_argument("--workers", type=int, default=1, help="parallel counting shards (default 1)")
        p.add_argument("--out", help="output path (default: stdout for score)")
        if name == "identify":
            p.add_argument("-l", type=int, default=DEFAULT_L, help=f"number of experts (default {DEFAULT_L})")
            p.add_argument("--report-out", help="also write the full nPMI report")
        p.set_defaults(func=func)

    p = sub.add_parser("simulate", help="generate a routing trace from the toy model")
    _add_model_flags(p)
    p.add_argument("--steer", help="steering config to apply during generation")
    p.add_argument("--out", required=True, help="trace file to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("steer", help="run the toy model with a steering config and compare to baseline")
    _add_model_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="steering config file")
    src.add_argument("--expert-set", help="expert set from 'moe-steer identify'; builds a uniform-multiplier config")
    p.add_argument("--beta", type=float, default=DEFAULT_BETA, help=f"multiplier used with --expert-set (default {DEFAULT_BETA:g})")
    p.add_argument("--renormalize", action="store_true", help="renormalize steered weights (with --expert-set)")
    p.add_argument("--config-out", help="write the effective steering config here")
    p.add_argument("--trace-out", help="write the steered trace here")
    p.add_argument("--metrics-out", help="write baseline/steered metrics (JSON) here")
    p.set_defaults(func=cmd_steer)

    p = sub.add_parser("sweep", help="multiplier x top-l sweep on the toy model")
    _add_model_flags(p)
    p.add_argument("--trace", help="identification trace to score")
    p.add_argument("--report", help="precomputed nPMI report instead of --trace")
    p.add_argument("--multipliers", type=_float_list, default=list(DEFAULT_MULTIPLIERS),
                   help="comma list, must include 1 (default 1,2,...,512)")
    p.add_argument("--top-l", type=_int_list, default=[1, 2, 3, 4, 5], help="e.g. 1..5 or 1,2 (default 1..5)")
    p.add_argument("--random-arm", action="store_true", help="add a two-random-experts control arm")
    p.add_argument("--renormalize", action="store_true", help="renormalize steered weights to sum 1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render a sweep as tables")
    p.add_argument("sweep", help="sweep JSON from 'moe-steer sweep'")
    p.add_argument("--format", choices=("md", "tsv"), default="md")
    p.add_argument("--metric", choices=METRICS + ("all",), default="all")
    p.add_argument("--beta", type=float, default=DEFAULT_BETA, help="cell for the comparison table (default 64)")
    p.add_argument("--top-l", type=int, default=DEFAULT_L, help="arm for the comparison table (default 2)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (DomainError, TraceParseError, ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"moe-steer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
