"""Command-line entry point.

Exit codes: 0 success, 1 domain or validation error (including malformed
JSON input and failed gradient checks), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import CONFIG_KEYS, RunConfig, load_config
from .csqa import emit_jsonl, generate_qas, load_pair, random_pair, validate_qa
from .data import derive_seed
from .errors import ConfigError, DomainError, UsageError
from .geometry import lift_to_world, load_frame
from .gradsuite import run_grad_suite
from .pipeline import ABLATION_AXES, ABLATION_FIELDS, route_stats, run_ablation, run_pipeline, write_csv

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file; flags below override its keys")
    g = p.add_argument_group("config overrides (one flag per config key)")
    for key in CONFIG_KEYS:
        flags = [f"--{key.replace('_', '-')}"]
        if key == "csqa_path":
            flags.append("--csqa")
        g.add_argument(*flags, dest=f"cfg_{key}", default=None, metavar="VALUE")


def _override_value(key: str, raw: str):
    default = _FIELD_TYPES[key].default
    if key == "stages":
        return [s for s in raw.split(",") if s.strip()]
    if key == "csqa_path" or isinstance(default, str):
        return raw
    try:
        v = json.loads(raw)
    except json.JSONDecodeError:
        raise ConfigError(f"--{key.replace('_', '-')} expects a number, got {raw!r}") from None
    return v


def _resolve_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = {}
    for key in CONFIG_KEYS:
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            overrides[key] = _override_value(key, raw)
    return cfg.replace(**overrides) if overrides else cfg


def _write_text(out: str | None, text: str) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- commands


def cmd_grad_check(args) -> int:
    cfg = _resolve_config(args)
    cfg.validate(need_csqa=False)
    report = run_grad_suite(seed=cfg.seed, n_seeds=args.n_seeds)
    lines = report.lines()
    lines.append(f"{'PASS' if report.passed else 'FAIL'} overall ({len(report.failures)} failing paths)")
    _write_text(args.out, "\n".join(lines) + "\n")
    if args.out:
        print("\n".join(lines))
    for r in report.failures:
        _log(f"gradient check failed on {r.name}: worst relative error {r.worst:.3e} > {r.tolerance:.0e}"
             + (f" ({r.error})" if r.error else ""))
    return 0 if report.passed else 1


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = run_pipeline(cfg, args.out, log=_log)
    print(out)
    return 0


def cmd_route_stats(args) -> int:
    rows, summary = route_stats(args.run_dir)
    text = write_csv(None, ("layer", "expert", "token_fraction", "mean_prob"), rows)
    _write_text(args.out, text)
    lines = [f"source: {summary['source']}"]
    for layer, s in summary["layers"].items():
        lines.append(
            f"layer {layer}: max_share={s['max_share']:.6f} min_share={s['min_share']:.6f} "
            f"load_balance_loss={s['load_balance_loss']:.6f} tokens={s['tokens']}"
        )
    lines.append(
        f"overall: max_share={summary['max_share']:.6f} min_share={summary['min_share']:.6f} "
        f"load_balance_loss={summary['load_balance_loss']:.6f}"
    )
    print("\n".join(lines), file=sys.stdout if args.out else sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    rows = run_ablation(cfg, args.axis, args.out, log=_log)
    sys.stdout.write(write_csv(None, ABLATION_FIELDS, rows))
    return 0


def cmd_lift(args) -> int:
    frame = load_frame(args.frame)
    pts = lift_to_world(frame)
    doc = {"dims": list(pts.shape), "data": pts.reshape(-1).tolist()}
    _write_text(args.out, json.dumps(doc) + "\n")
    return 0


def cmd_gen_csqa(args) -> int:
    if args.pairs is None and args.synthetic is None:
        raise UsageError("gen-csqa needs --pairs DIR or --synthetic N")
    if args.cap < 1 or (args.synthetic or 0) < 0 or (args.max_qas is not None and args.max_qas < 0):
        raise UsageError("--cap must be >= 1; --synthetic and --max-qas must be >= 0")
    seed = args.seed
    pairs = []
    if args.pairs is not None:
        root = Path(args.pairs)
        files = sorted(root.glob("*.json")) if root.is_dir() else [root]
        if not files:
            raise ConfigError(f"no *.json scene-graph pairs found in {root}")
        pairs += [load_pair(f) for f in files]
    if args.synthetic:
        rng = np.random.default_rng(derive_seed(seed, "pairs"))
        pairs += [random_pair(rng, pair_id=f"synthetic_{i:05d}") for i in range(args.synthetic)]
    pairs.sort(key=lambda p: p.pair_id)
    template_seed = derive_seed(seed, "templates")
    kept, rejected = [], 0
    for pair in pairs:
        for qa in generate_qas(pair, template_seed, cap=args.cap):
            ok, reason = validate_qa(pair, qa)
            if ok:
                kept.append(qa)
            else:
                rejected += 1
                _log(f"rejected QA for {pair.pair_id}: {reason}")
    if args.max_qas is not None:
        kept = kept[: args.max_qas]
    if args.out:
        n = emit_jsonl(kept, args.out)
        print(f"wrote {n} QA pairs from {len(pairs)} scene-graph pairs to {args.out} ({rejected} rejected)")
    else:
        for qa in kept:
            sys.stdout.write(json.dumps(qa.to_dict(), ensure_ascii=False) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="synergy-moe", description="Toy sparse-MoE multimodal training and verification tools")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("grad-check", help="finite-difference check of every differentiable path")
    _add_config_flags(g)
    g.add_argument("--n-seeds", type=int, default=20)
    g.add_argument("--out", help="write the report here as well as to stdout")
    g.set_defaults(func=cmd_grad_check)

    t = sub.add_parser("train", help="run the configured training stages into a run directory")
    _add_config_flags(t)
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("route-stats", help="expert token shares from a run's final routing telemetry")
    r.add_argument("run_dir")
    r.add_argument("--out", help="CSV path (default stdout)")
    r.set_defaults(func=cmd_route_stats)

    a = sub.add_parser("ablate", help="expert-count or MoE-placement ablation")
    _add_config_flags(a)
    a.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    a.add_argument("--out", required=True, help="directory for variant runs and the comparison CSV")
    a.set_defaults(func=cmd_ablate)

    lf = sub.add_parser("lift", help="lift a depth frame to world coordinates")
    lf.add_argument("frame", help='JSON {"depth": {"dims": [H, W], "data": [...]}, "K": [9], "B": [16]}')
    lf.add_argument("--out", help="JSON point map path (default stdout)")
    lf.set_defaults(func=cmd_lift)

    c = sub.add_parser("gen-csqa", help="cross-view QA pairs from paired scene graphs")
    c.add_argument("--pairs", help="directory of pair JSON files (or one file)")
    c.add_argument("--synthetic", type=int, help="add N seeded random pairs")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--cap", type=int, default=8, help="max QAs kept per pair")
    c.add_argument("--max-qas", type=int, help="corpus size limit")
    c.add_argument("--out", help="JSONL path (default stdout)")
    c.set_defaults(func=cmd_gen_csqa)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", file=sys.stderr)
        return 1
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a bug, not a user error
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
