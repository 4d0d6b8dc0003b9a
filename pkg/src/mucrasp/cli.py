"""Command-line entry point: ``mucrasp <subcommand> ...``.

Every subcommand writes its outputs atomically, prints a one-line summary with
the output paths, and exits 0.  Failures print a JSON error object on stderr
and exit with a nonzero status.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import allocator as al
from . import attribution as attr
from . import evaluation as ev
from . import model as mc
from .calibration import generate_synthetic_corpus, load_corpus, save_corpus, train
from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint

DEFAULT_SEED = 42
SCHEMA_VERSION = 1
SUBCOMMANDS = ("gen-data", "train", "score", "prune", "eval", "ablate", "compare", "report")


class CLIError(Exception):
    def __init__(self, message: str, kind: str = "usage", code: int = 2, details=None):
        super().__init__(message)
        self.kind, self.code, self.details = kind, code, details


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


# --------------------------------------------------------------------------
# helpers


def _ratio(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"ratio must lie in (0, 1), got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def _pos_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def write_json(path, payload) -> str:
    atomic_write_bytes(path, (json.dumps(payload, indent=1, sort_keys=True) + "\n").encode("utf-8"))
    return str(path)


def write_text(path, text: str) -> str:
    atomic_write_bytes(path, text.encode("utf-8"))
    return str(path)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _require(path, what: str) -> Path:
    if path is None:
        raise CLIError(f"{what} path is required", kind="missing_input")
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{what} not found: {path}", kind="missing_input")
    return p


def load_model(path, precision: str | None = None) -> mc.ModelWeights:
    _, weights = load_checkpoint(_require(path, "model"))
    return cast_precision(weights, precision)


def cast_precision(weights: mc.ModelWeights, precision: str | None) -> mc.ModelWeights:
    if precision is None:
        return weights
    name = {"f32": "single", "f64": "double"}[precision]
    if weights.config.precision == name:
        return weights
    cfg = dataclasses.replace(weights.config, precision=name)
    out = weights.map(lambda t: t.astype(cfg.dtype))
    out.config = cfg
    return out


def pruning_config(args, **extra) -> al.PruningConfig:
    fields = dict(ratio=args.ratio, window=args.window, gamma_base=args.gamma_base, rho=args.rho,
                  scoring=args.mode, pivot_mode=args.pivot, cmds_enabled=not args.no_cmds,
                  allocation=args.allocation, seed=args.seed, strict_paper=args.strict_paper)
    fields.update(extra)
    return al.PruningConfig(**fields)


def plan_method_name(config: al.PruningConfig) -> str:
    name = config.scoring
    if config.scoring == "mucrasp":
        mods = []
        if config.pivot_mode != "real":
            mods.append({"none": "no-pivot", "random": "random-pivot"}[config.pivot_mode])
        if not config.cmds_enabled:
            mods.append("no-cmds")
        if config.allocation != "global":
            mods.append(config.allocation)
        if len(mods) == 1:
            return mods[0]
        if mods:
            name += "+" + "+".join(mods)
    elif config.allocation != "global":
        name += "+" + config.allocation
    return name


def _retention_json(retention) -> dict:
    return {f"{layer}:{sub}": frac for (layer, sub), frac in sorted(retention.items())}


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    n_heads = mc.ModelConfig.n_q_heads
    if args.d_model % n_heads:
        raise CLIError(f"--d-model must be a multiple of {n_heads}")
    cfg = mc.ModelConfig(d_model=args.d_model, head_dim=args.d_model // n_heads,
                         n_vision_tokens=args.n_vision_tokens)
    if args.model:
        cfg = load_checkpoint(_require(args.model, "model"))[0]
    corpus = generate_synthetic_corpus(args.seed, args.n, cfg)
    save_corpus(corpus, args.out)
    return f"gen-data: {len(corpus)} samples (seed {args.seed})", [args.out]


def cmd_train(args):
    corpus = load_corpus(_require(args.data, "data"))
    if args.model:
        weights = load_model(args.model, args.precision)
    else:
        precision = {"f32": "single", "f64": "double", None: "double"}[args.precision]
        weights = mc.init_weights(mc.ModelConfig(precision=precision), seed=args.seed)
    history: list[float] = []
    trained = train(weights, corpus, args.steps, args.lr, seed=args.seed, history=history)
    save_checkpoint(trained.config, trained, args.out)
    outputs = [args.out]
    if args.log:
        outputs.append(write_json(args.log, {"schema_version": SCHEMA_VERSION,
                                             "steps": args.steps, "lr": args.lr, "seed": args.seed,
                                             "batch_losses": history}))
    last = f"{np.mean(history[-20:]):.4f}" if history else "n/a"
    return f"train: {args.steps} steps, last-20 mean loss {last}", outputs


def cmd_score(args):
    if args.mode == "magnitude" and args.window is not None:
        raise CLIError("--window has no meaning with --mode magnitude", kind="conflicting_modes")
    weights = load_model(args.model, args.precision)
    if args.mode == "magnitude":
        table = attr.magnitude_scores(weights, args.strict_paper)
    else:
        corpus = load_corpus(_require(args.data, "data"))
        if args.mode == "global":
            table = attr.global_attribution(weights, corpus, strict_paper=args.strict_paper,
                                             jobs=args.jobs)
        else:
            cfg = al.PruningConfig(ratio=0.5, window=args.window or 8, pivot_mode=args.pivot,
                                   seed=args.seed)
            masks = al.corpus_pivot_masks(corpus, cfg)
            table = attr.pivot_attribution(weights, corpus, masks, args.strict_paper, jobs=args.jobs)
    if args.normalize:
        table = attr.normalize_importance(table)
    write_json(args.out, {"schema_version": SCHEMA_VERSION, **table.to_json()})
    return f"score: {args.mode} table over {len(table.units)} units", [args.out]


def _prune_outputs(args):
    out = Path(args.out) if args.out else None
    plan = args.plan_out or (out / "plan.json" if out else None)
    model = args.model_out or (out / "model.ckpt" if out else None)
    if plan is None or model is None:
        raise CLIError("prune needs --out DIR or both --plan-out and --model-out")
    retention = args.retention_out or Path(plan).with_name(Path(plan).stem + ".retention.json")
    return plan, model, retention


def cmd_prune(args):
    if args.mode == "magnitude" and args.window is not None:
        raise CLIError("--window has no meaning with --mode magnitude", kind="conflicting_modes")
    plan_path, model_path, retention_path = _prune_outputs(args)
    weights = load_model(args.model, args.precision)
    corpus = load_corpus(_require(args.data, "data"))
    config = pruning_config(args, window=args.window or 8)
    plan = al.build_plan(weights, corpus, config, jobs=args.jobs)
    new_cfg, pruned = mc.apply_prune(weights, plan.keep_units)
    retention = ev.retention_report(plan)
    payload = plan.to_json()
    payload["method"] = plan_method_name(config)
    payload["seeds"] = {"random_pivots": config.seed}
    write_json(plan_path, payload)
    save_checkpoint(new_cfg, pruned, model_path)
    write_json(retention_path, {"schema_version": SCHEMA_VERSION, "method": payload["method"],
                                "ratio": config.ratio, "retention": _retention_json(retention)})
    return (f"prune: kept {plan.kept_params}/{plan.prunable_params} prunable params "
            f"(budget {plan.budget})", [str(plan_path), str(model_path), str(retention_path)])


def cmd_eval(args):
    dense = load_model(args.dense, args.precision)
    pruned = load_model(args.pruned, args.precision)
    corpus = load_corpus(_require(args.data, "data"))
    method, ratio = args.method, None
    if args.plan:
        plan = json.loads(_require(args.plan, "plan").read_text())
        _check_version(plan, args.plan)
        method = method or plan.get("method", "eval")
        ratio = plan["config"]["ratio"]
    report = ev.evaluate_pair(dense, pruned, corpus, method or "eval", ratio)
    outputs = [write_json(args.out, report.to_json())]
    if args.csv:
        outputs.append(write_text(args.csv, ev.rows_to_csv([report.row()])))
    return f"eval: ppl {report.perplexity:.4f}, mean KL {report.mean_kl:.4f} nats", outputs


def cmd_ablate(args):
    weights = load_model(args.model, args.precision)
    corpus = load_corpus(_require(args.data, "data"))
    if args.window_start is not None:
        reports = [ev.zero_out_ablation(weights, corpus, args.window_start, args.window_len)]
    else:
        reports = ev.sliding_ablation(weights, corpus, args.window_len)
    rows = [r.row() for r in reports]
    write_json(args.out, {"schema_version": SCHEMA_VERSION, "rows": rows,
                          "reports": [r.to_json()["report"] for r in reports]})
    outputs = [args.out]
    if args.csv:
        outputs.append(write_text(args.csv, ev.rows_to_csv(rows)))
    return f"ablate: {len(reports)} window position(s)", outputs


def cmd_compare(args):
    weights = load_model(args.model, args.precision)
    corpus = load_corpus(_require(args.data, "data"))
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    overrides = dict(window=args.window or 8, gamma_base=args.gamma_base, rho=args.rho,
                     seed=args.seed, strict_paper=args.strict_paper)
    results = ev.compare_methods(weights, corpus, args.ratio, methods, jobs=args.jobs, **overrides)
    rows = [r.row() if isinstance(r, ev.EvalReport) else r for r in results]
    write_json(args.out, {"schema_version": SCHEMA_VERSION, "rows": rows})
    outputs = [args.out]
    if args.csv:
        outputs.append(write_text(args.csv, ev.rows_to_csv(rows)))
    failed = sum("error" in r for r in rows)
    return f"compare: {len(rows)} method(s) at S={args.ratio}, {failed} failed", outputs


def _check_version(payload: dict, path) -> None:
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CLIError(f"{path}: schema version {version!r}, expected {SCHEMA_VERSION}",
                       kind="schema_version")


def merge_reports(payloads: list[tuple[str, dict]]) -> list[dict]:
    """Merge plan, eval, ablate and compare payloads into rows keyed by (method, ratio)."""
    rows: dict[tuple, dict] = {}

    def put(row):
        key = (row.get("method"), row.get("ratio"))
        rows.setdefault(key, {}).update(row)

    for path, payload in payloads:
        _check_version(payload, path)
        if "rows" in payload:
            for row in payload["rows"]:
                put(row)
        elif "report" in payload:
            put(ev.EvalReport(**{**payload["report"], "runtime_seconds": 0.0}).row())
        elif "units" in payload and "budget" in payload:
            put({"method": payload.get("method", payload["config"]["scoring"]),
                 "ratio": payload["config"]["ratio"], "budget": payload["budget"],
                 "kept_params": payload["kept_params"], "gamma": payload["gamma"],
                 "forced_in": len(payload["forced_in"]), "evicted": len(payload["evicted"])})
        else:
            raise CLIError(f"{path}: unrecognised artifact", kind="schema")
    return list(rows.values())


def cmd_report(args):
    payloads = [(p, json.loads(_require(p, "input").read_text())) for p in args.inputs]
    rows = merge_reports(payloads)
    outputs = [write_json(args.out, {"schema_version": SCHEMA_VERSION, "rows": rows})]
    if args.csv:
        outputs.append(write_text(args.csv, ev.rows_to_csv(rows)))
    return f"report: {len(rows)} row(s) from {len(payloads)} file(s)", outputs


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, seed_default: int):
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--seed", type=_nonneg_int, default=seed_default)
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("--jobs", type=_pos_int, default=1)


def _pruning_flags(p: argparse.ArgumentParser, with_mode: bool = True):
    p.add_argument("--ratio", type=_ratio, required=True)
    p.add_argument("--window", type=_pos_int, default=None)
    p.add_argument("--gamma-base", type=float, default=0.4)
    p.add_argument("--rho", type=float, default=2.0)
    p.add_argument("--strict-paper", action="store_true",
                   help="GQA importance from Q/O slices only")
    if with_mode:
        p.add_argument("--mode", choices=al.SCORINGS, default="mucrasp")
        p.add_argument("--pivot", choices=al.PIVOT_MODES, default="real")
        p.add_argument("--no-cmds", action="store_true")
        p.add_argument("--allocation", choices=al.ALLOCATIONS, default="global")


def build_parser(seed_default: int = DEFAULT_SEED) -> argparse.ArgumentParser:
    parser = _Parser(prog="mucrasp", description="Structured pruning for a toy multimodal decoder.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic calibration corpus")
    _common(p, seed_default)
    p.add_argument("--n", type=_pos_int, default=128)
    p.add_argument("--d-model", type=_pos_int, default=64)
    p.add_argument("--n-vision-tokens", type=_pos_int, default=8)
    p.add_argument("--model", help="take dimensions from this checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="SGD on the masked response loss")
    _common(p, seed_default)
    p.add_argument("--model", help="start from this checkpoint (default: fresh init)")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=_nonneg_int, default=500)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--log", help="optional JSON with per-step batch losses")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="write an importance table")
    _common(p, seed_default)
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", choices=("global", "pivot", "magnitude"), default="global")
    p.add_argument("--window", type=_pos_int, default=None)
    p.add_argument("--pivot", choices=("real", "random"), default="real")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--strict-paper", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("prune", help="build a plan and write the pruned checkpoint")
    _common(p, seed_default)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _pruning_flags(p)
    p.add_argument("--out", help="directory for plan.json, model.ckpt, plan.retention.json")
    p.add_argument("--plan-out")
    p.add_argument("--model-out")
    p.add_argument("--retention-out")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="perplexity and KL of a pruned model against the dense one")
    _common(p, seed_default)
    p.add_argument("--dense", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--plan", help="plan JSON used to label the row")
    p.add_argument("--method")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sliding-window MLP zero-out")
    _common(p, seed_default)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--window-len", type=_nonneg_int, default=4)
    p.add_argument("--window-start", type=_nonneg_int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="run several pruning methods on identical inputs")
    _common(p, seed_default)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _pruning_flags(p, with_mode=False)
    p.add_argument("--methods", default="mucrasp,taylor,magnitude",
                   help=f"comma list from {sorted(ev.METHODS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="merge plan/eval/compare artifacts into one table")
    _common(p, seed_default)
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)
    return parser


_BOOL_KEYS = {"no_cmds", "strict_paper", "normalize"}


def _config_path(argv) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv):
    seed_default = DEFAULT_SEED
    env_seed = os.environ.get("MUCRASP_SEED")
    if env_seed:
        try:
            seed_default = int(env_seed)
        except ValueError:
            raise CLIError(f"MUCRASP_SEED must be an integer, got {env_seed!r}")
    parser = build_parser(seed_default)
    config_path = _config_path(argv)
    command = next((a for a in argv if a in SUBCOMMANDS), None)
    if config_path and command:
        values = read_config_file(_require(config_path, "config file"))
        sub = parser._subparsers._group_actions[0].choices[command]
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(actions) - {"config"})
        if unknown:
            raise CLIError(f"unknown config key(s): {', '.join(unknown)}")
        for key, value in values.items():
            action = actions[key]
            if key in _BOOL_KEYS:
                value = value.lower() in ("1", "true", "yes", "on")
            # string defaults still go through the action's type conversion
            action.default = value
            action.required = False
    return parser.parse_args(argv)


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        summary, outputs = args.func(args)
    except CLIError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc), "details": exc.details}),
              file=sys.stderr)
        return exc.code
    except al.InfeasibleBudgetError as exc:
        print(json.dumps({"error": "infeasible_budget", "message": str(exc),
                          "details": exc.binding}), file=sys.stderr)
        return 3
    except (ValueError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(summary)
    for path in outputs:
        print(f"  -> {path}")
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
