"""Command-line entry point: ``fastkv {run,calibrate,analyze,account}``.

Exit codes: 0 success, 1 internal error, 2 user/config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import analysis, calibration
from .accounting import gemfilter_compute_rate, prefill_compute_rate
from .kv_cache import greedy_decode
from .model import ConfigError, ModelConfig, WeightFileError, init_model, load_weights
from .prefill import REFERENCE_DEFAULTS, POLICY_KINDS, PolicyConfig, load_policy_config, run_policy

REPORT_VERSION = "fastkv-report/1"
# Keys that never enter a manifest: where output goes does not change what is computed.
_OUTPUT_KEYS = {"out", "out_csv", "out_json", "cache_dump", "manifest", "func"}


class UserError(Exception):
    pass


def atomic_write(path, text: str) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise UserError(f"output directory not found: {path.parent}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _emit(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write(path, text)


def digest(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


# -- argument groups ----------------------------------------------------------

def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--weights", help="binary weight file (config read from its header)")
    g.add_argument("--model-seed", type=int, default=0)
    g.add_argument("--num-layers", type=int, default=8)
    g.add_argument("--num-heads", type=int, default=4)
    g.add_argument("--num-kv-heads", type=int, default=2)
    g.add_argument("--head-dim", type=int, default=8)
    g.add_argument("--vocab-size", type=int, default=256)
    g.add_argument("--mlp-dim", type=int, default=64)
    g.add_argument("--max-seq-len", type=int, default=4096)
    g.add_argument("--rope-base", type=float, default=10000.0)


def _add_prompt_args(p):
    g = p.add_argument_group("prompt")
    g.add_argument("--prompt-file", help="token-id file; the first non-comment line is used")
    g.add_argument("--prompt-seed", type=int, default=0)
    g.add_argument("--prompt-len", type=int, default=256)


def _add_policy_args(p):
    g = p.add_argument_group("policy")
    g.add_argument("--policy-config", help="flat key = value file of PolicyConfig fields")
    g.add_argument("--policy", choices=POLICY_KINDS)
    g.add_argument("--tsp-layer", type=int)
    g.add_argument("--tsp-rate", type=float)
    g.add_argument("--kv-rate", type=float, dest="kv_retention_rate")
    g.add_argument("--window", type=int, dest="window_size")
    g.add_argument("--kernel", type=int, dest="pooling_kernel")
    g.add_argument("--pooling", choices=("max", "avg"))
    g.add_argument("--reference-defaults", action="store_true",
                   help="window 8, kernel 7, tsp rate 0.2, kv retention 0.1")


def _add_manifest_arg(p):
    p.add_argument("--manifest", help="replay the manifest echoed in an earlier report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("run", help="prefill under a policy and write a JSON report")
    _add_model_args(p); _add_prompt_args(p); _add_policy_args(p); _add_manifest_arg(p)
    p.add_argument("--decode-steps", type=int, default=0)
    p.add_argument("--out", default="-")
    p.add_argument("--cache-dump", help="write the KV index map here (tensor sidecar next to it)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("calibrate", help="choose the TSP layer over a calibration set")
    _add_model_args(p); _add_manifest_arg(p)
    p.add_argument("--calib-file", help="newline-delimited token-id prompts")
    p.add_argument("--calib-seed", type=int, default=0)
    p.add_argument("--num-prompts", type=int, default=4)
    p.add_argument("--prompt-len", type=int, default=128)
    p.add_argument("--l-max", type=int)
    p.add_argument("--tsp-rate", type=float, default=0.2)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--window", type=int, dest="window_size", default=8)
    p.add_argument("--kernel", type=int, dest="pooling_kernel", default=7)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("analyze", help="overlap / recall / TSP-layer sweep curves as CSV")
    _add_model_args(p); _add_prompt_args(p); _add_manifest_arg(p)
    p.add_argument("--kind", choices=("overlap", "recall", "sweep"), required=True)
    p.add_argument("--top-k", type=int, default=16)
    p.add_argument("--max-distance", type=int)
    p.add_argument("--k-values", default="1,4,16,64")
    p.add_argument("--num-prompts", type=int, default=4, help="sweep only")
    p.add_argument("--layers", help="sweep only: comma-separated layer indices (default: all)")
    p.add_argument("--tsp-rate", type=float, default=0.2)
    p.add_argument("--metric", choices=("logits", "hidden"), default="logits")
    p.add_argument("--window", type=int, dest="window_size", default=8)
    p.add_argument("--kernel", type=int, dest="pooling_kernel", default=7)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("account", help="closed-form prefill compute rates")
    _add_manifest_arg(p)
    p.add_argument("--num-layers", type=int, help="required unless given by --manifest")
    p.add_argument("--tsp-layer", type=int, help="required unless given by --manifest")
    p.add_argument("--tsp-rate", type=float, default=0.2)
    p.add_argument("--filter-layer", type=int, help="also report a GemFilter-style rate")
    p.add_argument("--selection-rate", type=float, default=0.1)
    p.add_argument("--prefilter", choices=("inclusive", "index"), default="inclusive")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_account)
    return parser


# -- resolution helpers -------------------------------------------------------

def manifest_of(args) -> dict:
    return {"subcommand": args.subcommand,
            "args": {k: v for k, v in sorted(vars(args).items()) if k not in _OUTPUT_KEYS | {"subcommand"}}}


def resolve_model(args):
    if args.weights:
        if not Path(args.weights).is_file():
            raise UserError(f"file not found: {args.weights}")
        return load_weights(args.weights)
    cfg = ModelConfig(num_layers=args.num_layers, num_heads=args.num_heads, num_kv_heads=args.num_kv_heads,
                      head_dim=args.head_dim, hidden_dim=args.num_heads * args.head_dim,
                      vocab_size=args.vocab_size, max_seq_len=args.max_seq_len, rope_base=args.rope_base,
                      mlp_dim=args.mlp_dim)
    return init_model(cfg, args.model_seed)


def resolve_prompt(args, vocab_size: int) -> list[int]:
    if args.prompt_file:
        if not Path(args.prompt_file).is_file():
            raise UserError(f"file not found: {args.prompt_file}")
        prompts = calibration.read_token_file(args.prompt_file)
        if not prompts:
            raise UserError(f"{args.prompt_file}: no prompt found")
        return prompts[0]
    return np.random.default_rng(args.prompt_seed).integers(0, vocab_size, size=args.prompt_len).tolist()


def resolve_policy(args, num_layers: int) -> PolicyConfig:
    values = {}
    if args.policy_config:
        if not Path(args.policy_config).is_file():
            raise UserError(f"file not found: {args.policy_config}")
        values = load_policy_config(args.policy_config).to_dict()
    else:
        values = PolicyConfig(tsp_layer=num_layers // 2 - 1 if num_layers > 2 else 0).to_dict()
    if args.reference_defaults:
        values.update(REFERENCE_DEFAULTS)
    for key, attr in (("policy_kind", "policy"), ("tsp_layer", "tsp_layer"), ("tsp_rate", "tsp_rate"),
                      ("kv_retention_rate", "kv_retention_rate"), ("window_size", "window_size"),
                      ("pooling_kernel", "pooling_kernel"), ("pooling", "pooling")):
        if getattr(args, attr) is not None:
            values[key] = getattr(args, attr)
    return PolicyConfig(**values).validate(num_layers)


def _report_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _header(args) -> dict:
    return {"format_version": REPORT_VERSION,
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "manifest": manifest_of(args)}


# -- subcommands --------------------------------------------------------------

def cmd_run(args) -> None:
    weights = resolve_model(args)
    prompt = resolve_prompt(args, weights.config.vocab_size)
    policy = resolve_policy(args, weights.config.num_layers)
    report = run_policy(weights, prompt, policy)

    doc = _header(args)
    doc.update({
        "model": {**weights.config.to_dict(), "weights_sha256": weights.checksum()},
        "policy": policy.to_dict(),
        "prompt_len": report.prompt_len,
        "logits_sha256": digest(report.final_logits),
        "top_token": int(np.argmax(report.final_logits)),
        "per_layer_context_len": report.per_layer_context_len,
        "propagated_count": int(len(report.propagated_positions)),
        "cache": {
            "retained_per_layer": [lc.num_retained for lc in report.kv_cache.layers],
            "kv_bytes": report.flop_account.kv_bytes,
        },
        "compute": report.flop_account.to_dict(),
    })
    if args.decode_steps:
        tokens, logits = greedy_decode(weights, report.kv_cache, report.final_logits,
                                       report.next_position, args.decode_steps)
        doc["decode"] = {"tokens": tokens, "logits_sha256": [digest(l) for l in logits]}
    if args.cache_dump:
        report.kv_cache.dump(args.cache_dump)
    _emit(args.out, _report_json(doc))


def cmd_calibrate(args) -> None:
    weights = resolve_model(args)
    if args.calib_file:
        if not Path(args.calib_file).is_file():
            raise UserError(f"file not found: {args.calib_file}")
        calib = calibration.CalibrationSet(calibration.read_token_file(args.calib_file), args.calib_file)
    else:
        calib = calibration.synthetic_calibration_set(args.calib_seed, args.num_prompts, args.prompt_len,
                                                      weights.config.vocab_size)
    result = calibration.select_tsp_layer(weights, calib, args.l_max, args.tsp_rate, args.tolerance,
                                          args.window_size, args.pooling_kernel)
    rows = "".join(f"{l},{repr(float(n))},{repr(float(r))}\n"
                   for l, (n, r) in enumerate(zip(result.distances, result.raw_distances)))
    atomic_write(args.out_csv, f"# {analysis.SCHEMA_VERSION}\nlayer,normalized_distance,raw_distance\n{rows}")
    doc = _header(args)
    doc.update({"chosen_layer": result.chosen_layer, "argmin_layer": result.argmin_layer,
                "l_max": result.l_max, "threshold_rule": result.threshold_rule,
                "distances": [float(x) for x in result.distances],
                "raw_distances": [float(x) for x in result.raw_distances]})
    atomic_write(args.out_json, _report_json(doc))


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise UserError(f"expected comma-separated integers, got {text!r}") from exc


def cmd_analyze(args) -> None:
    weights = resolve_model(args)
    L = weights.config.num_layers
    if args.kind == "overlap":
        prompt = resolve_prompt(args, weights.config.vocab_size)
        max_d = L - 1 if args.max_distance is None else args.max_distance
        text = analysis.overlap_csv(analysis.critical_token_overlap(weights, prompt, args.top_k, max_d,
                                                                    args.window_size))
    elif args.kind == "recall":
        prompt = resolve_prompt(args, weights.config.vocab_size)
        text = analysis.recall_csv(analysis.topk_attention_recall(weights, prompt, _int_list(args.k_values),
                                                                  args.window_size))
    else:
        rng = np.random.default_rng(args.prompt_seed)
        prompts = [rng.integers(0, weights.config.vocab_size, size=args.prompt_len).tolist()
                   for _ in range(args.num_prompts)]
        layers = range(L) if not args.layers else _int_list(args.layers)
        text = analysis.sweep_csv(analysis.tsp_layer_sweep(weights, prompts, layers, args.tsp_rate,
                                                           args.window_size, args.pooling_kernel, args.metric))
    _emit(args.out, text)


def cmd_account(args) -> None:
    missing = [f"--{k.replace('_', '-')}" for k in ("num_layers", "tsp_layer") if getattr(args, k) is None]
    if missing:
        raise UserError(f"the following arguments are required: {', '.join(missing)}")
    doc = _header(args)
    doc["fastkv_prefill_compute_rate"] = prefill_compute_rate(args.num_layers, args.tsp_layer, args.tsp_rate)
    if args.filter_layer is not None:
        doc["gemfilter_prefill_compute_rate"] = gemfilter_compute_rate(
            args.num_layers, args.filter_layer, args.selection_rate, args.prefilter)
    _emit(args.out, _report_json(doc))


def _apply_manifest(args, parser):
    path = Path(args.manifest)
    if not path.is_file():
        raise UserError(f"file not found: {args.manifest}")
    doc = json.loads(path.read_text())
    manifest = doc.get("manifest", doc)
    if manifest.get("subcommand") != args.subcommand:
        raise UserError(f"manifest is for {manifest.get('subcommand')!r}, not {args.subcommand!r}")
    for key, value in manifest["args"].items():
        setattr(args, key, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.manifest:
            args = _apply_manifest(args, parser)
        args.func(args)
    except (UserError, ConfigError, WeightFileError, FileNotFoundError, ValueError, IndexError) as exc:
        print(f"fastkv: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"fastkv: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
