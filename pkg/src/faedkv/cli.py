"""Command-line front end: ``faedkv <ablate|generate|needle|bench|compare>``.

Every subcommand takes the same compression flags. A ``--config`` file of
``key=value`` lines (keys are flag names without dashes) supplies defaults;
flags given on the command line win.

Exit codes: 0 on success, 1 for configuration or input errors, 2 for
runtime failures such as unreadable or unwritable files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation, bench, needle
from .cache import Compression, prefill_compress
from .errors import InvalidInputError
from .iwdft import Mode
from .masks import PruneMask
from .model import ModelConfig, init_model, load_weights, read_sequences
from .spectral import dft_matrix

log = logging.getLogger("faedkv")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
COMPARE_SCHEMA = "faedkv.compare/1"
GENERATE_SCHEMA = "faedkv.generate/1"


class ConfigError(Exception):
    """Bad flags or config file; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _flag(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# Per-subcommand defaults that differ from the shared ones.
_COMMAND_DEFAULTS = {
    "ablate": {"ratio": 0.25, "out": "ablation.csv"},
    "generate": {"ratio": 1.0},
    "needle": {"ratio": 0.5, "reps": 50, "lengths": [2048]},
    "bench": {"ratio": 0.1, "reps": 5, "lengths": [512, 1024, 2048, 4096], "heads": 4, "head_dim": 128},
    "compare": {"ratio": 1.0},
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file with default flag values")
    p.add_argument("--model", help="weights file (FKVW); a seeded random model is used if omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sink", type=int, default=10, help="attention-sink rows kept verbatim (S)")
    p.add_argument("--recent", type=int, default=50, help="recent rows kept verbatim (R)")
    p.add_argument("--chunks", type=int, default=22, help="frequency chunks per layer (C)")
    p.add_argument("--ratio", type=float, help="fraction of chunks retained (r)")
    p.add_argument("--mode", choices=["exact", "approx"], default="approx")
    p.add_argument("--mask", help="PruneMask JSON; overrides --ratio")
    p.add_argument("--out", help="output file (stdout if omitted)")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--lengths", type=_int_list, default=[512, 1024, 2048, 4096])
    p.add_argument("--steps", type=int, default=10, help="decode steps")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=16)
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="faedkv", description="Frequency-domain KV-cache compression harness.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ablate", help="layer/chunk perplexity ablation and greedy mask")
    _common(p)
    p.add_argument("--corpus", help="token sequences, one per line")
    p.add_argument("--n-seqs", type=int, default=4, help="random corpus size when --corpus is omitted")
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--mask-out", help="where to write the greedy mask (default: --out with .json)")
    p.add_argument("--sweep", type=_int_list, help="chunk counts to sweep, e.g. 4,8,12,22")
    p.add_argument("--sweep-out", help="CSV for the sweep (default: --out with .sweep.csv)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("generate", help="greedy decoding with a compressed cache")
    _common(p)
    p.add_argument("--prompt", help="token file; the first sequence is the prompt")
    p.add_argument("--prompt-len", type=int, default=128, help="random prompt length when --prompt is omitted")
    p.add_argument("--reference", type=_flag, default=True, help="also decode with a full cache")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("needle", help="synthetic needle retrieval across depths")
    _common(p)
    p.add_argument("--dim", type=int, default=128, help="probe key/value width")
    p.add_argument("--baseline", help="also write hard-truncation accuracies to this CSV")
    p.set_defaults(func=cmd_needle)

    p = sub.add_parser("bench", help="prefill and decode latency")
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", help="per-position reconstruction error of the middle segment")
    _common(p)
    p.add_argument("--prompt", help="token file; the first sequence is the prompt")
    p.add_argument("--prompt-len", type=int, default=256)
    p.set_defaults(func=cmd_compare, steps=0)

    for name, defaults in _COMMAND_DEFAULTS.items():
        sub.choices[name].set_defaults(**defaults)
    return parser


def _read_config(path: str) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r}")
        try:
            if isinstance(action, argparse._StoreTrueAction):
                value = _flag(raw)
            else:
                value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"config key {key}: {value!r} not one of {sorted(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sub, _read_config(args.config))
        args = parser.parse_args(argv)
    _validate(args)
    return args


def _validate(args) -> None:
    if args.sink < 0 or args.recent < 0:
        raise ConfigError("--sink and --recent must be non-negative")
    if args.chunks < 1:
        raise ConfigError("--chunks must be at least 1")
    if not 0 < args.ratio <= 1:
        raise ConfigError(f"--ratio must be in (0, 1], got {args.ratio}")
    if args.reps < 1:
        raise ConfigError("--reps must be at least 1")
    if args.steps < 0:
        raise ConfigError("--steps must be non-negative")
    if any(n < 1 for n in args.lengths):
        raise ConfigError("--lengths must be positive")


# -- shared helpers ------------------------------------------------------------

def _model(args):
    if args.model:
        return load_weights(args.model)
    config = ModelConfig(n_layers=args.layers, n_heads=args.heads, head_dim=args.head_dim,
                         vocab_size=args.vocab)
    return init_model(config, args.seed)


def _mask(args, n_layers: int) -> PruneMask:
    if args.mask:
        mask = PruneMask.load(args.mask)
        if mask.n_layers < n_layers:
            raise InvalidInputError(f"mask covers {mask.n_layers} layers, model has {n_layers}")
        return mask
    return PruneMask.lowest(n_layers, args.chunks, args.ratio)


def _prompt(args, model) -> np.ndarray:
    if args.prompt:
        seqs = read_sequences(args.prompt)
        if not seqs or seqs[0].size == 0:
            raise InvalidInputError(f"{args.prompt}: prompt is empty")
        return seqs[0]
    if args.prompt_len < 1:
        raise InvalidInputError("prompt is empty")
    rng = np.random.default_rng([args.seed, 1])
    return rng.integers(0, model.config.vocab_size, args.prompt_len)


def _emit(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _sibling(path: str | None, suffix: str) -> str | None:
    if path is None or path == "-":
        return None
    return str(Path(path).with_suffix(suffix))


# -- subcommands -------------------------------------------------------------------

def cmd_ablate(args) -> int:
    model = _model(args)
    if args.corpus:
        corpus = read_sequences(args.corpus)
    else:
        rng = np.random.default_rng([args.seed, 2])
        corpus = [rng.integers(0, model.config.vocab_size, args.seq_len) for _ in range(args.n_seqs)]
    table = ablation.run_ablation(model, corpus, args.chunks, args.sink, args.recent)
    mask = ablation.greedy_select(table, args.ratio)
    _emit(table.to_csv(), args.out)
    mask_path = args.mask_out or _sibling(args.out, ".json")
    if mask_path:
        mask.save(mask_path)
    log.info("baseline perplexity %.6g; kept chunks per layer: %s", table.ppl_orig, mask.layers)
    if args.sweep:
        rows = ablation.chunk_sweep(model, corpus, args.sweep, args.ratio, args.sink, args.recent)
        for row in rows:
            row.update({k: repr(float(row[k])) for k in ("ppl_orig", "ppl_masked", "delta")})
        text = _csv(rows, ["C", "r", "ppl_orig", "ppl_masked", "delta"])
        sweep_path = args.sweep_out or _sibling(args.out, ".sweep.csv")
        _emit(text, sweep_path)
    return EXIT_OK


def _top2_gap(logits: np.ndarray) -> float:
    top = np.sort(logits)[-2:]
    return float(top[1] - top[0]) if logits.size > 1 else float("inf")


def cmd_generate(args) -> int:
    model = _model(args)
    prompt = _prompt(args, model)
    comp = Compression(args.sink, args.recent, _mask(args, model.config.n_layers), Mode.parse(args.mode))
    if prompt.size < args.sink + args.recent + 2:
        raise InvalidInputError(
            f"prompt of {prompt.size} tokens is shorter than sink + recent + 2 = {args.sink + args.recent + 2}"
        )
    logits, caches = model.prefill(prompt, comp)
    # Full-cache twin fed the same tokens, for per-step logit divergence.
    _, twin = model.prefill(prompt)
    last, twin_last = logits[-1], logits[-1]
    ids, steps = [], []
    for step in range(args.steps):
        tok = int(np.argmax(last))
        ids.append(tok)
        steps.append({
            "step": step,
            "token": tok,
            "max_abs_logit_delta": float(np.max(np.abs(last - twin_last))),
            "reference_top2_gap": _top2_gap(twin_last),
            "same_choice": tok == int(np.argmax(twin_last)),
        })
        last = model.decode_step(caches, tok)
        twin_last = model.decode_step(twin, tok)

    report = {
        "schema": GENERATE_SCHEMA,
        "config": _config_block(args, model),
        "prompt_len": int(prompt.size),
        "generated": ids,
        "steps": steps,
        "max_abs_logit_delta": max((s["max_abs_logit_delta"] for s in steps), default=0.0),
    }
    if args.reference:
        reference, _ = _free_running(model, prompt, args.steps)
        report["reference"] = reference
        report["matches_reference"] = reference == ids
    _emit(_json(report), args.out)
    return EXIT_OK


def _free_running(model, prompt, steps):
    logits, caches = model.prefill(prompt)
    last = logits[-1]
    ids = []
    for _ in range(steps):
        ids.append(int(np.argmax(last)))
        last = model.decode_step(caches, ids[-1])
    return ids, last


def _config_block(args, model) -> dict:
    return {
        "sink": args.sink,
        "recent": args.recent,
        "chunks": args.chunks,
        "ratio": args.ratio,
        "mode": Mode.parse(args.mode).label,
        "mask": args.mask,
        "seed": args.seed,
        "layers": model.config.n_layers,
        "heads": model.config.n_heads,
        "head_dim": model.config.head_dim,
        "vocab": model.config.vocab_size,
        "steps": args.steps,
    }


def cmd_needle(args) -> int:
    columns = ["context_len", "depth", "r", "accuracy"]
    mask = PruneMask.load(args.mask) if args.mask else None
    rows, base_rows = [], []
    for n in args.lengths:
        if n <= args.sink + args.recent:
            raise InvalidInputError(f"context {n} leaves no middle segment")
        got = needle.run_needle(n, args.ratio, args.reps, args.chunks, args.sink, args.recent,
                                d=args.dim, seed=args.seed, mask=mask)
        rows += got
        line = f"context {n}: flatness {needle.flatness(got, args.sink, args.recent):.4f}"
        if args.baseline:
            trunc = needle.run_needle(n, args.ratio, args.reps, args.chunks, args.sink, args.recent,
                                      d=args.dim, seed=args.seed, method="truncate")
            base_rows += trunc
            middle = [r["accuracy"] for r in trunc
                      if not needle.protected(r["position"], n, args.sink, args.recent)]
            line += f"; truncation middle-depth accuracy max {max(middle, default=0.0):.4f}"
        print(line, file=sys.stderr)
    _emit(_csv(rows, columns), args.out)
    if args.baseline:
        _emit(_csv(base_rows, columns), args.baseline)
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = []
    for n in args.lengths:
        if n <= args.sink + args.recent + args.chunks:
            raise InvalidInputError(f"context {n} is too short to split into {args.chunks} chunks")
        rows += bench.bench_length(n, args.ratio, args.steps, args.reps, args.heads, args.head_dim,
                                   args.chunks, args.sink, args.recent, args.mode, args.seed)
    _emit(_csv(rows, ["phase", "context_len", "r", "median_ns", "iqr_ns"]), args.out)
    return EXIT_OK


def removed_bins_error(X: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """``|Re IDFT(removed bins)|`` of ``X`` (heads, M, d), by direct DFT matrices."""
    M = X.shape[1]
    spectrum = np.einsum("km,hmd->hkd", dft_matrix(M, -1), X)
    removed = spectrum.copy()
    removed[:, keep] = 0
    residue = np.einsum("mk,hkd->hmd", dft_matrix(M, +1), removed) / M
    return np.abs(residue.real)


def cmd_compare(args) -> int:
    model = _model(args)
    prompt = _prompt(args, model)
    mode = Mode.parse(args.mode)
    mask = _mask(args, model.config.n_layers)
    N = prompt.size
    S, R = args.sink, args.recent
    if N <= S + R:
        raise InvalidInputError(f"prompt of {N} tokens leaves no middle segment")
    M = N - S - R
    record: list = []
    model.forward(prompt, record=record)

    rng = np.random.default_rng([args.seed, 3])
    H, d = model.config.n_heads, model.config.head_dim
    # Decoded tokens enter the window first, so folding ``steps`` rows takes ``steps + R`` appends.
    n_append = args.steps + R if args.steps else 0
    fold = [(rng.normal(size=(H, d)), rng.normal(size=(H, d))) for _ in range(n_append)]

    error = np.zeros(M)
    oracle = np.zeros(M)
    kept = []
    folded = 0
    # Largest bin and input magnitudes; only exact mode guarantees bin <= input.
    peak_bin = peak_input = 0.0
    for layer, (K, V) in enumerate(record):
        cache = prefill_compress(K, V, mask, layer, S, R, mode)
        twin = prefill_compress(K, V, None, layer, S, R, mode) if args.steps else None
        kept.append(int(cache.kept_indices.size))
        for k, v in fold:
            cache.append(k, v)
            twin.append(k, v)
        folded = cache.tokens_folded - M
        for state in (cache.freq_k, cache.freq_v):
            if state.bins.size:
                peak_bin = max(peak_bin, float(np.max(np.abs(state.bins))))
        inputs = [K[:, S : N - R], V[:, S : N - R]] + [x for row in fold for x in row]
        peak_input = max(peak_input, max(float(np.max(np.abs(x))) for x in inputs))
        k_mid, v_mid = cache.reconstruct()
        if twin is None:
            ref_k, ref_v = K[:, S : N - R], V[:, S : N - R]
            idx = cache.kept_indices
            oracle = np.maximum(oracle, np.max(removed_bins_error(ref_k, idx), axis=(0, 2)))
            oracle = np.maximum(oracle, np.max(removed_bins_error(ref_v, idx), axis=(0, 2)))
        else:
            ref_k, ref_v = twin.reconstruct()
        err = np.maximum(np.max(np.abs(k_mid - ref_k), axis=(0, 2)), np.max(np.abs(v_mid - ref_v), axis=(0, 2)))
        error = np.maximum(error, err)

    summary = {
        "max": float(np.max(error)),
        "mean": float(np.mean(error)),
        "median": float(np.median(error)),
        "rms": float(np.sqrt(np.mean(error**2))),
    }
    report = {
        "schema": COMPARE_SCHEMA,
        "config": _config_block(args, model),
        "prompt_len": int(N),
        "period": int(M),
        "kept_bins": kept,
        "tokens_folded": int(folded),
        "reference": "unpruned_twin" if args.steps else "original",
        "positions": list(range(S, S + M)),
        "error": error.tolist(),
        "oracle_error": None if args.steps else oracle.tolist(),
        "max_oracle_discrepancy": None if args.steps else float(np.max(np.abs(error - oracle))),
        "summary": summary,
        "bin_magnitude": {"max_bin": peak_bin, "max_input": peak_input},
    }
    _emit(_json(report), args.out)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"faedkv: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"faedkv: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, MemoryError) as exc:
        print(f"faedkv: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
