"""Command-line surface tying the pipeline stages together."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .config import parse_override, resolve_config
from .errors import DataError, EeglmError, NumericError, TransportError, UsageError
from .evaluate import evaluate_checkpoint
from .profiler import PROFILE_KEYS
from .quantizer import save_tokens
from .refiner import attention_rows
from .signal_io import WORK_FS, load_recording, preprocess, save_container
from .synth import make_dataset
from .training import load_model, make_llm_client, profile_recording, run_stage

ATTN_HEADER = ("expert", "channel", "patch", "weight")


def _echo_config(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: dict) -> int:
    out = Path(args.out)
    manifest = make_dataset(
        out,
        n_per_class=args.per_class,
        classes=tuple(cfg["data"]["classes"]),
        montage=args.montage,
        fs=args.fs,
        seconds=args.seconds,
        noise=args.noise,
        seed=cfg["seed"],
    )
    _echo_config(out, cfg)
    print(f"wrote {len(manifest['samples'])} samples to {out}")
    return 0


def cmd_preprocess(args, cfg: dict) -> int:
    rec = load_recording(args.input, fs=args.fs)
    notch = None if args.notch == 0.0 else args.notch
    out = preprocess(rec, target_fs=args.target_fs, low=args.low, high=args.high, notch=notch)
    provenance = {
        "source": str(args.input),
        "source_fs": rec.fs,
        "resample_fs": args.target_fs,
        "band": [args.low, args.high],
        "notch": notch,
        "scaling": "median-iqr",
        "order": ["resample", "bandpass+notch", "robust-scale"],
        "seed": cfg["seed"],
    }
    save_container(out, args.out, extra_meta={"provenance": provenance})
    print(f"wrote {out.n_channels}x{out.n_samples} container to {args.out}")
    return 0


def cmd_tokenize(args, cfg: dict) -> int:
    from .signal_io import load_container

    model, _ = load_model(args.checkpoint)
    rec = load_container(args.container)
    tokens, _ = model.tokenize_recording(rec)
    save_tokens(args.out, [tokens], model.quantizer.cfg.num_codes)
    print(f"wrote {tokens.indices.size} tokens ({tokens.channels}x{tokens.patches}) to {args.out}")
    return 0


def cmd_profile(args, cfg: dict) -> int:
    from .signal_io import load_container
    from .topology import build_hierarchy, get_montage
    from .profiler import TaskMeta, build_prompt, extract_features, generate_profile, verbalize

    rec = load_container(args.container)
    hier = build_hierarchy(get_montage(cfg["data"]["montage"]))
    features = extract_features(rec, hier)
    meta = TaskMeta(
        sample_name=args.sample_name or Path(args.container).name,
        dataset_name=cfg["data"]["dataset_name"],
        task_logic=cfg["data"]["task_description"],
        num_channels=rec.n_channels,
        num_samples=rec.n_samples,
    )
    prompt = build_prompt(meta, verbalize(features), tuple(cfg["data"]["classes"]))
    result = generate_profile(prompt, make_llm_client(cfg["llm"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "prompt.txt").write_text(prompt)
    (out / "features.json").write_text(json.dumps(asdict(features), indent=2, default=float))
    record = dict(zip(PROFILE_KEYS, result.profile.as_tuple()))
    record["_retries"] = result.retries
    (out / "profile.json").write_text(json.dumps(record, indent=2))
    _echo_config(out, cfg)
    print(f"wrote prompt.txt, features.json, profile.json to {out}")
    return 0


def cmd_train(args, cfg: dict) -> int:
    run_dir = Path(args.out)
    summary = run_stage(cfg, run_dir, resume=args.resume)
    print(f"stage {cfg['stage']} finished after {summary['steps']} steps -> {run_dir}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    out = Path(args.out) if args.out else None
    report = evaluate_checkpoint(args.checkpoint, args.data, out_dir=out)
    print(json.dumps({"task": report["task"], "metrics": report["metrics"]}, indent=2))
    return 0


def cmd_attn_export(args, cfg: dict) -> int:
    from .signal_io import load_container

    model, _ = load_model(args.checkpoint)
    rec = load_container(args.container)
    tokens, z_q = model.tokenize_recording(rec)
    if args.profile:
        try:
            record = json.loads(Path(args.profile).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read profile file {args.profile}: {e}") from e
        text = " ".join(str(record[k]) for k in PROFILE_KEYS if k in record)
        if not text.strip():
            raise DataError(f"profile file {args.profile} holds none of the expected keys")
    else:
        _, _, result = profile_recording(
            rec, model, Path(args.container).name, make_llm_client(cfg["llm"])
        )
        text = result.profile.flat_text()
    experts = model.refiner(model.embedder.embed(text), z_q)
    amap = experts.attention_map
    n_experts = amap.shape[0]
    c, p = tokens.channels, tokens.patches
    # renormalize across channels within each (expert, patch) group so the
    # exported weights read as per-patch spatial distributions
    grouped = amap.reshape(n_experts, c, p)
    grouped = grouped / grouped.sum(axis=1, keepdims=True)
    rows = attention_rows(grouped.reshape(n_experts, c * p), rec.channels, p)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ATTN_HEADER)
        for expert, channel, patch_idx, weight in rows:
            writer.writerow([expert, channel, patch_idx, repr(weight)])
    print(f"wrote {len(rows)} attention rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eeglm",
        description="Signal-to-language-model pipeline: preprocess, tokenize, "
        "profile, train, evaluate, export.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", help="output directory or file")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config entry, e.g. --set optimizer.lr=0.01",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--per-class", type=int, default=8)
    p.add_argument("--montage", default="synthetic-4")
    p.add_argument("--fs", type=float, default=200.0)
    p.add_argument("--seconds", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.25)

    p = sub.add_parser("preprocess", help="resample, filter and scale a recording")
    p.add_argument("input", help="container directory or CSV file")
    p.add_argument("--fs", type=float, default=None, help="sampling rate for CSV input")
    p.add_argument("--target-fs", type=float, default=WORK_FS)
    p.add_argument("--low", type=float, default=0.1)
    p.add_argument("--high", type=float, default=75.0)
    p.add_argument("--notch", type=float, default=50.0, help="notch frequency (0 disables)")

    p = sub.add_parser("tokenize", help="quantize a container into discrete tokens")
    p.add_argument("--container", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("profile", help="verbalize features and fetch a semantic profile")
    p.add_argument("--container", required=True)
    p.add_argument("--sample-name", default=None)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=("vq", "cpt", "sft"), default=None)
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--init-from", default=None, help="checkpoint of the previous stage")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="score a labeled dataset through a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("attn-export", help="export expert attention weights as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--container", required=True)
    p.add_argument("--profile", default=None, help="profile.json to calibrate with")

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "tokenize": cmd_tokenize,
    "profile": cmd_profile,
    "train": cmd_train,
    "eval": cmd_eval,
    "attn-export": cmd_attn_export,
}

NEEDS_OUT = {"synth", "preprocess", "tokenize", "profile", "train", "attn-export"}


def _resolve(args) -> dict:
    overrides = [parse_override(spec) for spec in args.set]
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    if args.command == "train":
        if args.stage:
            overrides.append({"stage": args.stage})
        if args.data:
            overrides.append({"data": {"train_dir": args.data}})
        if args.init_from:
            overrides.append({"train": {"init_from": args.init_from}})
        if args.epochs is not None:
            overrides.append({"train": {"epochs": args.epochs}})
    return resolve_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command in NEEDS_OUT and not args.out:
            raise UsageError(f"command {args.command!r} needs --out")
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TransportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except EeglmError as e:  # pragma: no cover - base-class fallback
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
