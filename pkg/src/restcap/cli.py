"""Operator surface: generate synthetic worlds, run training, evaluate,
sweep ablation axes, and inspect caption evolution.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import sys
from pathlib import Path

from .ablations import (
    adapter_probe,
    eval_state,
    format_table,
    run_on_world,
    supervision_compare,
    sweep,
)
from .errors import ConfigError, DataError, NumericError, RestcapError
from .evaluation import (
    ClassEmbeddingTable,
    evaluate_topk,
    generalized_eval,
    generate_predictions,
)
from .loop import RestConfig
from .model import load_checkpoint
from .providers import FileCaptionProvider, text_provider_from_arg
from .core import Vocabulary, load_manifest
from .loop import run_rest
from .synthworld import SynthSpec, World, generate_world, load_world


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _apply_spec_overrides(spec: SynthSpec, overrides: dict) -> SynthSpec:
    known = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
    return dataclasses.replace(spec, **overrides)


def cmd_synth(args) -> int:
    spec = SynthSpec()
    if args.spec:
        doc = json.loads(Path(args.spec).read_text())
        spec = _apply_spec_overrides(spec, doc)
    spec = _apply_spec_overrides(spec, _parse_overrides(args.overrides))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    world = generate_world(spec)
    world.write(args.out)
    print(f"wrote world with {len(world.manifest)} videos, "
          f"{len(world.class_names)} classes to {args.out}")
    return 0


def _load_train_config(args) -> RestConfig:
    config = RestConfig.synthetic()
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        config = config.with_overrides(doc)
    config = config.with_overrides(_parse_overrides(args.overrides))
    if args.seed is not None:
        config = config.with_overrides({"seed": args.seed})
    return config


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    manifest = load_manifest(data_dir / "manifest.json")
    captions = FileCaptionProvider(data_dir / "captions.jsonl")
    text_provider = text_provider_from_arg(args.text_provider, data_dir)
    config = _load_train_config(args)
    state = run_rest(manifest, text_provider, captions, config, run_dir=args.out)
    if args.dump_index:
        state.index.to_json(Path(args.out) / "neighbor_index.json")
    last_loss = next((m["loss"] for m in reversed(state.metrics)
                      if m.get("type") == "epoch"), float("nan"))
    print(f"trained {config.total_epochs} epochs, {state.round_no} retrieval rounds; "
          f"final epoch loss {last_loss:.4f}")
    print(f"artifacts in {args.out}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    config_file = run_dir / "config.json"
    if not config_file.exists():
        raise DataError(f"run directory has no frozen config: {config_file}")
    config = RestConfig.from_dict(json.loads(config_file.read_text()))

    ckpt = run_dir / "checkpoints" / f"{args.checkpoint}.bin"
    model, sidecar = load_checkpoint(ckpt)
    vocab = Vocabulary(sidecar["vocab"])

    data_dir = Path(args.data)
    world = load_world(data_dir)
    preds = generate_predictions(model, world.manifest, vocab, config.prompt,
                                 config.beam, config.gen_max_new)
    if args.protocol == "standard":
        table = ClassEmbeddingTable.build(world.class_names, world.text_encoder)
        report = evaluate_topk(preds, world.labels(), table, world.text_encoder)
    else:
        report = generalized_eval(preds, world.labels(), world.seen_classes,
                                  world.unseen_classes, world.text_encoder)
    out_file = run_dir / f"eval_{args.protocol}.json"
    report.to_json(out_file)
    print(report.summary_text())
    print(f"report written to {out_file}")
    return 0


_DEFAULT_AXIS_VALUES = {"K": "1,3,5", "H": "1,20", "rounds": "1,3"}


def cmd_ablate(args) -> int:
    world = load_world(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    base = RestConfig.synthetic(seed=seed)
    if args.config:
        base = base.with_overrides(json.loads(Path(args.config).read_text()))

    if args.axis in ("K", "H", "rounds"):
        raw = args.values or _DEFAULT_AXIS_VALUES[args.axis]
        values = [int(v) for v in raw.split(",") if v]
        rows = sweep(world, base, args.axis, values)
    elif args.axis == "adapter":
        probe = adapter_probe(world, seed=seed)
        rows = [
            {"axis": "adapter", "value": "on", "pair_top1": probe["adapter_on"]},
            {"axis": "adapter", "value": "off", "pair_top1": probe["adapter_off"]},
        ]
    elif args.axis == "supervision":
        cmp = supervision_compare(world, base)
        rows = [
            {"axis": "supervision", "value": "pseudo-captions",
             "unseen_top1": cmp["rest_unseen_top1"],
             "seen_word_fraction": cmp["rest_seen_word_fraction"]},
            {"axis": "supervision", "value": "class-labels",
             "unseen_top1": cmp["label_unseen_top1"],
             "seen_word_fraction": cmp["label_seen_word_fraction"]},
        ]
    else:
        raise ConfigError(f"invalid ablation axis: {args.axis}")

    table = format_table(rows)
    (out_dir / f"ablation_{args.axis}.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True))
    (out_dir / f"ablation_{args.axis}.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_inspect(args) -> int:
    run_dir = Path(args.run)
    cache_dir = run_dir / "caches"
    if not cache_dir.exists():
        raise DataError(f"no cache snapshots under {run_dir}")
    files = sorted(cache_dir.glob("round_*.jsonl"),
                   key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise DataError(f"no cache snapshots under {cache_dir}")
    found = False
    for path in files:
        round_no = int(path.stem.split("_")[1])
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["id"] != args.video:
                    continue
                found = True
                if rec["captions"]:
                    top = rec["captions"][0]
                    print(f"round {round_no}: [{top['origin']}] "
                          f"({top['score']:.4f}) {top['text']}")
                else:
                    print(f"round {round_no}: (empty cache)")
    if not found:
        raise DataError(f"video {args.video} not found in cache snapshots")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="restcap",
        description="retrieval-augmented self-training for a generative action captioner")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (needs threadpoolctl)")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=lambda **kw: argparse.ArgumentParser(
                                    parents=[common], **kw))

    p = sub.add_parser("synth", help="generate a synthetic world")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file with synth spec fields")
    p.add_argument("overrides", nargs="*", help="spec overrides key=value")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run the retrieve-and-self-train loop")
    p.add_argument("--data", required=True, help="world/export directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON file with config fields")
    p.add_argument("--text-provider", default="auto",
                   help="auto | hash:<seed>:<dim> | stream:<host>:<port>")
    p.add_argument("--dump-index", action="store_true",
                   help="write the neighbor index as JSON")
    p.add_argument("overrides", nargs="*", help="config overrides key=value")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("standard", "generalized"),
                   default="standard")
    p.add_argument("--checkpoint", default="final")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True,
                   choices=("K", "H", "rounds", "adapter", "supervision"))
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--config", help="JSON file with base config fields")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("inspect", help="print a video's top caption per round")
    p.add_argument("--run", required=True)
    p.add_argument("--video", required=True)
    p.set_defaults(fn=cmd_inspect)
    return parser


@contextlib.contextmanager
def _thread_limit(threads):
    if threads is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=threads):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except RestcapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except json.JSONDecodeError as exc:
        print(f"config error: invalid JSON: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
