"""``streamcap`` command line: synth-data, train, infer, eval, flops, inspect.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import flops as fl
from . import plotting
from .codec import CodecError, Event, Vocabulary, decoder_length
from .config import ConfigOverrideError, RunConfig, apply_overrides
from .inference import DECODE_PRESETS, PREDICTION_FORMAT, check_model_codec, stream_video
from .metrics import evaluate
from .model import ConfigError, FactorizedCaptioner, load_checkpoint, read_manifest, save_checkpoint
from .synth import DatasetError, SynthSpecError, generate, iter_jsonl, read_dataset, validate_dataset, write_dataset
from .training import TrainingDiverged, train

log = logging.getLogger("streamcap")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(cfg, getattr(args, "set", None) or [])


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


# ------------------------------------------------------------- subcommands


def cmd_synth_data(args) -> int:
    cfg = _run_config(args)
    spec = replace(cfg.synth, seed=args.seed)
    if args.noise_std is not None:
        spec = replace(spec, noise_std=args.noise_std)
    write_dataset(generate(spec, args.count, args.start), args.output)
    print(json.dumps({"wrote": str(args.output), "videos": args.count, "seed": spec.seed}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.steps is not None:
        cfg.train = replace(cfg.train, steps=args.steps, warmup_steps=min(cfg.train.warmup_steps, args.steps))
    out = Path(args.out)
    examples = read_dataset(args.data)
    if args.limit:
        examples = examples[: args.limit]
    if not examples:
        raise DatasetError(f"{args.data}: no records")
    vocab = Vocabulary.build((e.caption for ex in examples for e in ex.events), cfg.codec.bins)
    frames, width = examples[0].features.shape
    mc = replace(
        cfg.model,
        frame_dim=width,
        S=max(frames // cfg.model.T, 1),
        l=decoder_length(cfg.codec),
        vocab_size=len(vocab),
        dropout=cfg.train.dropout,
    )
    mc.validate()
    cfg.model = mc
    cfg.paths.dataset, cfg.paths.checkpoint = str(args.data), str(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run_config.json")
    vocab.save(out / "vocab.json")
    model = FactorizedCaptioner(mc, seed=cfg.train.seed)
    with open(out / "train_log.jsonl", "w", buffering=1) as fh:
        rows = train(model, examples, cfg.codec, vocab, cfg.train, log_fh=fh)
    save_checkpoint(model, out)
    plotting.loss_curve(rows, out / "loss_curve.png")
    print(json.dumps({"checkpoint": str(out), "steps": len(rows), "final_loss": rows[-1]["loss"]}))
    return EXIT_OK


def _load_run(run_dir: Path):
    cfg = RunConfig.load(run_dir / "run_config.json")
    model = load_checkpoint(run_dir)
    vocab = Vocabulary.load(run_dir / "vocab.json")
    check_model_codec(model, cfg.codec, vocab)
    return cfg, model, vocab


def cmd_infer(args) -> int:
    run_dir = Path(args.run)
    cfg, model, vocab = _load_run(run_dir)
    cfg = apply_overrides(cfg, args.set or [])
    dcfg = DECODE_PRESETS[args.preset] if args.preset else cfg.decode
    examples = read_dataset(args.data)
    sink = open(args.output, "w", buffering=1) if args.output else sys.stdout
    dropped = 0
    try:
        for ex in examples:
            session = None
            for session, fresh in stream_video(model, vocab, cfg.codec, dcfg, ex.features, ex.duration, ex.id):
                for rec in session.records(fresh):
                    sink.write(json.dumps(rec) + "\n")
                sink.flush()
            dropped += session.dropped if session else 0
    finally:
        if sink is not sys.stdout:
            sink.close()
    summary = {"format_version": PREDICTION_FORMAT, "videos": len(examples), "dropped_parse_count": dropped,
               "decode": dcfg.to_dict()}
    if args.output:
        _dump(summary, f"{args.output}.summary.json")
    else:
        print(json.dumps(summary), file=sys.stderr)
    return EXIT_OK


def read_predictions(path) -> tuple[dict, int]:
    """Prediction JSONL (one event per line) or dataset-shaped records (``id`` + ``events``)."""
    preds: dict[str, list[Event]] = {}
    for lineno, rec in iter_jsonl(path):
        try:
            if "events" in rec:
                preds.setdefault(str(rec["id"]), []).extend(
                    Event(float(e["start"]), float(e["end"]), str(e["caption"])) for e in rec["events"]
                )
            else:
                preds.setdefault(str(rec["video_id"]), []).append(
                    Event(float(rec["start"]), float(rec["end"]), str(rec["caption"]))
                )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad prediction record ({exc})") from None
    summary = Path(f"{path}.summary.json")
    dropped = json.loads(summary.read_text()).get("dropped_parse_count", 0) if summary.exists() else 0
    return preds, dropped


def cmd_eval(args) -> int:
    examples = read_dataset(args.data)
    preds, dropped = read_predictions(args.pred)
    gts = {ex.id: ex.events for ex in examples}
    unknown = sorted(set(preds) - set(gts))
    if unknown:
        raise DatasetError(f"predictions for unknown video ids: {unknown[:5]}")
    report = evaluate(preds, gts, dropped)
    d = report.to_dict()
    print(json.dumps(d, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(d, out / "metrics.json")
        (out / "metrics.tsv").write_text(report.tsv_header() + "\n" + report.tsv_row() + "\n")
        plotting.f1_bars(d, out / "f1_thresholds.png")
    return EXIT_OK


def cmd_flops(args) -> int:
    names = args.preset or ["large-8seg", "large-16seg"]
    cfgs = {n: fl.preset(n) for n in names}
    if args.set:
        cfgs = {n: replace(c, **{k: int(v) for k, v in (s.split("=", 1) for s in args.set)}) for n, c in cfgs.items()}
    reports = [(n, fl.compare(c)) for n, c in cfgs.items()]
    print(fl.table(reports))
    if any(r.vision_total for _, r in reports):
        print("\nincluding vision stack:")
        print(fl.table(reports, inclusive=True))
    payload = {n: r.to_dict() for n, r in reports}
    print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(payload, out / "flops.json")
        cols = ["setting", "global_flops", "factorized_flops", "savings", "per_segment_flops"]
        lines = ["\t".join(cols)] + [
            f"{n}\t{r.global_total}\t{r.factorized_total}\t{r.savings_fraction:.6f}\t{r.per_segment_flops}"
            for n, r in reports
        ]
        (out / "flops.tsv").write_text("\n".join(lines) + "\n")
        base = cfgs[names[0]]
        Ts = list(range(1, 33))
        plotting.savings_vs_segments(
            Ts, [fl.compare(replace(base, T=t)).savings_fraction for t in Ts], out / "savings_vs_T.png", names[0]
        )
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        manifest = read_manifest(path)
        model = load_checkpoint(path)
        groups: dict[str, int] = {}
        for name, p in model.named_parameters():
            groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + int(np.prod(p.shape))
        out = {
            "format_version": manifest["format_version"],
            "config": manifest["config"],
            "dtype": manifest["dtype"],
            "parameters_total": model.num_parameters(),
            "parameters_by_module": groups,
            "tensors": len(manifest["parameters"]),
        }
    else:
        out = validate_dataset(path)
    print(json.dumps(out, indent=2))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="streamcap", description="Streaming dense video captioning toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. model.d_model=96")

    s = sub.add_parser("synth-data", help="write a synthetic JSONL dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--start", type=int, default=0, help="index of the first video")
    s.add_argument("--noise-std", type=float)
    s.add_argument("-o", "--output", required=True)
    with_config(s)
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("train", help="train a model and write a checkpoint directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--limit", type=int, help="use only the first N videos")
    with_config(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="stream predictions as JSONL")
    s.add_argument("--run", required=True, help="checkpoint directory written by train")
    s.add_argument("--data", required=True)
    s.add_argument("-o", "--output")
    s.add_argument("--preset", choices=sorted(DECODE_PRESETS))
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="score predictions against a dataset")
    s.add_argument("--pred", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="directory for metrics.json, metrics.tsv and figures")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("flops", help="analytic global vs factorized decoder cost")
    s.add_argument("--preset", action="append", choices=sorted(fl.PRESETS))
    s.add_argument("--set", action="append", metavar="FIELD=INT")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("inspect", help="checkpoint manifest or dataset validation")
    s.add_argument("path")
    s.set_defaults(fn=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigOverrideError as exc:
        print(f"streamcap: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, SynthSpecError, CodecError, ConfigError, TrainingDiverged, OSError, ValueError) as exc:
        print(f"streamcap: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
