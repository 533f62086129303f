"""Command-line entry point: ``scarcebench {synth,build,regime,train,eval,report}``.

Every artifact carries the producing command line (output paths removed,
so reruns into a different directory stay byte-identical) and a hash of
the effective configuration.  Images are resolved against ``--data-root``,
else ``$SCARCEBENCH_DATA_ROOT``, else the manifest's directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .datamodel import OBJECT_HEADS, IMAGE_HEADS, ManifestParseError, load_manifest, save_manifest, validate_manifest


REGIME_KINDS = ("scarce-class", "scarce-image", "scarce-class-adjust", "supervision-fraction")
OUTPUT_FLAGS = ("--out", "--summary", "--portion-csv")


class CommandError(Exception):
    pass


def _command_line(argv) -> str:
    """argv without output paths."""
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in OUTPUT_FLAGS:
            skip = True
            continue
        if any(a.startswith(f + "=") for f in OUTPUT_FLAGS):
            continue
        out.append(a)
    return "scarcebench " + " ".join(out)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _header(argv, config: dict) -> dict:
    return {"command": _command_line(argv), "config_hash": _hash(config)}


def _load_valid(path):
    m = load_manifest(path)
    problems = validate_manifest(m)
    if problems:
        raise CommandError(f"{path}: manifest failed validation:\n  " + "\n  ".join(problems[:20]))
    return m


def _data_root(args):
    from .data import default_root

    return Path(args.data_root) if getattr(args, "data_root", None) else default_root(args.manifest)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, argv) -> int:
    from .benchgen.synthetic import render, synthetic_raw, write_fixture, zipf_counts

    if args.counts:
        counts = [int(c) for c in args.counts.split(",")]
    else:
        counts = zipf_counts(args.categories, args.alpha, args.total)
    raw = synthetic_raw(
        counts,
        image_size=(args.image_size, args.image_size),
        objects_per_image=args.objects_per_image,
        n_attributes=args.attributes,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.render:
        render(raw, out, seed=args.seed)
    write_fixture(raw, out / "fixture.json")
    print(f"wrote {out / 'fixture.json'}: {len(raw.images)} images, {sum(counts)} objects over {len(counts)} categories")
    return 0


def cmd_build(args, argv) -> int:
    from .benchgen import build_manifest, load_raw, split_summary

    source = args.fixture or args.ade20k
    parser = "fixture" if args.fixture else "ade20k"
    kwargs = {"stuff_dir": args.stuff_dir} if parser == "ade20k" and args.stuff_dir else {}
    raw = load_raw(source, parser, **kwargs)
    config = {"gamma": args.gamma, "seed": args.seed, "min_count": args.min_count, "parser": parser}
    if parser == "fixture":
        config["source_sha256"] = hashlib.sha256(Path(source).read_bytes()).hexdigest()
    m = build_manifest(raw, gamma=args.gamma, global_seed=args.seed, min_count=args.min_count, header=_header(argv, config))
    save_manifest(m, args.out)
    summary = split_summary(m)
    for k, v in summary.items():
        print(f"{k:24s} {v}")
    return 0


def cmd_regime(args, argv) -> int:
    from . import regimes

    m = _load_valid(args.manifest)
    kind = args.kind
    if kind == "supervision-fraction":
        if args.head is None or args.fraction is None:
            raise CommandError("supervision-fraction needs --head and --fraction")
        derived = regimes.subsample_supervision(m, args.head, args.fraction, args.seed)
        config = {"kind": kind, "head": args.head, "fraction": args.fraction, "seed": args.seed}
    else:
        if args.keep_ratio is None:
            raise CommandError(f"{kind} needs --keep-ratio")
        if kind == "scarce-class":
            derived = regimes.scarce_class(m, args.keep_ratio)
        elif kind == "scarce-image":
            derived = regimes.scarce_image(m, args.keep_ratio, args.seed)
        else:
            derived = regimes.scarce_class_adjust(m, args.keep_ratio, args.seed)
        config = {"kind": kind, "keep_ratio": args.keep_ratio, "seed": args.seed}
    header = _header(argv, config)
    derived = derived.replace(header=header)
    problems = validate_manifest(derived)
    if problems:
        raise CommandError("derived manifest failed validation:\n  " + "\n  ".join(problems[:20]))
    save_manifest(derived, args.out)
    rows = regimes.instance_portion_report([m, derived], m)
    portion_path = Path(args.portion_csv) if args.portion_csv else Path(str(args.out) + ".portion.csv")
    text = regimes.portion_csv(rows, [f"{k}: {v}" for k, v in header.items()])
    portion_path.write_text(text, encoding="utf-8")
    for row in rows:
        print(f"{row['regime']:24s} ratio={row['ratio']:g} instances={row['instances']} portion={row['portion_pct']:.2f}%")
    return 0


def cmd_train(args, argv) -> int:
    import torch

    from . import trainer
    from .data import RegionDataset, Vocabulary

    m = _load_valid(args.manifest)
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "heads": args.heads,
        "stages": args.stages,
        "epochs": args.epochs,
        "steps": args.steps,
    }
    config = trainer.load_config(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = {"command": _command_line(argv), "config_hash": config.hash()}
    if args.threads:
        torch.set_num_threads(args.threads)
    root = _data_root(args)
    vocab = Vocabulary.from_manifest(m)
    plan = config.plan
    stuff_combined = config.model.stuff_combined
    train_set = RegionDataset(m, root, plan.short_edge, ("base_train",), vocab, config.model.mask_size, stuff_combined=stuff_combined)
    val_set = RegionDataset(m, root, plan.short_edge, ("base_val",), vocab, config.model.mask_size, stuff_combined=stuff_combined)
    resume = None
    if args.resume:
        resume = trainer.load_checkpoint(args.resume)
        model = trainer.model_from_checkpoint(resume)
    else:
        model = trainer.build_model(config.model, vocab, plan.seed)
    metrics = trainer.MetricsLog(out / "metrics.csv", header)
    logs = trainer.run_plan(model, train_set, config, metrics, val_set, out / "checkpoints", header, resume)
    trainer.save_checkpoint(out / "final.pt", model, None, {"stage": len(plan.stages) - 1, "epoch": -1, "step": -1}, config, header)
    stages = [
        {
            "stage": s.index,
            "heads": list(s.heads),
            "new_heads": list(s.new_heads),
            "steps": s.steps,
            "initial_probe": None if s.initial_probe != s.initial_probe else s.initial_probe,
            "final_probe": s.final_probe,
            "lr_schedule": "cosine restarted at stage start",
        }
        for s in logs
    ]
    (out / "stages.json").write_text(json.dumps({"header": header, "stages": stages}, indent=2) + "\n")
    acc = trainer.accuracy(model, train_set, plan.batch_size)
    print(f"trained {len(plan.stages)} stage(s); base-train accuracy {acc:.2f}%")
    if len(val_set):
        print(f"base-val accuracy {trainer.accuracy(model, val_set, plan.batch_size):.2f}%")
    return 0


def cmd_eval(args, argv) -> int:
    from . import fewshot, trainer

    m = _load_valid(args.manifest)
    ckpt = trainer.load_checkpoint(args.checkpoint)
    model = trainer.model_from_checkpoint(ckpt)
    short_edge = ckpt["config"]["plan"]["short_edge"]
    classifiers = args.classifier or ["linear"]
    reports = fewshot.evaluate_model(model, m, _data_root(args), classifiers, args.k_shot, args.split, short_edge)
    config = {"classifiers": classifiers, "k_shot": args.k_shot, "split": args.split, "checkpoint_config": ckpt["config_hash"]}
    header = _header(argv, config)
    fewshot.append_reports(args.out, reports, header)
    if args.summary:
        doc = {"header": header, "summary": fewshot.summary(reports), "fit": [r.fit for r in reports]}
        Path(args.summary).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for r in reports:
        flag = f" [{','.join(r.flags)}]" if r.flags else ""
        print(f"{r.split} {r.way}-way {r.k_shot}-shot {r.classifier:7s} top1={r.top1:.2f} top5={r.top5:.2f}{flag}")
    return 0


def cmd_report(args, argv) -> int:
    from .report import write_report

    if not args.inputs:
        raise CommandError("report needs at least one input CSV")
    outputs = write_report([Path(p) for p in args.inputs], Path(args.out), _header(argv, {"inputs": sorted(args.inputs)}))
    for p in outputs:
        print(p)
    return 0


# ---------------------------------------------------------------------------
# parser


def _ratio(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"ratio must lie in [0, 1], got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scarcebench", description="Long-tail few-shot benchmark tooling.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic long-tailed fixture")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--categories", type=int, default=60)
    s.add_argument("--alpha", type=float, default=1.5, help="Zipf exponent")
    s.add_argument("--total", type=int, default=10000, help="total object count")
    s.add_argument("--counts", help="explicit comma-separated per-category counts")
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--objects-per-image", type=int, default=4)
    s.add_argument("--attributes", type=int, default=8)
    s.add_argument("--render", action="store_true", help="also write PNG images and stuff masks")
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("build", help="build a benchmark manifest from raw annotations")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--fixture", help="raw-annotations JSON fixture")
    src.add_argument("--ade20k", help="ADE20K-style annotation directory")
    b.add_argument("--stuff-dir", help="where to write stuff label PNGs (ADE20K input)")
    b.add_argument("--gamma", type=float, default=2.7, help="context ratio of the enlarged region box")
    b.add_argument("--seed", type=int, required=True)
    b.add_argument("--min-count", type=int, default=15)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build)

    r = sub.add_parser("regime", help="derive a data-scarcity regime from a full manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--kind", choices=REGIME_KINDS, required=True)
    r.add_argument("--keep-ratio", type=_ratio)
    r.add_argument("--head", choices=OBJECT_HEADS + IMAGE_HEADS, help="head to thin (supervision-fraction)")
    r.add_argument("--fraction", type=_ratio, help="labelled fraction to keep (supervision-fraction)")
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--portion-csv", help="portion report path (default: OUT.portion.csv)")
    r.set_defaults(func=cmd_regime)

    t = sub.add_parser("train", help="train a model on a manifest's base classes")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", required=True, help="YAML training config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--mode", choices=("mtl", "cl", "rotation_pretrain"))
    t.add_argument("--heads", help="comma-separated heads (CL: in the order they are added)")
    t.add_argument("--stages", help='explicit stages, e.g. "cls;cls,seg_fcn"')
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--data-root")
    t.add_argument("--threads", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="k-shot evaluation on novel classes")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--classifier", action="append", choices=("linear", "cosine", "proto"))
    e.add_argument("--k-shot", type=int, action="append", choices=(1, 5))
    e.add_argument("--split", choices=("novel_val", "novel_test"), default="novel_test")
    e.add_argument("--out", required=True, help="report CSV (appended)")
    e.add_argument("--summary", help="summary JSON path")
    e.add_argument("--data-root")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="plots and tables from eval, portion or metrics CSVs")
    rp.add_argument("inputs", nargs="*")
    rp.add_argument("--out", required=True, help="output directory")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "k_shot", None) is None and args.command == "eval":
        args.k_shot = [5]
    try:
        return args.func(args, argv)
    except (CommandError, ManifestParseError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
