"""Command-line entry points: ``ovmlc <command> --config PATH --seed N --out DIR``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("ovmlc")

COMMANDS = ("gen-data", "train", "expand-vocab", "infer", "eval", "calibrate", "pipeline", "plot", "gradcheck")
PIPELINE_STAGES = ("captions", "extract", "dedup", "assign", "merge", "all")


def code_hash() -> str:
    """SHA-256 over the package's source and resource files, in path order."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix in (".py", ".json", ".txt"):
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_run_record(out: Path, args, config: dict | None):
    out.mkdir(parents=True, exist_ok=True)
    rec = {"command": args.command, "argv": sys.argv[1:], "seed": args.seed, "config": config,
           "code_hash": code_hash()}
    (out / "run.json").write_text(json.dumps(rec, indent=2, sort_keys=True, default=str) + "\n")


def _config(args, extra=None):
    from .trainer import make_config

    over = {"seed": args.seed}
    over.update(extra or {})
    return make_config(over, args.config)


def _load_model(cfg, checkpoint):
    from .nn.checkpoint import load_checkpoint
    from .trainer import Model

    model = Model(cfg)
    digest = load_checkpoint(model, checkpoint) if checkpoint else None
    return model, digest


def _model_hash(model, digest):
    from .nn.checkpoint import checkpoint_hash

    return digest or checkpoint_hash(model)


# commands


def cmd_gen_data(args):
    from dataclasses import fields

    from .data import Dataset, SyntheticDatasetSpec

    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    names = {f.name for f in fields(SyntheticDatasetSpec)}
    spec_kw = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("data.") and k.split(".", 1)[1] in names}
    spec = SyntheticDatasetSpec(**{**spec_kw, "seed": args.seed})
    Dataset.synthetic(spec).save(args.out)
    write_run_record(args.out, args, {"dataset": spec_kw})
    print(f"wrote dataset to {args.out}")


def cmd_train(args):
    from .nn.checkpoint import save_checkpoint
    from .trainer import train_loop

    extra = {}
    if args.data:
        extra["data.dir"] = str(args.data)
    if args.steps:
        extra["train.steps"] = args.steps
    cfg = _config(args, extra)
    write_run_record(args.out, args, cfg)
    (args.out / "metrics.jsonl").unlink(missing_ok=True)

    def progress(rec):
        if len(rec) > 2:
            print(json.dumps(rec, sort_keys=True), flush=True)

    model, _ = train_loop(cfg, args.out, progress=progress)
    digest = save_checkpoint(model, args.out / "final.ckpt")
    print(f"final checkpoint {args.out / 'final.ckpt'} sha256={digest}")


def cmd_expand_vocab(args):
    from .labeldb import VocabularyDB, expand_vocabulary, load_db, model_encoder, save_db

    cfg = _config(args)
    model, digest = _load_model(cfg, args.checkpoint)
    labels = [ln.strip() for ln in Path(args.labels).read_text(encoding="utf-8").splitlines() if ln.strip()]
    db = load_db(args.db) if Path(args.db).exists() else VocabularyDB(model.backbones.cfg.joint_dim)
    new = expand_vocabulary(db, labels, model_encoder(model), _model_hash(model, digest),
                            cfg["label_encoder.variant"])
    save_db(new, args.db)
    write_run_record(args.out, args, cfg)
    print(f"{args.db}: {len(db)} -> {len(new)} labels")


def cmd_infer(args):
    from .data import Dataset
    from .labeldb import infer_video, load_db
    from .video_encoder import sample_frames

    cfg = _config(args)
    model, digest = _load_model(cfg, args.checkpoint)
    ds = Dataset.load(args.data)
    if args.video not in ds.by_id:
        raise KeyError(f"unknown video id {args.video!r}")
    frames = ds.frames(ds.by_id[args.video])
    clips = frames[sample_frames(len(frames), cfg["video.frames_per_clip"], cfg["video.eval_clips"], "eval")]
    res = infer_video(clips, load_db(args.db), model, _model_hash(model, digest), args.video, args.threshold)
    out = {"video": res.video, "scores": res.scores, "predicted": res.predicted}
    write_run_record(args.out, args, cfg)
    (args.out / "infer.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(json.dumps(out, sort_keys=True))


def _scored_pairs_from_model(args, cfg):
    from .data import Dataset
    from .labeldb import infer, load_db
    from .metrics import ScoredPairSet
    from .trainer import embed_videos

    model, digest = _load_model(cfg, args.checkpoint)
    ds = Dataset.load(args.data)
    db = load_db(args.db)
    h = _model_hash(model, digest)
    records = ds.split(args.split)
    vids = embed_videos(model, ds, records).double().numpy()
    rows = []
    for r, v in zip(records, vids):
        res = infer(v, db, h, r["video"])
        rows.extend({"video": r["video"], "label": lb, "score": s, "truth": int(lb in r["labels"])}
                    for lb, s in res.scores.items())
    return ScoredPairSet.from_records(rows, args.split), rows


def cmd_eval(args):
    from .metrics import ScoredPairSet, emit_report
    from .pipeline import write_jsonl

    if args.scores:
        pairs = ScoredPairSet.load_jsonl(args.scores[0])
        cfg = None
    else:
        if not (args.checkpoint and args.db and args.data):
            raise ValueError("eval needs --scores FILE, or --checkpoint, --db and --data")
        cfg = _config(args)
        pairs, rows = _scored_pairs_from_model(args, cfg)
        args.out.mkdir(parents=True, exist_ok=True)
        write_jsonl(args.out / "scores.jsonl", rows)
    summary = emit_report([pairs], args.out)
    write_run_record(args.out, args, cfg)
    print(json.dumps(summary["datasets"], sort_keys=True))


def cmd_calibrate(args):
    from .metrics import ScoredPairSet, emit_report, f1_sweep, peak_f1, select_threshold_maxmin

    if not args.scores:
        raise ValueError("calibrate needs at least one --scores FILE")
    val = [ScoredPairSet.load_jsonl(p) for p in args.scores]
    sel = select_threshold_maxmin(val)
    out = {"threshold": sel.threshold, "validation_f1": sel.f1}
    if args.test:
        tests = [ScoredPairSet.load_jsonl(p) for p in args.test]
        out["test"] = {t.name: {"f1": float(f1_sweep(t, [sel.threshold])[0]), "peak_f1": peak_f1(t)[0]}
                       for t in tests}
    emit_report(val, args.out, sel.threshold)
    (args.out / "calibration.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    write_run_record(args.out, args, None)
    print(json.dumps(out, sort_keys=True))


def cmd_plot(args):
    from .metrics import ScoredPairSet, emit_report

    if not args.scores:
        raise ValueError("plot needs at least one --scores FILE")
    emit_report([ScoredPairSet.load_jsonl(p) for p in args.scores], args.out, args.threshold)
    write_run_record(args.out, args, None)
    print(f"wrote {args.out / 'f1_curves.svg'}")


def cmd_pipeline(args):
    from . import pipeline as P

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    embedder = P.HashingEmbedder(seed=args.seed)
    stage = args.stage

    def need(path, what):
        if path is None:
            raise ValueError(f"pipeline {stage} needs --{what}")
        return P.read_jsonl(path)

    if stage == "all":
        paths = P.run_pipeline(need(args.manifest, "manifest"), out, seed=args.seed,
                               top_k=args.top_k, min_sim=args.min_sim)
        print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
    elif stage == "captions":
        P.write_jsonl(out / "captions.jsonl", P.stage_captions(need(args.manifest, "manifest"),
                                                               P.StubCaptioner(seed=args.seed)))
    elif stage == "extract":
        P.write_jsonl(out / "concepts.jsonl", P.stage_extract(need(args.captions, "captions"), P.StubExtractor()))
    elif stage == "dedup":
        P.write_jsonl(out / "vocab.jsonl", P.stage_dedup(need(args.concepts, "concepts"), embedder, args.seed))
    elif stage == "assign":
        P.write_jsonl(out / "assignments.jsonl",
                      P.stage_assign(need(args.captions, "captions"), need(args.vocab, "vocab"), embedder,
                                     args.top_k, args.min_sim))
    elif stage == "merge":
        P.write_jsonl(out / "manifest.jsonl",
                      P.stage_merge(need(args.manifest, "manifest"), need(args.assignments, "assignments")))
    write_run_record(out, args, None)


def cmd_gradcheck(args):
    from .gradchecks import gradcheck_suite

    res = gradcheck_suite(seed=args.seed)
    for name, err in res.items():
        print(f"{name:20s} max relative error {err:.3e}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "gradcheck.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    write_run_record(args.out, args, None)
    if max(res.values()) >= 1e-3:
        raise RuntimeError("gradient check exceeded 1e-3 relative error")


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "expand-vocab": cmd_expand_vocab, "infer": cmd_infer,
    "eval": cmd_eval, "calibrate": cmd_calibrate, "pipeline": cmd_pipeline, "plot": cmd_plot,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovmlc", description="open-vocabulary multi-label video classification")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="JSON config or preset name (presets/desk.json)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("runs") / name)
        if name == "train":
            p.add_argument("--data", type=Path)
            p.add_argument("--steps", type=int)
        if name in ("expand-vocab", "infer", "eval"):
            p.add_argument("--db", type=Path, required=name != "eval")
            p.add_argument("--checkpoint", type=Path)
        if name == "expand-vocab":
            p.add_argument("--labels", type=Path, required=True)
        if name in ("infer", "eval"):
            p.add_argument("--data", type=Path, required=name == "infer")
        if name == "infer":
            p.add_argument("--video", required=True)
            p.add_argument("--threshold", type=float)
        if name == "eval":
            p.add_argument("--split", default="test_closed")
        if name in ("eval", "calibrate", "plot"):
            p.add_argument("--scores", type=Path, action="append", default=[])
        if name == "calibrate":
            p.add_argument("--test", type=Path, action="append", default=[])
        if name == "plot":
            p.add_argument("--threshold", type=float)
        if name == "pipeline":
            p.add_argument("stage", choices=PIPELINE_STAGES)
            for f in ("manifest", "captions", "concepts", "vocab", "assignments"):
                p.add_argument(f"--{f}", type=Path)
            p.add_argument("--top-k", type=int, default=10)
            p.add_argument("--min-sim", type=float, default=0.7)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        HANDLERS[args.command](args)
    except Exception as e:  # noqa: BLE001 - report any failure as a nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
