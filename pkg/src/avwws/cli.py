"""Command-line entry point.

Subcommands (one experiment per invocation)::

    avwws synth  --out DATA                       synthetic corpus
    avwws train  --config C --out RUN             unimodal model
    avwws eval   --checkpoint M --manifest F      score CSV + report
    avwws fuse   --strategy {score,cascade,hma}   fused score CSV + report
    avwws report SCORES.csv ...                   comparison table
    avwws rerun  RUN/run.json --out RUN2          replay a recorded run

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric failure.
Set ``AVWWS_DEVICE`` to choose the torch device (default ``cpu``).
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .validation import NumericError, ValidationError

logger = logging.getLogger("avwws")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Tracks one invocation's inputs and outputs and writes ``run.json``."""

    def __init__(self, args, argv):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.record = {
            "command": args.command,
            "argv": list(argv),
            "seed": args.seed,
            "deterministic": bool(args.deterministic),
            "config": {},
            "inputs": {},
            "outputs": {},
        }

    def input(self, path):
        path = Path(path)
        if path.is_file():
            self.record["inputs"][str(path)] = sha256_file(path)
        return path

    def output(self, path):
        path = Path(path)
        self.record["outputs"][os.path.relpath(path, self.out)] = sha256_file(path)
        return path

    def finish(self, **extra):
        self.record.update(extra)
        with open(self.out / "run.json", "w", encoding="utf-8") as fh:
            json.dump(self.record, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def load_cfg(args, run):
    from .training import read_config

    cfg = {}
    if args.config:
        cfg = read_config(run.input(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    args.seed = cfg["seed"]
    run.record["seed"] = cfg["seed"]
    run.record["config"] = cfg
    return cfg


def _manifest_path(cfg, key, split):
    if cfg.get(key):
        return Path(cfg[key])
    if cfg.get("data_dir"):
        return Path(cfg["data_dir"]) / f"{split}.jsonl"
    raise ValidationError(f"config needs '{key}' or 'data_dir'")


def _deterministic(args):
    if args.deterministic:
        import torch

        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, run):
    from .data import SynthConfig, generate_synthetic_dataset

    cfg = load_cfg(args, run)
    names = {f.name for f in fields(SynthConfig)}
    synth_cfg = SynthConfig(**{k: v for k, v in cfg.items() if k in names})
    manifests = generate_synthetic_dataset(synth_cfg, run.out)
    for p in sorted(run.out.rglob("*")):
        if p.is_file() and p.name != "run.json":
            run.output(p)
    run.finish(synth_config=asdict(synth_cfg), manifests={k: str(v) for k, v in manifests.items()})
    print(f"wrote {sum(synth_cfg.counts()[s][0] + synth_cfg.counts()[s][1] for s in manifests)} samples to {run.out}")


def cmd_train(args, run):
    from .backbones import build_model, save_checkpoint
    from .data import load_manifest
    from .fusion import average_checkpoints
    from .training import TrainConfig, device_from_env, set_determinism, train

    cfg = load_cfg(args, run)
    if args.deterministic:
        cfg["deterministic"] = True
    train_cfg = TrainConfig.from_mapping(cfg)
    train_path = run.input(_manifest_path(cfg, "train_manifest", "train"))
    dev_path = run.input(_manifest_path(cfg, "dev_manifest", "dev"))
    train_records, dev_records = load_manifest(train_path), load_manifest(dev_path)
    set_determinism(train_cfg.seed, train_cfg.deterministic)
    model = build_model(train_cfg.arch, train_cfg.modality).to(device_from_env())

    log_path = run.out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:
        def log_fn(entry):
            log.write(json.dumps(entry) + "\n")
            log.flush()
            print(f"epoch {entry['epoch']}: train_loss={entry['train_loss']:.4f} "
                  f"dev_loss={entry['dev_loss']:.4f} dev_wws={entry['dev_wws']}")

        checkpoints = train(model, train_records, dev_records, train_cfg, run.out / "checkpoints", log_fn)
    header, state = average_checkpoints(checkpoints, int(cfg.get("average_top_k", 3)))
    model_path = run.out / "model.pt"
    save_checkpoint(model_path, state, header)
    run.output(log_path)
    for c in checkpoints:
        run.output(c.path)
    run.output(model_path)
    run.finish(train_config=asdict(train_cfg), averaged_epochs=header["averaged_epochs"])
    print(f"model: {model_path} (average of epochs {header['averaged_epochs']})")


def _score_records(ckpt_path, records, run, batch_size=8):
    from .backbones import model_from_checkpoint, model_input_layout
    from .training import InputBuilder, device_from_env, predict

    model, header = model_from_checkpoint(run.input(ckpt_path))
    model.to(device_from_env())
    layout = model_input_layout(header["arch"]) if header["modality"] == "audio" else "windows"
    builder = InputBuilder(header["modality"], layout, None)
    probs, levels = predict(model, builder, records, batch_size, with_levels=True)
    return header, probs, levels


def _split_of(records):
    splits = sorted({r.split for r in records})
    return splits[0] if len(splits) == 1 else "+".join(splits)


def _write_outputs(run, rows, system, split, header_extra=None):
    from .metrics import evaluate_rows, write_report, write_scores

    scores = run.output(write_scores(run.out / "scores.csv", rows))
    result = evaluate_rows(rows)
    header = {"seed": run.record["seed"], **(header_extra or {})}
    text = write_report(run.out / "report.txt", run.out / "report.jsonl", [(system, split, result)], header)
    run.output(run.out / "report.txt")
    run.output(run.out / "report.jsonl")
    print(text, end="")
    return scores, result


def cmd_eval(args, run):
    from .data import load_manifest

    cfg = load_cfg(args, run)
    threshold = args.threshold if args.threshold is not None else float(cfg.get("threshold", 0.5))
    records = load_manifest(run.input(args.manifest))
    if not records:
        raise ValidationError("manifest is empty")
    header, probs, _ = _score_records(args.checkpoint, records, run)
    col = "p_a" if header["modality"] == "audio" else "p_v"
    rows = [{"id": r.id, "label": r.label, col: float(p), "decision": int(p >= threshold)}
            for r, p in zip(records, probs)]
    system = args.name or f"{header['arch']}-{header['modality']}"
    split = _split_of(records)
    _write_outputs(run, rows, system, split, {"threshold": threshold})
    run.finish(system=system, split=split, threshold=threshold, checkpoint_header=header)


def _join_scores(audio_rows, video_rows):
    by_id = {r["id"]: r for r in video_rows}
    if set(by_id) != {r["id"] for r in audio_rows}:
        raise ValidationError("audio and video score files cover different sample ids")
    joined = []
    for a in audio_rows:
        v = by_id[a["id"]]
        if a["label"] != v["label"]:
            raise ValidationError(f"label mismatch for {a['id']}")
        p_a = a["p_a"] if a["p_a"] is not None else a["p_av"]
        p_v = v["p_v"] if v["p_v"] is not None else v["p_av"]
        if p_a is None or p_v is None:
            raise ValidationError(f"missing posterior for {a['id']}")
        joined.append({"id": a["id"], "label": a["label"], "p_a": p_a, "p_v": p_v})
    return joined


def cmd_fuse(args, run):
    from .data import load_manifest
    from .fusion import HMAFusion, cascaded_decision, score_fusion
    from .metrics import read_scores

    cfg = load_cfg(args, run)
    threshold = args.threshold if args.threshold is not None else float(cfg.get("threshold", 0.5))
    strategy = args.strategy
    split = None
    if args.audio_scores or args.video_scores:
        if strategy == "hma":
            raise ValidationError("hma fusion needs --audio-ckpt/--video-ckpt, not score files")
        if not (args.audio_scores and args.video_scores):
            raise ValidationError("give both --audio-scores and --video-scores")
        rows = _join_scores(read_scores(run.input(args.audio_scores)), read_scores(run.input(args.video_scores)))
        split = _read_split(args.audio_scores)
    else:
        if not (args.audio_ckpt and args.video_ckpt and args.manifest):
            raise ValidationError("give --audio-ckpt, --video-ckpt and --manifest (or two score files)")
        records = load_manifest(run.input(args.manifest))
        if not records:
            raise ValidationError("manifest is empty")
        split = _split_of(records)
        _, p_a, lv_a = _score_records(args.audio_ckpt, records, run)
        _, p_v, lv_v = _score_records(args.video_ckpt, records, run)
        rows = [{"id": r.id, "label": r.label, "p_a": float(a), "p_v": float(v)}
                for r, a, v in zip(records, p_a, p_v)]

    extra = {"strategy": strategy, "threshold": threshold}
    if strategy == "score":
        alpha, beta = float(cfg.get("alpha", 0.5)), float(cfg.get("beta", 0.5))
        p_av = score_fusion([r["p_a"] for r in rows], [r["p_v"] for r in rows], alpha, beta)
        for r, p in zip(rows, np.atleast_1d(p_av)):
            r["p_av"] = float(p)
            r["decision"] = int(p >= threshold)
        extra.update(alpha=alpha, beta=beta)
    elif strategy == "cascade":
        th_l, th_h = float(cfg.get("th_l", 0.1)), float(cfg.get("th_h", 0.4))
        dec = cascaded_decision([r["p_v"] for r in rows], [r["p_a"] for r in rows], th_l, th_h)
        for r, d in zip(rows, np.atleast_1d(dec)):
            r["decision"] = int(d)
        extra.update(th_l=th_l, th_h=th_h)
    else:
        train_path = args.train_manifest or _manifest_path(cfg, "train_manifest", "train")
        train_records = load_manifest(run.input(train_path))
        _, _, tr_a = _score_records(args.audio_ckpt, train_records, run)
        _, _, tr_v = _score_records(args.video_ckpt, train_records, run)
        hma = HMAFusion(
            lr=float(cfg.get("hma_lr", 1e-4)),
            epochs=int(cfg.get("hma_epochs", 200)),
            batch_size=int(cfg.get("batch_size", 64)),
            seed=int(args.seed),
            threshold=threshold,
        )
        hma.fit(np.hstack([tr_a, tr_v]), [r.label for r in train_records])
        p_av = hma.predict_proba(np.hstack([lv_a, lv_v]))[:, 1]
        for r, p in zip(rows, p_av):
            r["p_av"] = float(p)
            r["decision"] = int(p >= threshold)
        import torch

        hma_path = run.out / "hma.pt"
        torch.save({"state_dict": hma.head_.state_dict(), "mean": torch.from_numpy(hma.mean_),
                    "scale": torch.from_numpy(hma.scale_), "params": hma.get_params()}, hma_path)
        run.output(hma_path)
    system = args.name or f"fusion-{strategy}"
    _write_outputs(run, rows, system, split or "dev", extra)
    run.finish(system=system, split=split or "dev", **extra)


def _read_split(scores_path):
    meta = Path(scores_path).parent / "run.json"
    if meta.is_file():
        with open(meta, encoding="utf-8") as fh:
            return json.load(fh).get("split")
    return None


def _parse_score_spec(spec):
    """``[system[@split]=]path`` -> (system, split, path)."""
    name, split = None, None
    if "=" in spec:
        name, spec = spec.split("=", 1)
        if "@" in name:
            name, split = name.split("@", 1)
    path = Path(spec)
    meta = path.parent / "run.json"
    if meta.is_file():
        with open(meta, encoding="utf-8") as fh:
            info = json.load(fh)
        name = name or info.get("system")
        split = split or info.get("split")
    name = name or (path.parent.name if path.stem == "scores" else path.stem)
    return name, split or "dev", path


def cmd_report(args, run):
    from .metrics import evaluate_rows, read_scores, write_report

    load_cfg(args, run)
    if not args.scores:
        raise ValidationError("report needs at least one score CSV")
    entries = []
    for spec in args.scores:
        system, split, path = _parse_score_spec(spec)
        entries.append((system, split, evaluate_rows(read_scores(run.input(path)))))
    text = write_report(run.out / "report.txt", run.out / "report.jsonl", entries, {"seed": run.record["seed"]},
                        title="Comparison of wake word spotting systems")
    run.output(run.out / "report.txt")
    run.output(run.out / "report.jsonl")
    run.finish(systems=[e[0] for e in entries])
    print(text, end="")


def cmd_rerun(args, run_unused=None):
    with open(args.run_json, encoding="utf-8") as fh:
        record = json.load(fh)
    argv = list(record["argv"])
    # replace the recorded output directory
    if "--out" in argv:
        argv[argv.index("--out") + 1] = args.out
    else:
        argv += ["--out", args.out]
    return main(argv)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threshold", type=float, default=None)
    common.add_argument("--deterministic", action="store_true", help="use deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="avwws", description="Audio-visual wake word spotting")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("train", parents=[common], help="train a unimodal model")

    p = sub.add_parser("eval", parents=[common], help="score a manifest with one model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--name", help="system name in reports")

    p = sub.add_parser("fuse", parents=[common], help="fuse audio and video systems")
    p.add_argument("--strategy", choices=("score", "cascade", "hma"), required=True)
    p.add_argument("--audio-ckpt")
    p.add_argument("--video-ckpt")
    p.add_argument("--manifest")
    p.add_argument("--train-manifest", help="HMA training data (default: config train manifest)")
    p.add_argument("--audio-scores", help="score CSV with p_a (score/cascade only)")
    p.add_argument("--video-scores", help="score CSV with p_v (score/cascade only)")
    p.add_argument("--name", help="system name in reports")

    p = sub.add_parser("report", parents=[common], help="comparison table over score CSVs")
    p.add_argument("scores", nargs="+", metavar="[SYSTEM[@SPLIT]=]SCORES.csv")

    p = sub.add_parser("rerun", help="replay the command recorded in a run.json")
    p.add_argument("run_json")
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "report": cmd_report,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.command == "rerun":
        return cmd_rerun(args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        _deterministic(args)
        run = Run(args, argv)
        COMMANDS[args.command](args, run)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
