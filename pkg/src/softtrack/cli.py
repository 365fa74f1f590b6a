"""Command-line interface.

Subcommands:
  gen     build a dataset directory from an experiment config
  train   train the association model (or the similarity baseline)
  track   run a tracker over a dataset split and write output files
  eval    score tracker outputs against ground truth
  report  render a method-by-metric table (and optional plots)

All subcommands exit 0 on success and nonzero on any error. If the
SOFTTRACK_OUT_DIR environment variable is set, relative output paths are
placed under it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .experiments import (ExperimentConfig, load_experiment_config,
                          generate_dataset, load_manifest, load_split,
                          track_sequences, tracks_filename,
                          variant_model_config,
                          ASSOCIATION_METHODS, BASELINE_METHODS)
from .fileio import atomic_write_text
from .metrics import MotReport, evaluate_many, format_report, occlusion_report
from .tracking import TrackerOutput
from .train import (train_association_model, train_similarity_model,
                    load_association_checkpoint, load_similarity_checkpoint)


def _out_path(path: str) -> str:
    base = os.environ.get("SOFTTRACK_OUT_DIR")
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return load_experiment_config(path)


def _progress_printer(label: str, quiet: bool):
    def show(summary: dict) -> None:
        if not quiet:
            loss = summary.get("mean_loss")
            loss_text = "n/a" if loss is None else f"{loss:.4f}"
            print(f"[{label}] epoch {summary['epoch']}: mean loss {loss_text} "
                  f"({summary['steps']} steps)")
    return show


def cmd_gen(args) -> int:
    config = _load_config(args.config)
    out_dir = _out_path(args.out)
    manifest = generate_dataset(config, out_dir)
    print(f"wrote {len(manifest['train'])} train / {len(manifest['test'])} test "
          f"sequences to {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    train_pairs = load_split(args.data, "train")
    train_seqs = [seq for _, seq in train_pairs]
    out = _out_path(args.out)
    if args.kind == "similarity":
        _, history = train_similarity_model(
            train_seqs, config.train, seed=config.seed,
            checkpoint_path=out, log_path=args.log,
            progress=_progress_printer("similarity", args.quiet))
    else:
        model_config = variant_model_config(config.model, args.method,
                                            args.window_future)
        _, history = train_association_model(
            train_seqs, model_config, config.train, seed=config.seed,
            checkpoint_path=out, log_path=args.log, resume_from=args.resume,
            progress=_progress_printer(args.method, args.quiet))
    final = history[-1]["mean_loss"] if history else None
    print(f"trained {len(history)} epochs"
          + (f", final mean loss {final:.4f}" if final is not None else "")
          + f"; checkpoint at {out}")
    return 0


def cmd_track(args) -> int:
    config = _load_config(args.config)
    test_pairs = load_split(args.data, args.split)
    out_dir = _out_path(args.out)
    params = model_config = net = None
    if args.method in BASELINE_METHODS:
        method = args.method
        if method == "learned":
            if args.similarity is None:
                print("track: the learned baseline needs --similarity CKPT",
                      file=sys.stderr)
                return 1
            net, _ = load_similarity_checkpoint(args.similarity)
    else:
        if args.checkpoint is None:
            print("track: association tracking needs --checkpoint", file=sys.stderr)
            return 1
        params, model_config, _ = load_association_checkpoint(args.checkpoint)
        method = "assoc"
    track_sequences(method, test_pairs, config, params=params,
                    model_config=model_config, similarity_net=net,
                    out_dir=out_dir)
    print(f"tracked {len(test_pairs)} sequences ({args.method}) into {out_dir}")
    return 0


def _load_outputs(data_dir: str, split: str, hyp_dir: str):
    pairs = load_split(data_dir, split)
    triples = []
    for name, seq in pairs:
        path = os.path.join(hyp_dir, tracks_filename(name))
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing tracker output {path}")
        triples.append((name, seq, TrackerOutput.load(path)))
    return triples


def cmd_eval(args) -> int:
    triples = _load_outputs(args.data, args.split, args.hyp)
    report = evaluate_many(triples, matching=args.matching,
                           distance_threshold=args.threshold)
    payload = {"matching": args.matching, "summary": report.summary_dict(),
               "per_sequence": report.per_sequence}
    if args.occlusion:
        tp = fp = fn = tn = 0
        for _, seq, out in triples:
            rep = occlusion_report(seq, out)
            tp, fp, fn, tn = tp + rep.tp, fp + rep.fp, fn + rep.fn, tn + rep.tn
        total = tp + fp + fn + tn
        payload["occlusion"] = {
            "accuracy": (tp + tn) / total if total else 1.0,
            "recall": tp / (tp + fn) if tp + fn else 1.0,
            "precision": tp / (tp + fp) if tp + fp else 1.0,
            "tp": tp, "fp": fp, "fn": fn, "tn": tn}
    out = _out_path(args.out)
    atomic_write_text(out, json.dumps(payload, indent=2) + "\n")
    s = report.summary_dict()
    print(f"MOTA {100 * s['mota']:.2f}  IDF1 {100 * s['idf1']:.2f}  "
          f"IDS {s['ids']}  FP {s['fp']}  FN {s['fn']}  -> {out}")
    return 0


def _report_from_eval(payload: dict) -> MotReport:
    s = payload["summary"]
    return MotReport(mota=s["mota"], idf1=s["idf1"], idp=s["idp"], idr=s["idr"],
                     ids=s["ids"], fp=s["fp"], fn=s["fn"], matches=s["matches"],
                     gt_count=s["gt_count"], num_hyp=s["num_hyp"],
                     per_sequence=payload.get("per_sequence", []))


def cmd_report(args) -> int:
    rows: dict[str, MotReport] = {}
    occl_rows: dict[str, dict] = {}
    for item in args.input:
        if "=" not in item:
            print(f"report: --input wants LABEL=eval.json, got {item!r}",
                  file=sys.stderr)
            return 1
        label, path = item.split("=", 1)
        with open(path, "r") as fh:
            payload = json.load(fh)
        rows[label] = _report_from_eval(payload)
        if payload.get("occlusion"):
            occl_rows[label] = payload["occlusion"]
    table = format_report(rows)
    if occl_rows:
        lines = [table, "", "occlusion decisions:"]
        for label, occ in occl_rows.items():
            lines.append(f"  {label}: accuracy {100 * occ['accuracy']:.2f}  "
                         f"recall {100 * occ['recall']:.2f}  "
                         f"precision {100 * occ['precision']:.2f}")
        table = "\n".join(lines)
    out = _out_path(args.out)
    atomic_write_text(out, table + "\n")
    print(table)
    if args.plots:
        _write_plots(args, _out_path(args.plots))
    return 0


def _write_plots(args, plot_dir: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(plot_dir, exist_ok=True)
    if args.plot_sequence:
        from .data import load_sequence
        seq = load_sequence(args.plot_sequence)
        fig, ax = plt.subplots(figsize=(6, 6))
        for identity, entries in sorted(seq.gt_tracks.items()):
            xs = [0.5 * (b.x1 + b.x2) for _, b in entries]
            ys = [0.5 * (b.y1 + b.y2) for _, b in entries]
            ax.plot(xs, ys, lw=1, label=f"track {identity}")
        det_x = [0.5 * (d.box.x1 + d.box.x2) for d in seq.all_detections()]
        det_y = [0.5 * (d.box.y1 + d.box.y2) for d in seq.all_detections()]
        ax.scatter(det_x, det_y, s=2, c="gray", alpha=0.3, label="detections")
        ax.set_xlim(-0.1, 1.1)
        ax.set_ylim(-0.1, 1.1)
        ax.legend(fontsize=7)
        ax.set_title("ground-truth trajectories and detections")
        fig.savefig(os.path.join(plot_dir, "trajectories.png"), dpi=120)
        plt.close(fig)
    if args.loss_log:
        fig, ax = plt.subplots(figsize=(7, 4))
        for item in args.loss_log:
            label, path = item.split("=", 1) if "=" in item else (item, item)
            steps, losses = [], []
            with open(path, "r") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        steps.append(len(steps))
                        losses.append(rec["loss"])
            ax.plot(steps, losses, lw=1, label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        ax.set_title("training loss")
        fig.savefig(os.path.join(plot_dir, "learning_curves.png"), dpi=120)
        plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softtrack",
        description="soft data association tracking lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset directory")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--kind", choices=["association", "similarity"],
                   default="association")
    p.add_argument("--method", choices=sorted(ASSOCIATION_METHODS),
                   default="assoc+ae+occ",
                   help="ablation-grid variant for association training")
    p.add_argument("--window-future", type=int, default=None,
                   help="override lookahead frames (delayed tracking)")
    p.add_argument("--resume", help="resume from an existing checkpoint")
    p.add_argument("--log", help="append per-batch loss records here (JSONL)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run a tracker over a dataset split")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out", required=True, help="directory for tracker outputs")
    p.add_argument("--method", default="assoc",
                   choices=sorted(BASELINE_METHODS) + ["assoc"],
                   help="baseline kind, or assoc for the association model")
    p.add_argument("--checkpoint", help="association model checkpoint")
    p.add_argument("--similarity", help="similarity checkpoint (learned baseline)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score tracker outputs")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--hyp", required=True, help="directory of tracker outputs")
    p.add_argument("--out", required=True, help="evaluation JSON to write")
    p.add_argument("--matching", choices=["identity", "distance"],
                   default="identity")
    p.add_argument("--threshold", type=float, default=0.1,
                   help="center-distance threshold for distance matching")
    p.add_argument("--occlusion", action="store_true",
                   help="include the occlusion decision report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a comparison table")
    p.add_argument("--input", action="append", default=[],
                   metavar="LABEL=EVAL_JSON", help="repeatable")
    p.add_argument("--out", required=True, help="table file to write")
    p.add_argument("--plots", help="directory for optional plots")
    p.add_argument("--plot-sequence", help="sequence file for a trajectory plot")
    p.add_argument("--loss-log", action="append", default=[],
                   metavar="LABEL=LOG_JSONL", help="repeatable")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"softtrack {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
