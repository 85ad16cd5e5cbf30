"""Command-line driver for the full experiment pipeline.

Commands: gen-synth, train, eval-gap, count-people, visualize, grad-check,
sweep-memory.  Every command takes --config / --seed / --out; outputs land
under --out together with a manifest.json naming the produced files and the
config hash.  Exit codes: 0 success, 1 validation error, 2 runtime/numeric
failure.
"""

import argparse
import json
import statistics
import sys
from pathlib import Path

import numpy as np
import torch

from . import corpus, evaluation, trainer
from .config import ConfigError, load_config
from .corpus import CorpusError
from .memory import MemoryConfig
from .trainer import TrainingError


def _write_manifest(out_dir, command, config, files):
    manifest = {
        "command": command,
        "config_sha256": config.config_hash if config else "",
        "files": sorted(str(Path(f).name) for f in files),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def _load_split(cfg, split):
    tsv = getattr(cfg.data, f"{split}_tsv")
    embed = getattr(cfg.data, f"{split}_embed")
    if not tsv or not embed:
        raise ConfigError(f"[data]: {split}_tsv / {split}_embed not set")
    return corpus.load_gap(tsv, embed)


def _infer_logs(model, instances, seed):
    logs = []
    for idx, inst in enumerate(instances):
        _, _, trace = trainer.instance_scores(
            model, inst, trainer.derive_seed(seed, "val", idx))
        logs.append(evaluation.log_from_trace(trace, inst.doc))
    return logs


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_synth(cfg, out_dir):
    files = []
    for split, num_docs, seed in (
            ("train", cfg.synthetic.num_docs_train, cfg.synthetic.seed),
            ("val", cfg.synthetic.num_docs_val, cfg.synthetic.seed + 1)):
        spec = cfg.synthetic_spec(seed=seed, num_docs=num_docs)
        docs = corpus.generate_synthetic(spec)
        tsv = out_dir / f"{split}.tsv"
        ptem = out_dir / f"{split}.ptem"
        corpus.write_corpus([d.instance for d in docs], tsv, ptem)
        counts = out_dir / f"{split}_counts.tsv"
        corpus.write_counts(
            {d.instance.doc.doc_id: d.entity_count for d in docs}, counts)
        files += [tsv, ptem, corpus.manifest_path_for(ptem), counts]
    return files


def cmd_train(cfg, out_dir):
    train_set = _load_split(cfg, "train")
    val_set = _load_split(cfg, "val")
    input_dim = train_set[0].doc.dim
    model = trainer.build_model(input_dim, cfg.memory_config(),
                                dropout=cfg.model.dropout,
                                init_seed=cfg.model.init_seed)
    ckpt = out_dir / "checkpoint.ptck"
    history = out_dir / "history.csv"
    trainer.train(model, train_set, val_set, cfg.train,
                  checkpoint_path=ckpt, history_path=history)
    return [ckpt, history]


def cmd_eval_gap(cfg, out_dir):
    ckpt = out_dir / "checkpoint.ptck"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; run train first")
    model, meta = trainer.model_from_checkpoint(ckpt, use_best=True)
    val_set = _load_split(cfg, "val")
    sweep, scores, labels = trainer.evaluate_f1(model, val_set, cfg.train.seed)
    stored_th = meta.get("best_threshold", sweep.best_threshold) or sweep.best_threshold
    p, r, f1 = evaluation.gap_f1(scores, labels, stored_th)
    rows = [(th, v) for th, v in zip(sweep.thresholds, sweep.values)]
    metrics = out_dir / "gap_metrics.csv"
    evaluation.write_metrics_csv(rows, ["threshold", "f1"], metrics)
    summary = out_dir / "gap_summary.json"
    summary.write_text(json.dumps({
        "best_threshold": sweep.best_threshold,
        "best_f1": sweep.best_value,
        "checkpoint_threshold": stored_th,
        "precision_at_checkpoint_threshold": p,
        "recall_at_checkpoint_threshold": r,
        "f1_at_checkpoint_threshold": f1,
    }, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"best threshold {sweep.best_threshold:.2f} F1 {sweep.best_value:.4f}")
    return [metrics, summary]


def cmd_count_people(cfg, out_dir):
    ckpt = out_dir / "checkpoint.ptck"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; run train first")
    if not cfg.data.counts:
        raise ConfigError("[data]: counts file not set")
    model, _ = trainer.model_from_checkpoint(ckpt, use_best=True)
    val_set = _load_split(cfg, "val")
    gold = corpus.load_counts(cfg.data.counts)
    logs = _infer_logs(model, val_set, cfg.train.seed)
    sweep = evaluation.sweep_threshold_count(logs, gold)
    kl = evaluation.overwrite_kl(logs)
    rows = [(th, v) for th, v in zip(sweep.thresholds, sweep.values)]
    metrics = out_dir / "count_metrics.csv"
    evaluation.write_metrics_csv(rows, ["alpha", "total_error"], metrics)
    summary = out_dir / "count_summary.json"
    summary.write_text(json.dumps({
        "best_alpha": sweep.best_threshold,
        "total_error": sweep.best_value,
        "mean_error_per_doc": sweep.best_value / len(logs),
        "overwrite_kl": kl if kl is not None else "no overwrites",
    }, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"best alpha {sweep.best_threshold:.2f} "
          f"mean error {sweep.best_value / len(logs):.3f}")
    return [metrics, summary]


def cmd_visualize(cfg, out_dir, limit=None):
    ckpt = out_dir / "checkpoint.ptck"
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint at {ckpt}; run train first")
    model, _ = trainer.model_from_checkpoint(ckpt, use_best=True)
    val_set = _load_split(cfg, "val")
    if limit:
        val_set = val_set[:limit]
    logs = _infer_logs(model, val_set, cfg.train.seed)
    files = []
    for log in logs:
        jsonl = out_dir / f"memlog_{log.doc_id}.jsonl"
        svg = out_dir / f"memlog_{log.doc_id}.svg"
        evaluation.export_memory_log(log, jsonl)
        evaluation.render_heatmap(log, svg)
        files += [jsonl, svg]
    return files


def cmd_grad_check(out_dir, tolerance=1.0e-4):
    """Tiny-configuration gradient verification across all memory variants."""
    spec = corpus.SyntheticSpec(num_docs=1, doc_length=(5, 5),
                                num_entities=(2, 2),
                                mentions_per_entity=(1, 2), dim=5,
                                noise_scale=0.2, seed=11)
    instance = corpus.generate_synthetic(spec)[0].instance
    results = {}
    for variant in ("vanilla", "learned_init", "fixed_key"):
        config = MemoryConfig(num_cells=3, hidden_dim=6, variant=variant,
                              key_dim=2, mlp_hidden_dim=8)
        model = trainer.build_model(5, config, dropout=0.5, init_seed=3)
        report = trainer.grad_check(model, instance, tolerance=tolerance)
        results[variant] = report.max_rel_error
        status = "pass" if report.passed else "FAIL"
        print(f"{variant}: max relative error {report.max_rel_error:.3e} [{status}]")
    report_path = out_dir / "grad_check.json"
    report_path.write_text(json.dumps(
        {"tolerance": tolerance, "max_rel_error": results}, sort_keys=True,
        indent=2) + "\n", encoding="utf-8")
    if any(err >= tolerance for err in results.values()):
        raise TrainingError("gradient check failed")
    return [report_path]


def _polyline_svg(xs, means, stds, path):
    width, height = 480, 320
    margin = 48
    x_lo, x_hi = min(xs), max(xs)
    span_x = max(x_hi - x_lo, 1)

    def px(x):
        return margin + (x - x_lo) / span_x * (width - 2 * margin)

    def py(v):
        return height - margin - v * (height - 2 * margin)

    pts = " ".join(f"{px(x):.1f},{py(m):.1f}" for x, m in zip(xs, means))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<polyline points="{pts}" fill="none" stroke="steelblue" '
        f'stroke-width="2"/>',
    ]
    for x, m, s in zip(xs, means, stds):
        parts.append(f'<line x1="{px(x):.1f}" y1="{py(m - s):.1f}" '
                     f'x2="{px(x):.1f}" y2="{py(m + s):.1f}" stroke="gray"/>')
        parts.append(f'<circle cx="{px(x):.1f}" cy="{py(m):.1f}" r="3" '
                     f'fill="steelblue"/>')
        parts.append(f'<text x="{px(x) - 6:.1f}" y="{height - margin + 16}">'
                     f'{x}</text>')
    parts.append(f'<text x="{margin}" y="{margin - 12}">'
                 f'validation F1 vs memory cells</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def cmd_sweep_memory(cfg, out_dir):
    train_set = _load_split(cfg, "train")
    val_set = _load_split(cfg, "val")
    input_dim = train_set[0].doc.dim
    rows = []
    agg = []
    for cells in cfg.sweep.cells:
        f1s = []
        for run in range(cfg.sweep.runs):
            mem_cfg = cfg.memory_config()
            mem_cfg.num_cells = cells
            train_cfg = trainer.TrainConfig(
                **{**cfg.train.__dict__, "seed": cfg.train.seed + run})
            model = trainer.build_model(
                input_dim, mem_cfg, dropout=cfg.model.dropout,
                init_seed=cfg.model.init_seed + run)
            result = trainer.train(model, train_set, val_set, train_cfg)
            rows.append((cells, run, result.best_f1))
            f1s.append(result.best_f1)
        mean = statistics.fmean(f1s)
        std = statistics.pstdev(f1s) if len(f1s) > 1 else 0.0
        agg.append((cells, mean, std))
        print(f"cells {cells}: F1 {mean:.4f} +/- {std:.4f}")
    runs_csv = out_dir / "sweep_runs.csv"
    evaluation.write_metrics_csv(rows, ["cells", "run", "f1"], runs_csv)
    agg_csv = out_dir / "sweep_summary.csv"
    evaluation.write_metrics_csv(agg, ["cells", "mean_f1", "std_f1"], agg_csv)
    plot = out_dir / "sweep_plot.svg"
    _polyline_svg([a[0] for a in agg], [a[1] for a in agg],
                  [a[2] for a in agg], plot)
    return [runs_csv, agg_csv, plot]


# ---------------------------------------------------------------------------
# Entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="memtrack")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-synth", "train", "eval-gap", "count-people",
                 "visualize", "grad-check", "sweep-memory"):
        p = sub.add_parser(name)
        if name != "grad-check":
            p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        if name == "visualize":
            p.add_argument("--limit", type=int, default=None)
        if name == "grad-check":
            p.add_argument("--tolerance", type=float, default=1.0e-4)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)  # fixed reduction order for bitwise determinism
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = None
    try:
        if args.command != "grad-check":
            cfg = load_config(args.config, seed_override=args.seed)
        if args.command == "gen-synth":
            files = cmd_gen_synth(cfg, out_dir)
        elif args.command == "train":
            files = cmd_train(cfg, out_dir)
        elif args.command == "eval-gap":
            files = cmd_eval_gap(cfg, out_dir)
        elif args.command == "count-people":
            files = cmd_count_people(cfg, out_dir)
        elif args.command == "visualize":
            files = cmd_visualize(cfg, out_dir, limit=args.limit)
        elif args.command == "grad-check":
            files = cmd_grad_check(out_dir, tolerance=args.tolerance)
        elif args.command == "sweep-memory":
            files = cmd_sweep_memory(cfg, out_dir)
        else:  # pragma: no cover
            raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, ValueError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    files.append(_write_manifest(out_dir, args.command, cfg, files))
    return 0


if __name__ == "__main__":
    sys.exit(main())
