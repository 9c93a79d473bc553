"""Command-line entry point: ``chartrl {gen-data,train,eval,export-curves}``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .chartenv import EnvConfig, PerturbationKind, generate_corpus, read_tasks, write_tasks
from .errors import ConfigError, TrainingError
from .evaluation import (
    compare,
    evaluate,
    robustness_sweep,
    write_report_csv,
    write_report_json,
    write_sweep_csv,
)
from .grpo import (
    METRIC_COLUMNS,
    TrainConfig,
    corpus_checksum,
    load_state,
    read_metrics_csv,
    run_training,
    save_state,
    smooth,
    write_metrics_csv,
)
from .policy import VocabularyMismatch, init_params, load_checkpoint, save_checkpoint
from .reward import RewardConfig
from .sft import generate_traces, sft_train, write_traces


class CLIError(Exception):
    """User-facing failure; printed without a traceback, exit code 1."""


DEFAULT_COUNTS = {"hard_train": 448, "easy_train": 6200, "hard_eval": 500}
EVAL_SEED_OFFSET = 1_000_003


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _manifest(command: str, argv: Sequence[str], config: dict, checksums: dict, started: str) -> dict:
    body = {"command": command, "argv": list(argv), "config": config, "corpus_checksums": checksums,
            "code_version": __version__}
    run_id = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
    return {"run_id": run_id, **body, "started": started, "finished": None}


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _refuse_existing(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise CLIError(f"refusing to overwrite {', '.join(existing)} (pass --force)")


def _masking(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> None:
    env = EnvConfig()
    if args.difficulty is not None:
        if args.out is None:
            raise CLIError("--difficulty requires --out FILE")
        count = args.count
        if count is None:
            count = DEFAULT_COUNTS[f"{args.difficulty}_train" if args.split == "train" else "hard_eval"]
        seed = args.seed if args.split == "train" else args.seed + EVAL_SEED_OFFSET
        out = Path(args.out)
        _refuse_existing([out], args.force)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_tasks(out, generate_corpus(count, args.difficulty, seed, env))
        print(f"wrote {count} {args.difficulty} tasks to {out}")
        return
    out_dir = Path(args.out_dir or "data")
    targets = {name: out_dir / f"{name}.jsonl" for name in DEFAULT_COUNTS}
    _refuse_existing(list(targets.values()), args.force)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = {
        "hard_train": ("hard", args.seed),
        "easy_train": ("easy", args.seed),
        "hard_eval": ("hard", args.seed + EVAL_SEED_OFFSET),
    }
    for name, (difficulty, seed) in specs.items():
        count = DEFAULT_COUNTS[name] if args.count is None or name == "hard_eval" else args.count
        write_tasks(targets[name], generate_corpus(count, difficulty, seed, env))
        print(f"wrote {count} {difficulty} tasks to {targets[name]}")


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _subsample(corpus: list, k: int | None, seed: int) -> list:
    if k is None:
        return corpus
    if not 1 <= k <= len(corpus):
        raise CLIError(f"--train-samples must be in [1, {len(corpus)}], got {k}")
    order = np.random.default_rng(seed).permutation(len(corpus))[:k]
    return [corpus[int(i)] for i in order]


def _train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig(
        group_size=args.group_size,
        clip_eps=args.clip_eps,
        kl_beta=args.kl_beta,
        lr=args.lr,
        steps=args.steps,
        tasks_per_step=args.tasks_per_step,
        seed=args.seed,
        reward=RewardConfig(tau=args.tau),
        structural_masking=args.structural_masking,
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        raise CLIError(f"invalid training configuration: {exc}") from exc
    return cfg


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> None:
    started = _now()
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        raise CLIError(f"corpus {corpus_path} does not exist")
    corpus = _subsample(read_tasks(corpus_path), args.train_samples, args.seed)
    if not corpus:
        raise CLIError(f"corpus {corpus_path} is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    checksums = {"train": corpus_checksum(corpus)}

    if args.method == "rl":
        metrics_path = out / "metrics.csv"
        if args.resume:
            if not ckpt.exists():
                raise CLIError(f"nothing to resume: {ckpt} does not exist")
            state, saved = load_state(ckpt)
            old = json.loads(ckpt.read_text())["extra"]["manifest"]
            if old.get("corpus_checksums", {}).get("train") != checksums["train"]:
                raise CLIError("--resume requires the same training corpus as the original run")
            config = TrainConfig.from_dict({**saved.to_dict(), "steps": args.steps})
        else:
            _refuse_existing([ckpt, metrics_path], args.force)
            config = _train_config(args)
            state = None
        manifest = _manifest("train", argv, {"method": "rl", "train": config.to_dict(),
                                             "init_scale": args.init_scale,
                                             "train_samples": args.train_samples}, checksums, started)

        def checkpoint(st, m):
            if args.checkpoint_every and st.step % args.checkpoint_every == 0:
                save_state(ckpt, st, config, manifest)

        if state is None:
            state = run_training(config, corpus, init_params(args.seed, args.init_scale), callback=checkpoint)
        else:
            state = run_training(config, corpus, state=state, callback=checkpoint)
        manifest["finished"] = _now()
        save_state(ckpt, state, config, manifest)
        write_metrics_csv(metrics_path, state.metrics)
        _write_json(out / "manifest.json", manifest)
        last = state.metrics[-1] if state.metrics else None
        summary = "" if last is None else f" (final accuracy reward {last.mean_accuracy_reward:.3f})"
        print(f"trained {state.step} steps -> {ckpt}{summary}")
        return

    mode = "oracle_canonical" if args.method == "cot-sft" else "answer_only"
    _refuse_existing([ckpt], args.force)
    traces = generate_traces(corpus, mode)
    write_traces(out / "traces.jsonl", traces)
    params, curve = sft_train(init_params(args.seed, args.init_scale), traces, args.epochs, args.lr,
                              tasks=corpus, batch_size=args.batch_size, seed=args.seed,
                              masking=args.structural_masking)
    config = {"method": args.method, "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
              "seed": args.seed, "init_scale": args.init_scale, "structural_masking": args.structural_masking,
              "train_samples": args.train_samples}
    manifest = _manifest("train", argv, config, checksums, started)
    manifest["finished"] = _now()
    save_checkpoint(ckpt, params, None, {"kind": "sft", "sft_config": config, "loss_curve": curve,
                                         "manifest": manifest})
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss"))
        for i, loss in enumerate(curve):
            w.writerow((i, repr(loss)))
    _write_json(out / "manifest.json", manifest)
    print(f"trained {args.epochs} epochs of {args.method} -> {ckpt}")


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def _load(path: str):
    p = Path(path)
    if not p.exists():
        raise CLIError(f"checkpoint {p} does not exist")
    try:
        return load_checkpoint(p)
    except VocabularyMismatch as exc:
        raise CLIError(f"refusing checkpoint: {exc}") from exc


def _checkpoint_masking(extra: dict) -> bool:
    if "train_config" in extra:
        return bool(extra["train_config"].get("structural_masking", True))
    return bool(extra.get("sft_config", {}).get("structural_masking", True))


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> None:
    started = _now()
    params, _, extra = _load(args.checkpoint)
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        raise CLIError(f"corpus {corpus_path} does not exist")
    tasks = read_tasks(corpus_path)
    if not tasks:
        raise CLIError(f"corpus {corpus_path} is empty")
    masking = _checkpoint_masking(extra) if args.structural_masking is None else args.structural_masking
    reward = RewardConfig(tau=args.tau)
    report = evaluate(params, tasks, reward, masking)
    if args.baseline:
        base_params, _, base_extra = _load(args.baseline)
        base_mask = _checkpoint_masking(base_extra) if args.structural_masking is None else masking
        report = compare(report, evaluate(base_params, tasks, reward, base_mask))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("report.json")
    manifest = _manifest("eval", argv, {"tau": args.tau, "structural_masking": masking,
                                        "checkpoint": str(args.checkpoint), "baseline": args.baseline},
                         {"eval": corpus_checksum(tasks)}, started)
    if args.robustness:
        sweep = robustness_sweep(params, tasks, list(PerturbationKind), args.seed, reward, masking)
        write_sweep_csv(out.with_suffix(".robustness.csv"), sweep)
        manifest["robustness"] = {k: r.to_dict() for k, r in sweep.items()}
    manifest["finished"] = _now()
    write_report_json(out, report, {"manifest": manifest})
    write_report_csv(out.with_suffix(".csv"), report)
    line = f"accuracy {report.accuracy:.4f} on {report.n} tasks"
    if report.p_value is not None:
        delta = "n/a" if report.relative_delta is None else f"{report.relative_delta:+.1%}"
        line += f"; baseline {report.baseline_accuracy:.4f}, rel. delta {delta}, p-value {report.p_value:.3g}"
    print(line)
    if args.robustness:
        for key, rep in sweep.items():
            print(f"  {key:20s} n={rep.n:4d} accuracy {rep.accuracy:.4f}")


# --------------------------------------------------------------------------
# export-curves
# --------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def render_svg(title: str, series: dict[str, tuple[np.ndarray, np.ndarray]], width: int = 640,
               height: int = 360) -> str:
    """Self-contained SVG line chart; one polyline per named series."""
    left, right, top, bottom = 60, 150, 30, 40
    xs = np.concatenate([x for x, _ in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([y for _, y in series.values()]) if series else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max()) or 1.0
    y0, y1 = min(0.0, float(ys.min())), max(1.0, float(ys.max()))
    if x1 == x0:
        x1 = x0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left}" y="18" font-size="13">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        yv = y0 + frac * (y1 - y0)
        xv = x0 + frac * (x1 - x0)
        parts.append(f'<text x="{left - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.2f}</text>')
        parts.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:.0f}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 6}" text-anchor="middle">step</text>')
    for i, (name, (x, y)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 * i + 10
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_export_curves(args: argparse.Namespace) -> None:
    if args.window < 1:
        raise CLIError("--window must be >= 1")
    labels = args.labels.split(",") if args.labels else [Path(p).parent.name or Path(p).stem for p in args.metrics]
    if len(labels) != len(args.metrics):
        raise CLIError("--labels must name every metrics file")
    if len(set(labels)) != len(labels):
        labels = [f"{lab}#{i}" for i, lab in enumerate(labels)]
    runs = {}
    for label, path in zip(labels, args.metrics):
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise CLIError(f"{path} does not have the metric columns {','.join(METRIC_COLUMNS)}")
        runs[label] = read_metrics_csv(path)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    value_cols = METRIC_COLUMNS[1:]
    smoothed = {}
    for label, rows in runs.items():
        steps = np.array([r["step"] for r in rows])
        smoothed[label] = (steps, {c: smooth([r[c] for r in rows], args.window) for c in value_cols})
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run",) + METRIC_COLUMNS)
        for label, (steps, cols) in smoothed.items():
            for i, s in enumerate(steps):
                w.writerow([label, int(s)] + [repr(float(cols[c][i])) for c in value_cols])
    for c in value_cols:
        svg = render_svg(f"{c} (window {args.window})", {lab: (st, cols[c]) for lab, (st, cols) in smoothed.items()})
        (out / f"{c}.svg").write_text(svg, encoding="utf-8")
    print(f"wrote curves.csv and {len(value_cols)} SVG charts to {out}")


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    d = TrainConfig()
    p = argparse.ArgumentParser(prog="chartrl", description=__doc__)
    p.add_argument("--version", action="version", version=f"chartrl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write seeded task corpora as JSONL")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--difficulty", choices=("easy", "hard"))
    g.add_argument("--count", type=int)
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.add_argument("--out", help="output file (with --difficulty)")
    g.add_argument("--out-dir", help="directory for the default train/eval bundle")
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train a policy with GRPO or supervised fine-tuning")
    t.add_argument("--method", choices=("rl", "sft", "cot-sft"), default="rl")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int, default=d.seed)
    t.add_argument("--train-samples", type=int)
    t.add_argument("--steps", type=int, default=d.steps)
    t.add_argument("--group-size", type=int, default=d.group_size)
    t.add_argument("--tasks-per-step", type=int, default=d.tasks_per_step)
    t.add_argument("--clip-eps", type=float, default=d.clip_eps)
    t.add_argument("--kl-beta", type=float, default=d.kl_beta)
    t.add_argument("--tau", type=float, default=RewardConfig().tau)
    t.add_argument("--lr", type=float, default=d.lr)
    t.add_argument("--structural-masking", type=_masking, default=d.structural_masking, metavar="{on,off}")
    t.add_argument("--init-scale", type=float, default=1.0)
    t.add_argument("--epochs", type=int, default=20, help="SFT epochs")
    t.add_argument("--batch-size", type=int, default=16, help="SFT minibatch size")
    t.add_argument("--checkpoint-every", type=int, default=500)
    t.add_argument("--workers", type=int, default=1, help="accepted for compatibility; results never depend on it")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="greedy-decode accuracy on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--baseline")
    e.add_argument("--robustness", action="store_true")
    e.add_argument("--tau", type=float, default=RewardConfig().tau)
    e.add_argument("--structural-masking", type=_masking, default=None, metavar="{on,off}")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out")

    x = sub.add_parser("export-curves", help="smooth metrics CSVs into a combined CSV and SVG charts")
    x.add_argument("metrics", nargs="+")
    x.add_argument("--out-dir", required=True)
    x.add_argument("--window", type=int, default=20)
    x.add_argument("--labels")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            cmd_gen_data(args)
        elif args.command == "train":
            cmd_train(args, argv)
        elif args.command == "eval":
            cmd_eval(args, argv)
        else:
            cmd_export_curves(args)
    except (CLIError, ConfigError, TrainingError, ValueError, OSError) as exc:
        print(f"chartrl: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
