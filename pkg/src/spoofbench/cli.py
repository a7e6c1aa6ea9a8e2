"""``spoofbench`` command line: corpus -> features -> train-rec / train-gan -> attack -> report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .attack import build_index, targeted_eval, untargeted_eval
from .audio import AudioError, load_wav, vad_trim
from .corpus import OTHER, CorpusSpec, build_corpus, write_corpus
from .features import MelConfig, extract_patches
from .formats import FormatError, load_mels, load_spfb, save_mels, save_pgm, save_spfb
from .recognizer import (RecTrainConfig, deep_features, evaluate, recognizer_from_state,
                         split_indices, train_recognizer)
from .wgan.losses import CriticLossConfig
from .wgan.models import generator_from_state
from .wgan.train import TRACE_FIELDS, GanTrainConfig, sample, save_models, train_targeted, train_untargeted

log = logging.getLogger("spoofbench")

MANIFEST = "manifest.json"
LABELS = "labels.csv"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _write_manifest(out: Path, args: argparse.Namespace, argv: Sequence[str], **extra) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "tool": "spoofbench",
        "version": __version__,
        "subcommand": args.command,
        "argv": list(argv),
        "config": config,
        "seed": getattr(args, "seed", None),
        **extra,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _write_labels(path: Path, labels: Sequence[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "label"])
        for i, lab in enumerate(labels):
            w.writerow([i, lab])


def _read_labels(path: Path) -> list[str]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [r["label"] for r in sorted(rows, key=lambda r: int(r["index"]))]


def load_feature_dir(d: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """All patches of a ``features`` output directory as (X, y, labels)."""
    d = Path(d)
    if not (d / LABELS).exists():
        raise UsageError(f"{d}: no {LABELS}; run `spoofbench features` first")
    labels = _read_labels(d / LABELS)
    xs, ys = [], []
    for lab in labels:
        p = d / f"{lab}.mels"
        if p.exists():
            x, y = load_mels(p)
            xs.append(x)
            ys.append(y)
    if not xs:
        raise UsageError(f"{d}: no .mels files")
    return np.concatenate(xs), np.concatenate(ys), labels


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _load_recognizer(d: str | os.PathLike):
    d = Path(d)
    ckpt = d / "recognizer.spfb" if d.is_dir() else d
    labels_path = (d if d.is_dir() else d.parent) / LABELS
    if not ckpt.exists() or not labels_path.exists():
        raise UsageError(f"missing recognizer checkpoint or {LABELS} under {d}")
    return recognizer_from_state(load_spfb(ckpt), _read_labels(labels_path))


def _load_generator(p: str | os.PathLike):
    p = Path(p)
    if p.is_dir():
        p = p / "generator.spfb"
    if not p.exists():
        raise UsageError(f"missing generator checkpoint {p}")
    return generator_from_state(load_spfb(p))


# ---------------------------------------------------------------------------
# commands


def cmd_corpus(args, argv) -> int:
    spec = CorpusSpec(speakers=args.speakers, utterances=args.utts, duration=args.dur,
                      noise_utterances=args.noise_utts or args.utts, seed=args.seed)
    out = Path(args.output)
    try:
        paths = write_corpus(build_corpus(spec), out)
    except OSError as exc:
        raise UsageError(f"cannot write corpus under {out}: {exc}") from exc
    _write_manifest(out, args, argv, corpus=asdict(spec), outputs=len(paths))
    print(f"wrote {len(paths)} files under {out}")
    return 0


def cmd_features(args, argv) -> int:
    src, out = Path(args.input), Path(args.output)
    cfg = MelConfig()
    dirs = sorted(p for p in src.iterdir() if p.is_dir())
    names = [p.name for p in dirs if p.name != OTHER] + [p.name for p in dirs if p.name == OTHER]
    if not names:
        raise UsageError(f"{src}: no speaker directories")
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    counts = {}
    for label, name in enumerate(names):
        patches = []
        for wav in sorted((src / name).glob("*.wav")):
            try:
                trimmed = vad_trim(load_wav(wav))
            except (AudioError, OSError) as exc:
                log.error("%s: %s", wav, exc)
                failures += 1
                continue
            if len(trimmed) == 0:
                log.warning("%s: silent, skipped", wav)
                continue
            patches.extend(p.values for p in extract_patches(trimmed, cfg, args.stride_frames))
        arr = np.stack(patches) if patches else np.zeros((0, cfg.n_mels, cfg.n_frames))
        save_mels(out / f"{name}.mels", arr, np.full(len(arr), label))
        counts[name] = len(arr)
        if args.export_pgm:
            pdir = out / "pgm" / name
            pdir.mkdir(parents=True, exist_ok=True)
            for i, p in enumerate(arr):
                save_pgm(pdir / f"{i:05d}.pgm", p)
    _write_labels(out / LABELS, names)
    _write_manifest(out, args, argv, mel=asdict(cfg), patches=counts, failures=failures)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 1 if failures else 0


def cmd_train_rec(args, argv) -> int:
    x, y, labels = load_feature_dir(args.features)
    cfg = RecTrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, dropout=args.dropout,
                         train_fraction=args.split, patience=args.patience, seed=args.seed)
    model, metrics = train_recognizer(x, y, labels, cfg)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    save_spfb(out / "recognizer.spfb", model.state_dict())
    _write_labels(out / LABELS, labels)
    _write_csv(out / "metrics.csv", ["epoch", "loss", "accuracy"],
               [(i, l, a) for i, (l, a) in enumerate(zip(metrics.train_loss, metrics.test_accuracy))])
    _, te = split_indices(y, cfg.train_fraction, cfg.seed)
    ev = evaluate(model, x[te], y[te])
    _write_csv(out / "confusion.csv", ["truth\\pred"] + labels,
               [[lab] + row.tolist() for lab, row in zip(labels, ev.confusion)])
    _write_manifest(out, args, argv, train_config=asdict(cfg))
    print(f"test_accuracy,{ev.accuracy!r}")
    return 0


def cmd_train_gan(args, argv) -> int:
    if args.loss == "mixed" and not args.target:
        raise UsageError("--loss mixed requires --target")
    if args.mode == "targeted" and not args.target:
        raise UsageError("--mode targeted requires --target")
    if args.target and args.mode == "untargeted":
        raise UsageError("--target given with --mode untargeted")
    x, y, labels = load_feature_dir(args.features)
    overrides = {k: v for k, v in dict(
        iterations=args.iters, n_critic=args.n_critic, batch_size=args.batch,
        latent_dim=args.latent_dim, critic_lr=args.critic_lr, generator_lr=args.gen_lr,
        sigma=args.sigma, init_std=args.init_std, seed=args.seed,
        checkpoint_every=args.checkpoint_every).items() if v is not None}
    out = Path(args.output)
    if overrides.get("checkpoint_every"):
        overrides["checkpoint_dir"] = str(out / "checkpoints")
    cfg = GanTrainConfig.for_loss(args.loss, **overrides)
    speech = np.array([labels[i] != OTHER for i in y])
    if args.mode == "untargeted":
        res = train_untargeted(x[speech], cfg)
        loss_cfg = CriticLossConfig(lam=args.lam, mode="plain")
    else:
        if args.target not in labels or args.target == OTHER:
            raise UsageError(f"unknown target speaker {args.target!r}; have {labels}")
        t = labels.index(args.target)
        loss_cfg = CriticLossConfig(lam=args.lam, alpha=args.alpha, mode=args.loss)
        res = train_targeted(x[y == t], x[speech & (y != t)], cfg, loss_cfg)
    save_models(res, out)
    _write_csv(out / "trace.csv", TRACE_FIELDS, [[row[k] for k in TRACE_FIELDS] for row in res.trace])
    if args.samples:
        s = sample(res.generator, args.samples, args.seed)
        save_mels(out / "samples.mels", s, np.zeros(len(s), dtype=np.int64))
    _write_manifest(out, args, argv, train_config=asdict(cfg), loss_config=asdict(loss_cfg))
    if res.trace:
        last = res.trace[-1]
        print(f"critic_loss,{last['critic_loss']!r}\ngrad_norm_mean,{last['grad_norm_mean']!r}")
    return 0


def cmd_attack(args, argv) -> int:
    rec = _load_recognizer(args.recognizer)
    g = _load_generator(args.generator)
    if args.kind == "untargeted":
        if not args.features:
            raise UsageError("untargeted attack needs --features for the k-NN index")
        x, y, labels = load_feature_dir(args.features)
        speech = np.array([labels[i] != OTHER for i in y])
        idx = build_index(deep_features(rec, x[speech]), [rec.labels.index(labels[i]) for i in y[speech]])
        report = untargeted_eval(g, rec, idx, args.n, args.seed)
    else:
        if not args.target:
            raise UsageError("targeted attack needs --target")
        if args.target not in rec.labels:
            raise UsageError(f"unknown target {args.target!r}; recognizer knows {rec.labels}")
        report = targeted_eval(g, rec, args.target, args.n, args.seed)
    out = Path(args.output)
    report.write(out)
    _write_manifest(out, args, argv)
    for k, v in report.summary().items():
        print(f"{k},{v}")
    return 0


def cmd_report(args, argv) -> int:
    rows, keys = [], ["run"]
    for d in args.runs:
        p = Path(d) / "summary.csv"
        if not p.exists():
            raise UsageError(f"{d}: no summary.csv")
        with open(p, newline="") as f:
            summary = {r["key"]: r["value"] for r in csv.DictReader(f)}
        summary["run"] = str(d)
        keys += [k for k in summary if k not in keys]
        rows.append(summary)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([r.get(k, "") for k in keys])
    if args.output:
        _write_csv(Path(args.output), keys, [[r.get(k, "") for k in keys] for r in rows])
    return 0


def cmd_replay(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    replay_argv = list(manifest["argv"])
    if args.output:
        for flag in ("-o", "--output"):
            if flag in replay_argv:
                replay_argv[replay_argv.index(flag) + 1] = args.output
    log.info("replaying: %s", " ".join(replay_argv))
    return main(replay_argv)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spoofbench", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="synthesize a multi-speaker WAV corpus")
    c.add_argument("--speakers", type=int, default=10)
    c.add_argument("--utts", type=int, default=20)
    c.add_argument("--noise-utts", type=int, default=None, help="default: same as --utts")
    c.add_argument("--dur", type=float, default=2.0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_corpus)

    f = sub.add_parser("features", help="WAV tree -> per-speaker MELS patch files")
    f.add_argument("-i", "--input", required=True)
    f.add_argument("-o", "--output", required=True)
    f.add_argument("--stride-frames", type=int, default=64)
    f.add_argument("--export-pgm", action="store_true")
    f.set_defaults(func=cmd_features)

    r = sub.add_parser("train-rec", help="train the CNN speaker recognizer")
    r.add_argument("--features", required=True)
    r.add_argument("-o", "--output", required=True)
    r.add_argument("--epochs", type=int, default=30)
    r.add_argument("--batch", type=int, default=64)
    r.add_argument("--lr", type=float, default=1e-4)
    r.add_argument("--dropout", type=float, default=0.5)
    r.add_argument("--split", type=float, default=0.8)
    r.add_argument("--patience", type=int, default=5)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_train_rec)

    g = sub.add_parser("train-gan", help="train a WGAN-GP generator")
    g.add_argument("--features", required=True)
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--mode", choices=("untargeted", "targeted"), default=None,
                   help="default: targeted when --target is given")
    g.add_argument("--loss", choices=("plain", "mixed"), default="plain")
    g.add_argument("--target")
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--lambda", dest="lam", type=float, default=10.0)
    g.add_argument("--sigma", type=float, default=None, help="target noise std / data std")
    g.add_argument("--iters", type=int, default=None)
    g.add_argument("--n-critic", type=int, default=None)
    g.add_argument("--batch", type=int, default=None)
    g.add_argument("--latent-dim", type=int, default=None)
    g.add_argument("--critic-lr", type=float, default=None)
    g.add_argument("--gen-lr", type=float, default=None)
    g.add_argument("--init-std", type=float, default=None)
    g.add_argument("--checkpoint-every", type=int, default=None)
    g.add_argument("--samples", type=int, default=0, help="also write this many generated patches")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_train_gan)

    a = sub.add_parser("attack", help="evaluate a generator against the recognizer")
    a.add_argument("--kind", choices=("untargeted", "targeted"), required=True)
    a.add_argument("--generator", required=True)
    a.add_argument("--recognizer", required=True)
    a.add_argument("--features", help="real-speaker features for the k-NN index (untargeted)")
    a.add_argument("--target")
    a.add_argument("--n", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("-o", "--output", required=True)
    a.set_defaults(func=cmd_attack)

    rp = sub.add_parser("report", help="tabulate attack summaries")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("-o", "--output")
    rp.set_defaults(func=cmd_report)

    rr = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rr.add_argument("manifest")
    rr.add_argument("-o", "--output", help="write to this directory instead")
    rr.set_defaults(func=cmd_replay)
    return p


def _limit_threads() -> None:
    n = os.environ.get("SPOOFBENCH_THREADS")
    if n:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(n))


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "mode", "absent") is None:
        args.mode = "targeted" if args.target else "untargeted"
    _limit_threads()
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (FormatError, AudioError, OSError, ValueError) as exc:
        print(f"spoofbench {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
