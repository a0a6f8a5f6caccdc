"""Command-line entry point: synth, featurize, train, eval and report.

Exit status is 0 on success, 1 for user or configuration errors (bad
flags, invalid files, schema violations) and 2 for internal or numeric
failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, TrainConfig, dump_config, from_dict, load_config
from .corpus import (
    SYNTH_SAMPLE_RATE,
    DatasetSplit,
    ParameterError,
    SynthClassSpec,
    WavFormatError,
    load_wav,
    make_synth_corpus,
    read_manifest,
    read_segment_index,
    segment_clip,
    split_dataset,
    write_manifest,
    write_segment_index,
    write_wav,
)
from .features import ContainerError, featurize, to_bytes
from .nnkit import CheckpointError, NumericGuardError, load_checkpoint
from .smoothreg import PerturbationError
from .trainer import (
    FeatureStore,
    RunArtifacts,
    TrainingAborted,
    evaluate,
    model_config_for,
    perturbed_test_inputs,
    read_confusion,
    read_loss_curve,
    run_matrix,
    train,
    write_confusion,
)

log = logging.getLogger("uatrkit")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
USER_ERRORS = (ConfigError, ParameterError, WavFormatError, ContainerError, CheckpointError,
               PerturbationError, FileNotFoundError, NotADirectoryError, PermissionError)
SEGMENT_INDEX = "segments.tsv"


class UsageError(ValueError):
    pass


@dataclass
class RunManifest:
    config_digest: str
    manifest_path: str
    out_dir: str
    tool_version: str = __version__

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- synth

_SYNTH_TOP = {
    "sample_rate": SYNTH_SAMPLE_RATE,
    "clip_seconds": 90.0,
    "seg_seconds": 30.0,
    "hop_seconds": 15.0,
    "clips_per_class": 10,
    "duplication_rate": 0.0,
    "jitter": 0.03,
    "dup_broadband_level": 0.0,
}
_CLASS_FIELDS = {f.name: f for f in fields(SynthClassSpec)}


def parse_synth_spec(data) -> tuple[dict, list[SynthClassSpec]]:
    """Validate a synth spec mapping; every problem names its key path."""
    if not isinstance(data, dict):
        raise ConfigError(["<root>: synth spec must be a mapping"])
    problems = []
    top = dict(_SYNTH_TOP)
    for key, value in data.items():
        if key == "classes":
            continue
        if key not in top:
            problems.append(f"{key}: unknown key")
        elif not isinstance(value, (int, float)) or isinstance(value, bool):
            problems.append(f"{key}: expected a number, got {value!r}")
        else:
            top[key] = value
    classes = data.get("classes")
    specs = []
    if not isinstance(classes, list) or not classes:
        problems.append("classes: required, a non-empty list of class mappings")
        classes = []
    for i, entry in enumerate(classes):
        where = f"classes[{i}]"
        if not isinstance(entry, dict):
            problems.append(f"{where}: expected a mapping")
            continue
        kw = {}
        for key, value in entry.items():
            if key not in _CLASS_FIELDS:
                problems.append(f"{where}.{key}: unknown key")
            elif not isinstance(value, (int, float)) or isinstance(value, bool):
                problems.append(f"{where}.{key}: expected a number, got {value!r}")
            else:
                kw[key] = value
        if "fundamental_hz" not in entry:
            problems.append(f"{where}.fundamental_hz: required key is missing")
            continue
        spec = SynthClassSpec(**kw)
        try:
            spec.validate(int(top["sample_rate"]))
        except ParameterError as exc:
            problems.append(f"{where}: {exc}")
        specs.append(spec)
    if problems:
        raise ConfigError(problems)
    return top, specs


def cmd_synth(args) -> int:
    if not args.config:
        raise UsageError("synth needs --config pointing at a synth spec file")
    with open(args.config) as fh:
        data = yaml.safe_load(fh)
    top, specs = parse_synth_spec(data)
    out = Path(args.out or ".")
    (out / "wav").mkdir(parents=True, exist_ok=True)
    corpus = make_synth_corpus(
        specs,
        clips_per_class=int(top["clips_per_class"]),
        duplication_rate=float(top["duplication_rate"]),
        seed=args.seed if args.seed is not None else 0,
        clip_seconds=float(top["clip_seconds"]),
        seg_seconds=float(top["seg_seconds"]),
        hop_seconds=float(top["hop_seconds"]),
        sample_rate=int(top["sample_rate"]),
        jitter=float(top["jitter"]),
        dup_broadband_level=float(top["dup_broadband_level"]),
    )
    rows = []
    for clip in corpus.clips:
        rel = f"wav/{clip.clip_id}.wav"
        write_wav(out / rel, clip.samples, clip.sample_rate)
        rows.append((rel, clip.label, clip.source_id))
    write_manifest(out / "manifest.tsv", rows)
    write_segment_index(out / SEGMENT_INDEX, corpus.segments)
    print(f"wrote {len(rows)} clips, {len(corpus.segments)} segments to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- corpus loading

def load_segments(manifest, cfg: TrainConfig) -> list:
    """Segment every clip in ``manifest``; attach duplicate groups from a sibling segment index."""
    records = read_manifest(manifest)
    if not records:
        raise ParameterError(f"manifest {manifest} lists no clips")
    groups = {}
    index = Path(manifest).parent / SEGMENT_INDEX
    if index.exists():
        groups = {(r["clip_id"], r["offset"]): r["dup_group"] for r in read_segment_index(index)}
    rates = set()
    segments = []
    for path, label, source_id in records:
        clip = load_wav(path, label, source_id)
        rates.add(clip.sample_rate)
        for seg in segment_clip(clip, cfg.corpus.seg_seconds, cfg.corpus.hop_seconds):
            seg.dup_group = groups.get((clip.clip_id, seg.start))
            segments.append(seg)
    if len(rates) > 1:
        raise ParameterError(f"clips in {manifest} mix sample rates {sorted(rates)}; resample first")
    if not segments:
        raise ParameterError(f"no clip in {manifest} is long enough for one {cfg.corpus.seg_seconds} s segment")
    return segments


def build_split(manifest, cfg: TrainConfig) -> tuple[DatasetSplit, int]:
    segments = load_segments(manifest, cfg)
    split = split_dataset(segments, tuple(cfg.corpus.split_ratios), cfg.corpus.split_seed)
    for w in split.warnings:
        log.warning("%s", w)
    return split, 1 + max(s.label for s in segments)


# ---------------------------------------------------------------- featurize

def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def cmd_featurize(args) -> int:
    if not args.manifest:
        raise UsageError("featurize needs --manifest")
    cfg = resolve_config(args)
    fc = cfg.features
    out = Path(args.out or ".") / fc.kind
    out.mkdir(parents=True, exist_ok=True)
    index_path = out / "index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}
    params = json.dumps(asdict(fc), sort_keys=True).encode()
    computed = hits = 0
    for seg in load_segments(args.manifest, cfg):
        name = f"{seg.segment_id}.acsp"
        key = _sha(params + np.ascontiguousarray(seg.samples, dtype="<f8").tobytes())
        entry = index.get(name)
        target = out / name
        if entry and entry["input"] == key and target.exists():
            if _sha(target.read_bytes()) == entry["file"]:
                hits += 1
                continue
            log.warning("cache entry %s does not match its digest; recomputing", target)
        spec = featurize(seg.samples, fc.kind, sample_rate=seg.clip.sample_rate, n_mels=fc.n_mels,
                         frame_len_s=fc.frame_len_s, hop_len_s=fc.hop_len_s,
                         cqt_fmin=fc.cqt_fmin, cqt_bins_per_octave=fc.cqt_bins_per_octave)
        blob = to_bytes(spec)
        target.write_bytes(blob)
        index[name] = {"input": key, "file": _sha(blob), "frames": spec.values.shape[0],
                       "bins": spec.values.shape[1]}
        computed += 1
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    print(f"{fc.kind}: {computed} computed, {hits} cached, in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train / eval

def resolve_config(args) -> TrainConfig:
    """Config file (or defaults) with command-line overrides applied."""
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "feature", None):
        changes["features.kind"] = args.feature
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "prune", None) is not None:
        changes["prune"] = args.prune
    if getattr(args, "alpha", None) is not None:
        changes["alpha"] = args.alpha
    if getattr(args, "epsilon", None) is not None:
        changes["epsilon"] = args.epsilon
    return cfg.replace(**changes) if changes else cfg


def _write_run(art: RunArtifacts, cfg: TrainConfig, out: Path, manifest) -> None:
    art.write(out)
    (out / "config.yaml").write_text(dump_config(cfg))
    RunManifest(cfg.digest(), str(manifest), str(out)).write(out / "run_manifest.json")


def cmd_train(args) -> int:
    if not args.manifest:
        raise UsageError("train needs --manifest")
    cfg = resolve_config(args)
    split, n_classes = build_split(args.manifest, cfg)
    out = Path(args.out or ".")
    if not args.matrix:
        art = train(cfg, split, n_classes=n_classes)
        _write_run(art, cfg, out, args.manifest)
        print(f"accuracy {art.accuracy:.4f}  epochs {art.epochs_run}  sample passes {art.sample_passes}  "
              f"pruned {len(art.prune_events)}  -> {out}")
        return EXIT_OK
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    res = run_matrix(cfg, split, seeds=seeds, n_classes=n_classes)
    failed = 0
    for (mode, prune, seed), cell in res.cells.items():
        if isinstance(cell, BaseException):
            failed += 1
            continue
        _write_run(cell, cfg.replace(mode=mode, prune=prune, seed=seed), out / _cell_name(mode, prune, seed),
                   args.manifest)
    table = render_table(res.rows)
    (out / "summary_table.txt").write_text(table + "\n")
    print(table)
    return EXIT_INTERNAL if failed else EXIT_OK


def _cell_name(mode, prune, seed) -> str:
    return f"{mode}-{'prune' if prune else 'full'}-s{seed}"


def cmd_eval(args) -> int:
    if not args.manifest:
        raise UsageError("eval needs --manifest")
    run = Path(args.run or args.out or ".")
    cfg = load_config(run / "config.yaml") if not args.config else resolve_config(args)
    split, n_classes = build_split(args.manifest, cfg)
    model = load_checkpoint(run / "best.ckpt", model_config_for(cfg, n_classes))
    store = FeatureStore(cfg)
    X = perturbed_test_inputs(cfg, store, split.test)
    y = np.array([s.label for s in split.test], dtype=np.int64)
    acc, cm = evaluate(model, X, y)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_confusion(out / "eval_confusion.tsv", cm)
    (out / "eval.json").write_text(json.dumps({"accuracy": acc, "test_count": int(cm.sum())}, indent=2) + "\n")
    print(f"accuracy {acc:.4f} on {int(cm.sum())} test segments")
    print(render_confusion(cm))
    return EXIT_OK


# ---------------------------------------------------------------- report

def _find_runs(paths) -> list[Path]:
    runs = []
    for p in map(Path, paths):
        if not p.exists():
            raise FileNotFoundError(f"no such run directory: {p}")
        if (p / "summary.json").exists():
            runs.append(p)
        else:
            runs.extend(sorted(q.parent for q in p.rglob("summary.json")))
    if not runs:
        raise UsageError("no runs found (looked for summary.json)")
    return runs


def _fmt(v, spec="{:.4f}") -> str:
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "-"
    return spec.format(v)


def render_table(rows) -> str:
    head = ("mode", "prune", "runs", "acc_mean", "acc_std", "sample_passes", "reduction_%", "wall_s")
    body = [(r["mode"], "yes" if r["prune"] else "no", str(r["n_runs"]), _fmt(r["acc_mean"]),
             _fmt(r["acc_std"]), _fmt(r["sample_passes"], "{:.0f}"), _fmt(r["reduction_pct"], "{:.1f}"),
             _fmt(r.get("wall_time_s"), "{:.1f}")) for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(x.rjust(w) for x, w in zip(line, widths)) for line in (head, *body)]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_confusion(cm) -> str:
    cm = np.asarray(cm)
    w = max(5, len(str(cm.max() if cm.size else 0)), len(str(cm.sum())))
    lines = ["true\\pred".ljust(10) + "".join(str(j).rjust(w + 1) for j in range(cm.shape[1])) + "  |" + "sum".rjust(w + 1)]
    for i, row in enumerate(cm):
        lines.append(str(i).ljust(10) + "".join(str(int(v)).rjust(w + 1) for v in row) + "  |" + str(int(row.sum())).rjust(w + 1))
    return "\n".join(lines)


def collect_rows(runs) -> tuple[list[dict], dict]:
    """Group runs by (mode, prune) into summary rows; returns rows and per-run confusions."""
    groups: dict = {}
    confusions = {}
    n_classes = set()
    for run in runs:
        summary = json.loads((run / "summary.json").read_text())
        timing = json.loads((run / "timing.json").read_text()) if (run / "timing.json").exists() else {}
        cm = read_confusion(run / "confusion.tsv")
        n_classes.add(cm.shape[0])
        confusions[run] = cm
        meta = summary.get("metadata", {})
        key = (meta.get("mode", "?"), bool(meta.get("prune", False)))
        groups.setdefault(key, []).append((summary, timing.get("wall_time_s", float("nan"))))
    if len(n_classes) > 1:
        raise UsageError(f"runs disagree on the number of classes: {sorted(n_classes)}")
    rows = []
    for (mode, prune), items in sorted(groups.items()):
        accs = np.array([s["accuracy"] for s, _ in items], dtype=float)
        rows.append({
            "mode": mode, "prune": prune, "n_runs": len(items),
            "acc_mean": float(accs.mean()), "acc_std": float(accs.std()),
            "sample_passes": float(np.mean([s["sample_passes"] for s, _ in items])),
            "wall_time_s": float(np.mean([t for _, t in items])),
            "reduction_pct": None,
        })
    for row in rows:
        twin = next((r for r in rows if r["mode"] == row["mode"] and not r["prune"]), None)
        if row["prune"] and twin and twin["sample_passes"]:
            row["reduction_pct"] = 100.0 * (1.0 - row["sample_passes"] / twin["sample_passes"])
    return rows, confusions


def cmd_report(args) -> int:
    runs = _find_runs(args.runs)
    rows, confusions = collect_rows(runs)
    parts = [render_table(rows)]
    for run, cm in confusions.items():
        parts.append(f"\n[{run}]\n{render_confusion(cm)}")
    text = "\n".join(parts)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text + "\n")
        with open(out / "curves.tsv", "w") as fh:
            fh.write("run\tepoch\ttrain_loss\tval_loss\ttest_loss\tlr\tactive_set_size\n")
            for run in runs:
                for r in read_loss_curve(run / "loss_curve.tsv"):
                    fh.write(f"{run}\t{r['epoch']}\t{r['train_loss']!r}\t{r['val_loss']!r}\t{r['test_loss']!r}\t"
                             f"{r['lr']!r}\t{r['active_set_size']}\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser, top: bool) -> None:
    # on subcommands unset options are suppressed so they do not mask the same flag given before the command
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=d(None), help="YAML config (train/eval/featurize) or synth spec (synth)")
    p.add_argument("--manifest", default=d(None), help="clip manifest (path, label, source_id)")
    p.add_argument("--out", default=d(None), help="output directory (default: current; report writes files only when given)")
    p.add_argument("--seed", type=int, default=d(None))
    p.add_argument("--feature", choices=("stft", "mel", "cqt"), default=d(None))
    p.add_argument("--mode", choices=("baseline", "aug", "smooth"), default=d(None))
    p.add_argument("--prune", action=argparse.BooleanOptionalAction, default=d(None))
    p.add_argument("--alpha", type=float, default=d(None))
    p.add_argument("--epsilon", type=float, default=d(None))
    p.add_argument("--print-config", action="store_true", default=d(False),
                   help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uatrkit",
                                description="Data pruning and smoothness regularization for acoustic target recognition.")
    _add_common(p, top=True)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command")
    sub.add_parser("synth", help="synthesize a labeled ship-noise corpus")
    sub.add_parser("featurize", help="extract and cache spectrograms")
    t = sub.add_parser("train", help="train one run or the experiment matrix")
    t.add_argument("--matrix", action="store_true", help="run every mode x prune cell")
    t.add_argument("--seeds", help="comma-separated seeds for --matrix")
    e = sub.add_parser("eval", help="evaluate a run's best checkpoint")
    e.add_argument("--run", help="run directory holding best.ckpt (default: --out)")
    r = sub.add_parser("report", help="tabulate finished runs")
    r.add_argument("runs", nargs="+")
    for sp in sub.choices.values():
        _add_common(sp, top=False)
    return p


COMMANDS = {"synth": cmd_synth, "featurize": cmd_featurize, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.print_config:
            sys.stdout.write(dump_config(resolve_config(args)))
            return EXIT_OK
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_USER
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_USER
    except (UsageError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (TrainingAborted, NumericGuardError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - stable exit contract
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
