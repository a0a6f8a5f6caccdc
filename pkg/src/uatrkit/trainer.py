"""Epoch loop, evaluation and the {mode} x {prune} experiment matrix."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnkit
from .config import TrainConfig
from .features import featurize, normalize
from .nnkit import ModelConfig, ModelState, NumericGuardError, adam_step, forward, loss_and_grads, lr_schedule
from .nnkit.losses import cross_entropy
from .pruning import EarlyStop, PruneState, early_stop_update, prune_batch, scores_from_logits, write_prune_log
from .smoothreg import PerturbSpec, add_white_noise, draw_noisy_batch

log = logging.getLogger(__name__)

EVAL_BATCH = 32


class TrainingAborted(RuntimeError):
    def __init__(self, message, epoch, batch):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class FeatureStore:
    """Normalized spectrograms per segment, computed once and kept in memory.

    Noisy companions go through the same featurization but are never stored.
    """

    def __init__(self, cfg: TrainConfig):
        self.fc = cfg.features
        self._cache: dict = {}

    def _spec(self, samples, sample_rate):
        f = self.fc
        raw = featurize(samples, f.kind, sample_rate=sample_rate, n_mels=f.n_mels,
                        frame_len_s=f.frame_len_s, hop_len_s=f.hop_len_s,
                        cqt_fmin=f.cqt_fmin, cqt_bins_per_octave=f.cqt_bins_per_octave)
        return normalize(raw).values

    @staticmethod
    def _key(seg):
        # ids alone are not unique across corpora, so the samples are part of the key
        digest = hashlib.blake2b(np.ascontiguousarray(seg.samples).tobytes(), digest_size=16).hexdigest()
        return seg.segment_id, seg.clip.sample_rate, digest

    def get(self, seg) -> np.ndarray:
        key = self._key(seg)
        if key not in self._cache:
            self._cache[key] = self._spec(seg.samples, seg.clip.sample_rate)
        return self._cache[key]

    def put(self, seg, values) -> None:
        self._cache[self._key(seg)] = np.asarray(values, dtype=np.float64)

    def batch(self, segs) -> np.ndarray:
        return np.stack([self.get(s) for s in segs])

    def of_waveform(self, samples, sample_rate) -> np.ndarray:
        return self._spec(samples, sample_rate)


@dataclass
class RunArtifacts:
    curve: list = field(default_factory=list)
    accuracy: float = float("nan")
    confusion: np.ndarray | None = None
    prune_events: list = field(default_factory=list)
    sample_passes: int = 0
    wall_time: float = 0.0
    epochs_run: int = 0
    best_epoch: int = 0
    stopped_early: bool = False
    train_ids: list = field(default_factory=list)
    dup_groups: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    model: ModelState | None = None
    comparisons: list = field(default_factory=list)
    score_trace: list = field(default_factory=list)

    @property
    def test_loss(self) -> list:
        return [row["test_loss"] for row in self.curve]

    def pruned_ids(self) -> set:
        return {e.pruned_id for e in self.prune_events}

    def write(self, out_dir, checkpoint=True) -> Path:
        """Write deterministic run files; wall time goes to ``timing.json`` only."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_loss_curve(out / "loss_curve.tsv", self.curve)
        write_prune_log(out / "prune_log.tsv", self.prune_events, self.dup_groups)
        write_confusion(out / "confusion.tsv", self.confusion)
        summary = {
            "accuracy": self.accuracy,
            "sample_passes": self.sample_passes,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "n_pruned": len(self.prune_events),
            "test_count": int(self.confusion.sum()) if self.confusion is not None else 0,
            "metadata": self.metadata,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (out / "timing.json").write_text(json.dumps({"wall_time_s": self.wall_time}) + "\n")
        if checkpoint and self.model is not None:
            nnkit.save_checkpoint(out / "best.ckpt", self.model)
        return out


CURVE_FIELDS = ("epoch", "train_loss", "val_loss", "test_loss", "lr", "active_set_size")


def write_loss_curve(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in CURVE_FIELDS[1:5]] + [r["active_set_size"]])


def read_loss_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in CURVE_FIELDS[1:5]},
             "active_set_size": int(r["active_set_size"])} for r in rows]


def write_confusion(path, matrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if matrix is None:
            return
        w.writerow(["true\\pred"] + [str(j) for j in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([str(i)] + [str(int(v)) for v in row])


def read_confusion(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)


def model_config_for(cfg: TrainConfig, n_classes: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(n_classes=n_classes, channels=tuple(m.channels), time_kernel=m.time_kernel,
                       freq_kernel=m.freq_kernel, n_heads=m.n_heads, embed_dim=m.embed_dim,
                       prune_dim=m.prune_dim, prune_input=m.prune_input)


def predict_logits(model: ModelState, X: np.ndarray) -> np.ndarray:
    out = [forward(model, X[i:i + EVAL_BATCH]).z.data for i in range(0, len(X), EVAL_BATCH)]
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def mean_ce(model: ModelState, X, y) -> float:
    if len(X) == 0:
        return float("nan")
    z = predict_logits(model, X)
    return float(cross_entropy(z, np.asarray(y)).data)


def confusion_from_logits(z, y, n_classes):
    """Argmax predictions (ties go to the lowest class index) tallied into a matrix."""
    pred = np.argmax(np.asarray(z), axis=1)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y), pred), 1)
    acc = float(np.trace(cm) / cm.sum()) if cm.sum() else float("nan")
    return acc, cm


def evaluate(model: ModelState, X, y):
    """Segment-level accuracy and confusion matrix (rows true, columns predicted)."""
    return confusion_from_logits(predict_logits(model, np.asarray(X)), y, model.config.n_classes)


def _labels(segs):
    return np.array([s.label for s in segs], dtype=np.int64)


def perturbed_test_inputs(cfg: TrainConfig, store: FeatureStore, segs) -> np.ndarray:
    """Test inputs, optionally perturbed once at ``cfg.test_snr_db`` with a fixed stream."""
    if cfg.test_snr_db is None:
        return store.batch(segs)
    out = []
    for i, s in enumerate(segs):
        rng = np.random.default_rng([int(cfg.test_noise_seed), i])
        wave = add_white_noise(s.samples, float(cfg.test_snr_db), rng)
        out.append(store.of_waveform(wave, s.clip.sample_rate))
    return np.stack(out)


def train(cfg: TrainConfig, split, store: FeatureStore | None = None, n_classes: int | None = None,
          trace_scores: bool = False, record_comparisons: bool = False) -> RunArtifacts:
    """Train one model under ``cfg`` on ``split`` and return its artifacts.

    Per batch: forward the raw inputs (plus noisy companions in the
    augmentation and regularization modes), assemble the objective,
    backpropagate and take one Adam step at the scheduled rate. When
    pruning is on and the warmup has passed, the batch's pre-update pruning
    scores are compared afterwards. Each epoch ends with validation and
    test losses and an early-stopping check.
    """
    t0 = time.perf_counter()
    store = store or FeatureStore(cfg)
    train_segs = list(split.train)
    if not train_segs:
        raise ValueError("training split is empty")
    if n_classes is None:
        n_classes = 1 + max(s.label for s in (*split.train, *split.val, *split.test))
    ids = [s.segment_id for s in train_segs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate segment ids in the training split")
    by_id = {s.segment_id: s for s in train_segs}
    key_of = {sid: i for i, sid in enumerate(ids)}

    X_val, y_val = store.batch(split.val) if split.val else np.zeros((0,)), _labels(split.val)
    X_test, y_test = perturbed_test_inputs(cfg, store, split.test) if split.test else np.zeros((0,)), _labels(split.test)

    rng_data = np.random.default_rng(cfg.stream_seed("data"))
    model = ModelState.create(model_config_for(cfg, n_classes), cfg.stream_seed("init"))
    prune_state = PruneState.start(ids, cfg.tau, cfg.epsilon, cfg.stream_seed("prune"),
                                   measure=cfg.prune_measure, record_comparisons=record_comparisons)
    perturb = PerturbSpec(tuple(cfg.snr_db_range), redraw=cfg.noise_redraw, per_sample=cfg.per_sample_snr)
    noise_seed = cfg.stream_seed("noise")
    es = EarlyStop(patience=cfg.patience)
    art = RunArtifacts(train_ids=ids, dup_groups={s.segment_id: s.dup_group for s in train_segs
                                                  if s.dup_group is not None})
    art.metadata = {
        "config_digest": cfg.digest(),
        "mode": cfg.mode,
        "prune": cfg.prune,
        "alpha": cfg.alpha,
        "epsilon": cfg.epsilon,
        "tau": cfg.tau,
        "prune_measure": cfg.prune_measure,
        "prune_score_timing": "pre_update",
        "n_train": len(train_segs),
        "n_val": len(split.val),
        "n_test": len(split.test),
    }
    best = model.copy()
    alpha = cfg.alpha if cfg.mode == "smooth_reg" else 0.0

    for epoch in range(1, cfg.max_epoch + 1):
        active = [sid for sid in ids if sid in prune_state.active_ids]
        order = [active[i] for i in rng_data.permutation(len(active))]
        n_batches = -(-len(order) // cfg.batch_size)
        losses, weights = [], []
        for b in range(n_batches):
            bids = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            segs = [by_id[sid] for sid in bids]
            X = store.batch(segs)
            y = _labels(segs)
            noisy = None
            if cfg.mode in ("smooth_reg", "manual_aug"):
                comp = draw_noisy_batch(segs, perturb, epoch, noise_seed, keys=[key_of[sid] for sid in bids])
                noisy = np.stack([store.of_waveform(c.waveform, s.clip.sample_rate) for c, s in zip(comp, segs)])
            try:
                if cfg.mode == "manual_aug":
                    loss, grads, bundle = loss_and_grads(model, np.concatenate([X, noisy]), np.concatenate([y, y]))
                else:
                    loss, grads, bundle = loss_and_grads(model, X, y, alpha, noisy)
                lr = lr_schedule(epoch - 1 + (b + 1) / n_batches, cfg.lr, cfg.warmup, cfg.max_epoch)
                adam_step(model, grads, lr)
            except NumericGuardError as exc:
                raise TrainingAborted(str(exc), epoch, b) from exc
            art.sample_passes += len(bids)
            losses.append(loss)
            weights.append(len(bids))
            s_raw = bundle.s_raw.data[: len(bids)]
            if trace_scores:
                art.score_trace.append((epoch, list(bids), s_raw.copy()))
            if cfg.prune and epoch > cfg.tau:
                prune_batch(prune_state, scores_from_logits(s_raw, bids), epoch)

        val_loss = mean_ce(model, X_val, y_val)
        test_loss = mean_ce(model, X_test, y_test)
        art.curve.append({
            "epoch": epoch,
            "train_loss": float(np.average(losses, weights=weights)),
            "val_loss": val_loss,
            "test_loss": test_loss,
            "lr": lr_schedule(epoch, cfg.lr, cfg.warmup, cfg.max_epoch),
            "active_set_size": len(prune_state.active_ids),
        })
        art.epochs_run = epoch
        improved = np.isfinite(val_loss) and val_loss < es.best_val_loss
        decision = early_stop_update(es, val_loss) if len(X_val) else "continue"
        if improved or not len(X_val):
            best = model.copy()
            art.best_epoch = epoch
        if decision == "stop":
            art.stopped_early = True
            break

    art.model = best
    art.prune_events = list(prune_state.events)
    art.comparisons = prune_state.comparisons
    if len(split.test):
        art.accuracy, art.confusion = evaluate(best, X_test, y_test)
    else:
        art.confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    art.wall_time = time.perf_counter() - t0
    return art


# ---------------------------------------------------------------- experiment matrix

@dataclass
class MatrixResult:
    cells: dict  # (mode, prune, seed) -> RunArtifacts or exception
    rows: list

    def failed(self):
        return {k: v for k, v in self.cells.items() if isinstance(v, BaseException)}


def run_matrix(base: TrainConfig, split, modes=("baseline", "manual_aug", "smooth_reg"),
               prunes=(False, True), seeds=(0,), store: FeatureStore | None = None,
               n_classes: int | None = None) -> MatrixResult:
    """Train every (mode, prune, seed) cell on one shared split and feature cache.

    A failing cell is recorded as its exception and does not stop the others.
    """
    store = store or FeatureStore(base)
    cells = {}
    for mode in modes:
        for prune in prunes:
            for seed in seeds:
                cfg = base.replace(mode=mode, prune=prune, seed=seed)
                try:
                    cells[(mode, prune, seed)] = train(cfg, split, store, n_classes)
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    log.error("cell %s/%s/%s failed: %s", mode, prune, seed, exc)
                    cells[(mode, prune, seed)] = exc
    return MatrixResult(cells=cells, rows=summarize(cells, modes, prunes, seeds))


def pass_reduction(passes_prune: float, passes_full: float) -> float:
    """Percentage of sample passes saved by pruning, ``1 - prune/full``."""
    return 100.0 * (1.0 - passes_prune / passes_full)


def summarize(cells, modes, prunes, seeds) -> list[dict]:
    rows = []
    for mode in modes:
        for prune in prunes:
            runs = [cells.get((mode, prune, s)) for s in seeds]
            ok = [r for r in runs if isinstance(r, RunArtifacts)]
            accs = np.array([r.accuracy for r in ok])
            passes = float(np.mean([r.sample_passes for r in ok])) if ok else float("nan")
            row = {
                "mode": mode,
                "prune": prune,
                "n_runs": len(ok),
                "n_failed": len(runs) - len(ok),
                "acc_mean": float(accs.mean()) if ok else float("nan"),
                "acc_std": float(accs.std()) if ok else float("nan"),
                "sample_passes": passes,
                "wall_time_s": float(np.mean([r.wall_time for r in ok])) if ok else float("nan"),
                "reduction_pct": None,
            }
            rows.append(row)
    for row in rows:
        if row["prune"]:
            twin = next((r for r in rows if r["mode"] == row["mode"] and not r["prune"]), None)
            if twin and twin["sample_passes"] and np.isfinite(twin["sample_passes"]):
                row["reduction_pct"] = pass_reduction(row["sample_passes"], twin["sample_passes"])
    return rows
