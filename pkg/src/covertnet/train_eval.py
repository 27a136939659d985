"""Stratified splits, full-batch training, classification metrics and model comparison."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .models import GraphInputs, ModelConfig, forward, init_params
from .numcore import AdamState, Tape, adam_step, clip_global_norm, grad, ops

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")

# Published figures from a private labeled corpus. Kept for side-by-side
# display only; nothing here is reproduced or asserted.
REPORTED_REFERENCE = {
    "reproducible": False,
    "note": "reported on a private labeled corpus; reference annotation only",
    "comparison_percent": {
        "gcn": {"accuracy": 78.2, "precision": 75.4, "recall": 68.7, "f1": 71.9},
        "gat": {"accuracy": 80.5, "precision": 78.1, "recall": 70.9, "f1": 74.2},
        "st-gcn": {"accuracy": 83.7, "precision": 81.3, "recall": 76.8, "f1": 79.0},
        "dcrnn": {"accuracy": 84.9, "precision": 82.5, "recall": 78.1, "f1": 80.2},
        "stgnn": {"accuracy": 88.3, "precision": 85.9, "recall": 83.7, "f1": 84.8},
    },
    "accuracy_after_200_epochs_percent": {"gcn": 70.83, "gat": 95.75},
}


class TrainingError(RuntimeError):
    pass


# -- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class SplitMask:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("split parts overlap")

    def assignment(self, n: int) -> list[str]:
        out = [""] * n
        for name in ("train", "val", "test"):
            for i in getattr(self, name):
                out[i] = name
        return out

    def save(self, path: str | Path, n: int) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "split"])
            for i, part in enumerate(self.assignment(n)):
                w.writerow([i, part])

    @classmethod
    def load(cls, path: str | Path) -> "SplitMask":
        parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["split"]:
                    parts[row["split"]].append(int(row["node_id"]))
        return cls(*(np.array(parts[k], dtype=np.int64) for k in ("train", "val", "test")))


def _allocate(total: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of total * fractions."""
    raw = [total * f for f in fractions]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split(y: np.ndarray, fractions: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> SplitMask:
    """Stratified train/val/test split of the labeled nodes (y >= 0)."""
    y = np.asarray(y)
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    classes = sorted(set(y[y >= 0].tolist()))
    if len(classes) < 2:
        raise ValueError("need labeled nodes of at least two classes")
    members = {c: np.flatnonzero(y == c) for c in classes}
    for c, idx in members.items():
        if len(idx) < 2:
            raise ValueError(f"class {c} has fewer than 2 labeled nodes")

    totals = _allocate(sum(len(m) for m in members.values()), fractions)
    # per-class quotas whose column sums hit the overall totals
    quotas = {c: [math.floor(len(m) * f) for f in fractions] for c, m in members.items()}
    spare = {c: len(members[c]) - sum(q) for c, q in quotas.items()}
    need = [totals[s] - sum(quotas[c][s] for c in classes) for s in range(3)]
    remainders = sorted(
        ((len(members[c]) * fractions[s] - quotas[c][s], s, c) for c in classes for s in range(3)),
        key=lambda r: (-r[0], r[1], r[2]),
    )
    for _, s, c in remainders:
        if need[s] > 0 and spare[c] > 0:
            quotas[c][s] += 1
            need[s] -= 1
            spare[c] -= 1
    for c in classes:  # leftovers when remainders could not balance both margins
        while spare[c] > 0:
            s = max(range(3), key=lambda j: (need[j], -j))
            quotas[c][s] += 1
            need[s] -= 1
            spare[c] -= 1

    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in classes:
        idx = rng.permutation(members[c])
        a, b = quotas[c][0], quotas[c][0] + quotas[c][1]
        parts[0].append(idx[:a])
        parts[1].append(idx[a:b])
        parts[2].append(idx[b:])
    return SplitMask(*(np.sort(np.concatenate(p)).astype(np.int64) for p in parts))


# -- metrics -----------------------------------------------------------------


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def metrics(predicted: np.ndarray, true: np.ndarray, mask: np.ndarray | None = None) -> dict:
    """Confusion counts and accuracy/precision/recall/F1 with positive class 1."""
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if mask is not None:
        mask = np.asarray(mask)
        predicted, true = predicted[mask], true[mask]
    tp = int(np.sum((predicted == 1) & (true == 1)))
    fp = int(np.sum((predicted == 1) & (true == 0)))
    fn = int(np.sum((predicted == 0) & (true == 1)))
    tn = int(np.sum((predicted == 0) & (true == 0)))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return {
        "accuracy": _ratio(tp + tn, tp + fp + fn + tn),
        "precision": precision,
        "recall": recall,
        "f1": _ratio(2 * precision * recall, precision + recall),
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "tn": tn,
    }


@dataclass
class EvalReport:
    model: str
    seed: int
    epochs: int
    config_digest: str
    accuracy: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    best_epoch: int = -1
    wall_clock_seconds: float | None = 0.0  # None when withheld for byte-identical output
    status: str = "ok"
    error: str = ""

    def metric_fields(self) -> dict:
        return {k: getattr(self, k) for k in (*METRIC_NAMES, "tp", "fp", "fn", "tn")}

    def to_dict(self) -> dict:
        return asdict(self)


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: dict[str, list[float]]
    best_epoch: int
    best_val_f1: float


def class_weights(y_train: np.ndarray, n_classes: int = 2) -> np.ndarray:
    """Weights proportional to inverse class frequency, n / (classes * n_c)."""
    counts = np.bincount(y_train, minlength=n_classes).astype(float)
    return np.where(counts > 0, len(y_train) / (n_classes * np.maximum(counts, 1.0)), 0.0)


def sample_weights(y: np.ndarray, train: np.ndarray, n_classes: int = 2) -> np.ndarray:
    w = np.zeros(len(y))
    cw = class_weights(y[train], n_classes)
    w[train] = cw[y[train]]
    return w


def _f1(logits: np.ndarray, y: np.ndarray, idx: np.ndarray) -> float:
    return metrics(np.argmax(logits[idx], axis=1), y[idx])["f1"]


def train(
    config: ModelConfig,
    inputs: GraphInputs,
    y: np.ndarray,
    split_mask: SplitMask,
    epochs: int = 200,
    lr: float = 0.01,
    clip_norm: float | None = 5.0,
    params: dict[str, np.ndarray] | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Full-batch Adam on class-weighted cross-entropy over the training nodes.

    Validation F1 is measured on the parameters entering each epoch (and on
    the final parameters); the best-scoring parameters are returned, the
    earliest on ties.
    """
    y = np.asarray(y, dtype=np.int64)
    train_idx = split_mask.train
    if not len(train_idx):
        raise TrainingError("empty training set")
    targets = np.full(len(y), -1, dtype=np.int64)
    targets[train_idx] = y[train_idx]
    weights = sample_weights(y, train_idx, config.n_classes)
    params = init_params(config) if params is None else {k: v.copy() for k, v in params.items()}
    state = AdamState(lr=lr)
    rng = np.random.default_rng([config.seed, 1])
    val_idx = split_mask.val
    history: dict[str, list[float]] = {"loss": [], "val_f1": [], "grad_norm": []}
    best_f1, best_params, best_epoch = -1.0, params, 0

    for epoch in range(epochs):
        tape = Tape()
        pvars = {k: tape.leaf(v, k) for k, v in params.items()}
        logits = forward(config, pvars, inputs, training=True, rng=rng)
        loss = ops.weighted_cross_entropy(logits, targets, weights)
        loss_value = float(loss.value)
        if not math.isfinite(loss_value):
            raise TrainingError(
                f"{config.kind}: loss became {loss_value} at epoch {epoch}; "
                f"try a smaller learning rate than {lr} or tighter gradient clipping")
        eval_logits = logits.value if config.dropout == 0 else np.asarray(forward(config, params, inputs))
        val_f1 = _f1(eval_logits, y, val_idx) if len(val_idx) else float("nan")
        if len(val_idx) and val_f1 > best_f1:
            best_f1, best_params, best_epoch = val_f1, params, epoch

        by_var = grad(tape, loss, pvars.values())
        grads = {k: by_var[v] for k, v in pvars.items()}
        grads, norm = clip_global_norm(grads, clip_norm)
        params, state = adam_step(params, grads, state)
        history["loss"].append(loss_value)
        history["val_f1"].append(val_f1)
        history["grad_norm"].append(norm)
        if log_every and (epoch % log_every == 0 or epoch == epochs - 1):
            logger.info("%s epoch=%d loss=%.6f val_f1=%.4f", config.kind, epoch, loss_value, val_f1)

    if len(val_idx):
        final_f1 = _f1(np.asarray(forward(config, params, inputs)), y, val_idx)
        if final_f1 > best_f1:
            best_f1, best_params, best_epoch = final_f1, params, epochs
    else:
        best_params, best_epoch = params, epochs
    return TrainResult(best_params, history, best_epoch, best_f1)


def evaluate(config: ModelConfig, params: dict, inputs: GraphInputs, y: np.ndarray, idx: np.ndarray) -> dict:
    logits = np.asarray(forward(config, params, inputs))
    return metrics(np.argmax(logits[idx], axis=1), np.asarray(y)[idx])


def run_model(
    config: ModelConfig,
    inputs: GraphInputs,
    y: np.ndarray,
    split_mask: SplitMask,
    epochs: int = 200,
    lr: float = 0.01,
    clip_norm: float | None = 5.0,
) -> tuple[EvalReport, TrainResult]:
    """Train and score on the test nodes."""
    start = time.perf_counter()
    result = train(config, inputs, y, split_mask, epochs=epochs, lr=lr, clip_norm=clip_norm)
    scores = evaluate(config, result.params, inputs, y, split_mask.test)
    report = EvalReport(model=config.kind, seed=config.seed, epochs=epochs, config_digest=config.digest(),
                        best_epoch=result.best_epoch, wall_clock_seconds=time.perf_counter() - start, **scores)
    return report, result


# -- suites ------------------------------------------------------------------


@dataclass
class SuiteResult:
    runs: list[EvalReport]
    summary: dict[str, dict[str, dict[str, float]]]
    reference: dict = field(default_factory=lambda: REPORTED_REFERENCE)

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "runs.jsonl", "w", encoding="utf-8") as fh:
            for run in self.runs:
                fh.write(json.dumps(run.to_dict(), sort_keys=True) + "\n")
        with open(directory / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "runs", "failed"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")])
            for model, row in self.summary.items():
                w.writerow([model, row["runs"]["count"], row["runs"]["failed"]]
                           + [f"{row[m][s]:.6f}" for m in METRIC_NAMES for s in ("mean", "std")])
        (directory / "reference.json").write_text(json.dumps(self.reference, indent=2) + "\n")


def summarize(runs: Sequence[EvalReport]) -> dict:
    out: dict[str, dict] = {}
    for model in dict.fromkeys(r.model for r in runs):
        ok = [r for r in runs if r.model == model and r.status == "ok"]
        failed = sum(1 for r in runs if r.model == model and r.status != "ok")
        row = {"runs": {"count": len(ok), "failed": failed}}
        for m in METRIC_NAMES:
            vals = np.array([getattr(r, m) for r in ok], dtype=float)
            row[m] = {"mean": float(vals.mean()) if len(vals) else float("nan"),
                      "std": float(vals.std()) if len(vals) else float("nan")}
        out[model] = row
    return out


def _suite_cell(base: ModelConfig, kind: str, seed: int, inputs, y, split_mask, epochs, lr, clip_norm):
    config = replace(base, kind=kind, seed=seed)
    try:
        report, _ = run_model(config, inputs, y, split_mask, epochs, lr, clip_norm)
    except Exception as exc:  # a failed cell must not abort the suite
        logger.error("run %s seed=%d failed: %s", kind, seed, exc)
        report = EvalReport(model=kind, seed=seed, epochs=epochs, config_digest=config.digest(),
                            status="failed", error=f"{type(exc).__name__}: {exc}")
    return report


def evaluate_suite(
    inputs: GraphInputs,
    y: np.ndarray,
    split_mask: SplitMask,
    kinds: Iterable[str] = ("gcn", "gat", "stgnn"),
    seeds: Iterable[int] = (1, 2, 3),
    base: ModelConfig | None = None,
    epochs: int = 200,
    lr: float = 0.01,
    clip_norm: float | None = 5.0,
    n_jobs: int = 1,
) -> SuiteResult:
    """Train every (model kind, seed) pair and tabulate test metrics.

    With ``n_jobs > 1`` runs execute in parallel processes; results are
    merged in (kind, seed) order either way.
    """
    base = base or ModelConfig(in_features=inputs.features.shape[2])
    cells = [(k, s) for k in kinds for s in seeds]
    if n_jobs == 1:
        runs = [_suite_cell(base, k, s, inputs, y, split_mask, epochs, lr, clip_norm) for k, s in cells]
    else:
        from joblib import Parallel, delayed

        runs = Parallel(n_jobs=n_jobs)(
            delayed(_suite_cell)(base, k, s, inputs, y, split_mask, epochs, lr, clip_norm) for k, s in cells)
    return SuiteResult(list(runs), summarize(runs))


def format_table(result: SuiteResult) -> str:
    lines = ["| model | runs | accuracy | precision | recall | f1 |", "|---|---|---|---|---|---|"]
    for model, row in result.summary.items():
        cells = [f"{row[m]['mean']:.3f} ± {row[m]['std']:.3f}" for m in METRIC_NAMES]
        lines.append(f"| {model} | {row['runs']['count']} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("Reference figures (not reproducible, private labeled corpus):")
    for model, vals in REPORTED_REFERENCE["comparison_percent"].items():
        lines.append(f"  {model}: " + ", ".join(f"{m} {vals[m]:.1f}%" for m in METRIC_NAMES))
    acc = REPORTED_REFERENCE["accuracy_after_200_epochs_percent"]
    lines.append("  accuracy after 200 epochs: " + ", ".join(f"{k} {v:.2f}%" for k, v in acc.items()))
    return "\n".join(lines)
