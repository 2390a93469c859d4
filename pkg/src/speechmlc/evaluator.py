"""F1, detection-probability and annotator-agreement metrics."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ManifestEntry, parse_manifest
from .errors import DataError, UndefinedRatioError
from .features import crop_or_pad
from .labels import LABELS
from .model import forward, load_checkpoint, predict
from .trainer import FeatureStore

DEFAULT_THRESHOLD = 0.5
DEFAULT_VOTE_SPLIT = 5


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def defined(self) -> bool:
        """True when the label occurs as a target or a prediction."""
        return self.tp + self.fp + self.fn > 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def binarize(probabilities, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(probabilities) >= threshold).astype(np.int64)


def confusion_counts(predictions, targets) -> list[ConfusionCounts]:
    """Per-label counts for (B, K) binary predictions and targets."""
    p = np.asarray(predictions, dtype=bool)
    t = np.asarray(targets, dtype=bool)
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    tp = (p & t).sum(axis=0)
    fp = (p & ~t).sum(axis=0)
    fn = (~p & t).sum(axis=0)
    tn = (~p & ~t).sum(axis=0)
    return [ConfusionCounts(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(tp, fp, fn, tn)]


def precision_recall(c: ConfusionCounts) -> tuple[float, float]:
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return precision, recall


def f1(c: ConfusionCounts) -> float:
    """Harmonic mean of precision and recall; 0 whenever a denominator vanishes."""
    precision, recall = precision_recall(c)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def macro_f1(scores: Sequence[float]) -> float:
    if len(scores) == 0:
        raise ValueError("macro_f1 needs at least one score")
    return float(sum(scores) / len(scores))


def detection_probability(probabilities, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Fraction of samples whose probability reaches the threshold."""
    p = np.asarray(probabilities).reshape(-1)
    if p.size == 0:
        raise UndefinedRatioError("detection probability of an empty set")
    return int((p >= threshold).sum()) / p.size


@dataclass
class StratumResult:
    counts: ConfusionCounts
    f1: float
    n: int


def stratified_f1(votes, targets, probabilities, threshold: float = DEFAULT_THRESHOLD,
                  vote_split: int = DEFAULT_VOTE_SPLIT):
    """Per-label F1 within low (votes < split) and high (votes >= split) agreement strata.

    Returns ``(low, high)``: lists indexed by label holding a StratumResult, or
    None where the stratum has no entries.
    """
    votes = np.asarray(votes)
    preds = binarize(probabilities, threshold)
    targets = np.asarray(targets)
    low: list[StratumResult | None] = []
    high: list[StratumResult | None] = []
    for k in range(targets.shape[1]):
        is_high = votes[:, k] >= vote_split
        for mask, out in ((~is_high, low), (is_high, high)):
            if not mask.any():
                out.append(None)
                continue
            (c,) = confusion_counts(preds[mask, k], targets[mask, k])
            out.append(StratumResult(c, f1(c), int(mask.sum())))
    return low, high


@dataclass
class MetricsReport:
    labels: list[str]
    n_samples: int
    threshold: float
    vote_split: int
    checkpoint_id: str = ""
    counts: list[ConfusionCounts] = field(default_factory=list)
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    macro_f1: float | None = None
    detection: dict[str, float] = field(default_factory=dict)
    strata: dict[str, list] = field(default_factory=dict)

    def to_dict(self) -> dict:
        per_label = []
        for i, name in enumerate(self.labels):
            if not self.counts:
                break
            block = {"label": name, **asdict(self.counts[i]),
                     "precision": self.precision[i], "recall": self.recall[i], "f1": self.f1[i]}
            per_label.append(block)
        strata = {}
        for name, results in self.strata.items():
            strata[name] = [
                {"label": self.labels[i], "present": r is not None,
                 **({"n": r.n, **asdict(r.counts), "f1": r.f1} if r is not None else {})}
                for i, r in enumerate(results)
            ]
        return {
            "config": {"threshold": self.threshold, "vote_split": self.vote_split,
                       "checkpoint_id": self.checkpoint_id, "n_samples": self.n_samples},
            "per_label": per_label,
            "macro_f1": self.macro_f1,
            "detection_probability": self.detection,
            "strata": strata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def build_report(targets, probabilities, votes, threshold: float = DEFAULT_THRESHOLD,
                 vote_split: int = DEFAULT_VOTE_SPLIT, labels: Sequence[str] = LABELS,
                 checkpoint_id: str = "") -> MetricsReport:
    """All metrics for (B, K) targets, probabilities and vote counts.

    The macro average runs over labels that occur as a target or a prediction.
    """
    targets = np.asarray(targets)
    probabilities = np.asarray(probabilities)
    preds = binarize(probabilities, threshold)
    counts = confusion_counts(preds, targets)
    pr = [precision_recall(c) for c in counts]
    scores = [f1(c) for c in counts]
    defined = [s for s, c in zip(scores, counts) if c.defined]
    low, high = stratified_f1(votes, targets, probabilities, threshold, vote_split)
    return MetricsReport(
        labels=list(labels), n_samples=len(targets), threshold=threshold, vote_split=vote_split,
        checkpoint_id=checkpoint_id, counts=counts,
        precision=[p for p, _ in pr], recall=[r for _, r in pr], f1=scores,
        macro_f1=macro_f1(defined) if defined else 0.0,
        detection={name: detection_probability(probabilities[:, k], threshold) for k, name in enumerate(labels)},
        strata={"low": low, "high": high},
    )


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def evaluation_entries(entries: Sequence[ManifestEntry]) -> list[ManifestEntry]:
    return [e for e in entries if e.split == "eval" and not e.excluded]


def infer(params, cfg, entries: Sequence[ManifestEntry], store: FeatureStore, batch_size: int = 64,
          workers: int = 1) -> np.ndarray:
    """Probabilities (B, K) using the first ``target_frames`` frames of each entry.

    Batch composition is fixed by manifest order, so results do not depend on ``workers``.
    """
    chunks = [entries[i:i + batch_size] for i in range(0, len(entries), batch_size)]

    def run(chunk):
        x = np.stack([crop_or_pad(store.get(e), cfg.target_frames).frames for e in chunk])
        logits, _ = forward(params, cfg, x)
        return predict(logits)

    if workers > 1 and len(chunks) > 1:
        store.preload(entries, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    return np.concatenate(outs, axis=0).astype(np.float64)


def evaluate(checkpoint, manifest, threshold: float = DEFAULT_THRESHOLD, report_path=None,
             vote_split: int = DEFAULT_VOTE_SPLIT, workers: int = 1, batch_size: int = 64,
             detect_only: Sequence[int] | None = None) -> MetricsReport:
    """Score the eval split of a manifest with a checkpoint and optionally write the JSON report.

    With ``detect_only`` the report carries only detection probabilities for those label indices.
    """
    params, cfg = load_checkpoint(checkpoint)
    manifest = Path(manifest)
    entries = evaluation_entries(parse_manifest(manifest))
    if not entries:
        raise DataError(f"{manifest}: eval split is empty")
    store = FeatureStore(manifest.parent)
    for e in entries:
        f = store.get(e)
        if f.dim != cfg.input_dim:
            raise DataError(f"entry {e.id!r}: feature dimension {f.dim}, model expects {cfg.input_dim}")
    probs = infer(params, cfg, entries, store, batch_size, workers)
    labels = list(LABELS[:cfg.n_labels])
    ckpt_id = checkpoint_id(checkpoint)
    if detect_only is not None:
        report = MetricsReport(labels=labels, n_samples=len(entries), threshold=threshold,
                               vote_split=vote_split, checkpoint_id=ckpt_id,
                               detection={labels[k]: detection_probability(probs[:, k], threshold)
                                          for k in detect_only})
    else:
        targets = np.array([e.label.labels for e in entries])
        votes = np.array([e.label.votes for e in entries])
        report = build_report(targets, probs, votes, threshold, vote_split, labels, ckpt_id)
    if report_path is not None:
        Path(report_path).write_text(report.to_json())
    return report
