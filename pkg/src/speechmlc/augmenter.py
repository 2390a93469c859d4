"""Feature-space kNN voice conversion and deficit-driven augmentation planning.

Each source frame is replaced by the mean of its k nearest frames (cosine
distance) in a capped pool of target-speaker frames, so the converted
sequence keeps the source timing while taking on the target speaker's
frame statistics. Converted entries inherit the target speaker's labels.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import ManifestEntry, label_counts
from .errors import ConfigurationError, EmptyInputError, PlanningError
from .features import FeatureSequence, save_feature_file
from .labels import LABELS, N_LABELS

POOL_CAP_S = 60.0
DEFAULT_K = 4
DEFAULT_BUDGET_HOURS = 14.0
ITEM_SECONDS = 5.0


@dataclass
class FramePool:
    frames: np.ndarray
    speaker_id: str = ""
    duration_s: float = 0.0
    frame_hop_s: float = 0.01
    provenance: list[tuple[int, int]] = field(default_factory=list)  # (sequence index, frames taken)

    @property
    def size(self) -> int:
        return self.frames.shape[0]


def build_pool(features: Sequence[FeatureSequence], cap_s: float = POOL_CAP_S, speaker_id: str = "") -> FramePool:
    """Concatenate frames in input order until ``cap_s`` seconds are covered."""
    features = [f for f in features if f.n_frames > 0]
    if not features:
        raise EmptyInputError(f"no frames available for speaker {speaker_id!r}")
    hop = features[0].frame_hop_s
    cap_frames = int(math.floor(cap_s / hop + 1e-9))
    if cap_frames < 1:
        raise ValueError(f"cap of {cap_s}s covers no {hop}s frames")
    taken, provenance = [], []
    remaining = cap_frames
    for i, f in enumerate(features):
        if remaining == 0:
            break
        if f.dim != features[0].dim:
            raise ConfigurationError("pool sequences differ in feature dimension")
        n = min(remaining, f.n_frames)
        taken.append(f.frames[:n])
        provenance.append((i, n))
        remaining -= n
    frames = np.concatenate(taken, axis=0)
    return FramePool(frames, speaker_id, frames.shape[0] * hop, hop, provenance)


def cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1 - cosine similarity; zero vectors have similarity 0 to everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    a_unit = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    b_unit = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return 1.0 - a_unit @ b_unit.T


def nearest_indices(source: np.ndarray, pool: np.ndarray, k: int) -> np.ndarray:
    """(T, k) pool indices of the k nearest frames, ties broken by lower index."""
    # distances are taken over distinct rows so duplicated frames tie exactly;
    # a blocked matmul can otherwise round copies of one row differently
    unique, inverse = np.unique(np.asarray(pool), axis=0, return_inverse=True)
    dist = cosine_distances(source, unique)[:, inverse.reshape(-1)]
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def knn_convert(source: FeatureSequence, pool: FramePool, k: int = DEFAULT_K) -> FeatureSequence:
    if k < 1 or k > pool.size:
        raise ValueError(f"k={k} must lie in [1, {pool.size}] for this pool")
    if source.dim != pool.frames.shape[1]:
        raise ConfigurationError(f"source dimension {source.dim} != pool dimension {pool.frames.shape[1]}")
    idx = nearest_indices(source.frames, pool.frames, k)
    converted = pool.frames[idx].astype(np.float64).mean(axis=1)
    return FeatureSequence(converted.astype(np.float32), source.frame_hop_s, source.feature_kind)


# -- planning ----------------------------------------------------------------------


@dataclass(frozen=True)
class PlanItem:
    source_id: str
    target_speaker: str
    output_id: str
    label: int  # the deficient label this item was planned for


@dataclass
class AugmentationPlan:
    items: list[PlanItem]
    target_counts: dict[int, int]
    budget_hours: float
    item_seconds: float = ITEM_SECONDS
    start_counts: list[int] = field(default_factory=list)
    planned_counts: list[int] = field(default_factory=list)

    @property
    def planned_hours(self) -> float:
        return len(self.items) * self.item_seconds / 3600.0

    def summary(self) -> str:
        lines = [f"{len(self.items)} conversions, {self.planned_hours:.3f} h of {self.budget_hours:g} h budget"]
        for k, target in sorted(self.target_counts.items()):
            lines.append(f"  {LABELS[k]:<9} {self.start_counts[k]:>6} -> {self.planned_counts[k]:>6} (target {target})")
        return "\n".join(lines)


def speaker_labels(entries: Sequence[ManifestEntry]) -> dict[str, ManifestEntry]:
    """First entry of each speaker; its label vector stands for the speaker."""
    out: dict[str, ManifestEntry] = {}
    for e in entries:
        out.setdefault(e.speaker_id, e)
    return out


def balanced_targets(entries: Sequence[ManifestEntry]) -> dict[int, int]:
    """Target each label at the count of the larger label on its axis."""
    counts = label_counts(entries)
    return {k: max(counts[k], counts[k ^ 1]) for k in range(N_LABELS)}


def plan_augmentation(entries: Sequence[ManifestEntry], target_counts: Mapping[int, int], budget_s: float,
                      seed: int, item_seconds: float = ITEM_SECONDS) -> AugmentationPlan:
    """Greedily pair sources with target speakers until deficient labels reach their targets.

    Only non-excluded training entries take part. Each item costs
    ``item_seconds`` of the budget and adds one sample to every label the
    target speaker carries. Deficient labels are filled in canonical order;
    among eligible speakers those that would overshoot an already filled
    label are avoided.
    """
    if budget_s <= 0:
        raise ValueError("budget_s must be positive")
    pool = [e for e in entries if e.split == "train" and not e.excluded]
    counts = label_counts(pool)
    start = list(counts)
    targets = {int(k): int(v) for k, v in target_counts.items()}
    max_items = int(math.floor(budget_s / item_seconds + 1e-9))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA0]))
    speakers = speaker_labels(pool)
    speaker_ids = sorted(speakers)
    deficient = [k for k in sorted(targets) if counts[k] < targets[k]]
    items: list[PlanItem] = []
    used_outputs: set[str] = set()

    for k in deficient:
        eligible = [s for s in speaker_ids if speakers[s].label.labels[k]]
        if not eligible:
            raise PlanningError(f"no target speakers carry label {LABELS[k]}")
        eligible = [eligible[i] for i in rng.permutation(len(eligible))]
        turn = 0
        while counts[k] < targets[k] and len(items) < max_items:
            def overshoot(s):
                lv = speakers[s].label.labels
                return sum(1 for j in deficient if j != k and lv[j] and counts[j] >= targets[j])
            best = min(overshoot(s) for s in eligible)
            candidates = [s for s in eligible if overshoot(s) == best]
            target = candidates[turn % len(candidates)]
            turn += 1
            sources = [e for e in pool if e.speaker_id != target]
            if not sources:
                raise PlanningError(f"no source entries outside speaker {target!r}")
            src = sources[int(rng.integers(len(sources)))]
            n = len(items)
            output_id = f"aug{n:06d}-{LABELS[k].lower()}-{src.id}"
            while output_id in used_outputs:
                n += 1
                output_id = f"aug{n:06d}-{LABELS[k].lower()}-{src.id}"
            used_outputs.add(output_id)
            items.append(PlanItem(src.id, target, output_id, k))
            for j in range(N_LABELS):
                counts[j] += speakers[target].label.labels[j]
        if len(items) >= max_items:
            break
    return AugmentationPlan(items, targets, budget_s / 3600.0, item_seconds, start, counts)


@dataclass
class ExecutionResult:
    entries: list[ManifestEntry]
    skipped: list[tuple[str, str]]  # (output id, reason)

    def skip_report(self) -> str:
        return "".join(f"{oid}\t{reason}\n" for oid, reason in self.skipped)


def execute_plan(plan: AugmentationPlan, entries: Sequence[ManifestEntry],
                 load: Callable[[ManifestEntry], FeatureSequence], k: int, out_dir,
                 cap_s: float = POOL_CAP_S, relative_to=None) -> ExecutionResult:
    """Convert each planned source toward its target speaker and write feature files.

    ``load`` maps an entry to its features. Emitted entries are marked
    augmented and copy the target speaker's label vector. Sources are written
    relative to ``relative_to`` when given. Failed items are skipped and reported.
    """
    out_dir = Path(out_dir)
    by_id = {e.id: e for e in entries}
    train = [e for e in entries if e.split == "train" and not e.excluded]
    speakers = speaker_labels(train)
    pools: dict[str, FramePool] = {}
    result = ExecutionResult([], [])
    if plan.items:
        out_dir.mkdir(parents=True, exist_ok=True)
    for item in plan.items:
        try:
            if item.target_speaker not in pools:
                members = [e for e in train if e.speaker_id == item.target_speaker]
                pools[item.target_speaker] = build_pool([load(e) for e in members], cap_s, item.target_speaker)
            converted = knn_convert(load(by_id[item.source_id]), pools[item.target_speaker], k)
            path = out_dir / f"{item.output_id}.smlcf"
            save_feature_file(path, converted)
        except (OSError, KeyError, ValueError, RuntimeError) as exc:
            result.skipped.append((item.output_id, f"{type(exc).__name__}: {exc}"))
            continue
        source = os.path.relpath(path, relative_to) if relative_to is not None else str(path)
        template = speakers[item.target_speaker]
        result.entries.append(ManifestEntry(item.output_id, source, template.label, item.target_speaker,
                                            "train", False, True))
    return result
