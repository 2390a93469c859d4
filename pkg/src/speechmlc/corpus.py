"""Manifests, label processing rules, and the procedural style corpus."""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import UndefinedRatioError, ValidationError
from .features import SAMPLE_RATE, Waveform, save_wav
from .labels import LABELS, N_ANNOTATORS, N_LABELS, label_index

SPLITS = ("train", "eval")
_BASE_COLUMNS = 4 + 2 * N_LABELS + 1


@dataclass(frozen=True)
class LabelVector:
    labels: tuple[int, ...]
    votes: tuple[int, ...]
    n_annotators: int = N_ANNOTATORS

    def __post_init__(self):
        labels = tuple(int(x) for x in self.labels)
        votes = tuple(int(x) for x in self.votes)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "votes", votes)
        if len(labels) != N_LABELS or len(votes) != N_LABELS:
            raise ValidationError(f"label vectors need {N_LABELS} labels and votes")
        if any(x not in (0, 1) for x in labels):
            raise ValidationError(f"labels must be 0/1, got {labels}")
        if any(v < 0 or v > self.n_annotators for v in votes):
            raise ValidationError(f"votes must lie in [0, {self.n_annotators}], got {votes}")

    @classmethod
    def from_names(cls, names: Iterable[str], votes: int | None = None, n_annotators: int = N_ANNOTATORS):
        """Positive labels by name, each with ``votes`` (default: unanimous)."""
        votes = n_annotators if votes is None else votes
        bits = [0] * N_LABELS
        for name in names:
            bits[label_index(name)] = 1
        return cls(tuple(bits), tuple(votes * b for b in bits), n_annotators)

    def as_array(self) -> np.ndarray:
        return np.array(self.labels, dtype=np.float32)

    def positive_names(self) -> list[str]:
        return [LABELS[k] for k in range(N_LABELS) if self.labels[k]]


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    source: str
    label: LabelVector
    speaker_id: str = ""
    split: str = "train"
    excluded: bool = False
    augmented: bool = False

    def __post_init__(self):
        if not self.id:
            raise ValidationError("entry id must be nonempty")
        if not self.source:
            raise ValidationError(f"entry {self.id!r} has an empty source")
        if self.split not in SPLITS:
            raise ValidationError(f"entry {self.id!r}: split must be one of {SPLITS}, got {self.split!r}")


# -- manifest I/O --------------------------------------------------------------


def manifest_header() -> str:
    cols = ["id", "source", "split", "speaker_id", *LABELS, *(f"votes:{n}" for n in LABELS),
            "excluded", "augmented"]
    return "#" + "\t".join(cols)


def format_entry(e: ManifestEntry) -> str:
    fields = [e.id, e.source, e.split, e.speaker_id,
              *(str(b) for b in e.label.labels), *(str(v) for v in e.label.votes),
              str(int(e.excluded)), str(int(e.augmented))]
    for value in fields[:4]:
        if "\t" in value or "\n" in value:
            raise ValidationError(f"entry {e.id!r}: fields may not contain tabs or newlines")
    return "\t".join(fields)


def write_manifest(path, entries: Sequence[ManifestEntry]) -> Path:
    path = Path(path)
    lines = [manifest_header(), *(format_entry(e) for e in entries)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _parse_flag(text: str, lineno: int, name: str) -> bool:
    if text not in ("0", "1"):
        raise ValidationError(f"line {lineno}: {name} flag must be 0 or 1, got {text!r}")
    return text == "1"


def parse_manifest_lines(lines: Iterable[str]) -> list[ManifestEntry]:
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (_BASE_COLUMNS, _BASE_COLUMNS + 1):
            raise ValidationError(
                f"line {lineno}: expected {_BASE_COLUMNS} or {_BASE_COLUMNS + 1} tab-separated fields, got {len(parts)}")
        entry_id, source, split, speaker = parts[:4]
        try:
            bits = [int(x) for x in parts[4:4 + N_LABELS]]
            votes = [int(x) for x in parts[4 + N_LABELS:4 + 2 * N_LABELS]]
        except ValueError:
            raise ValidationError(f"line {lineno}: label bits and votes must be integers") from None
        excluded = _parse_flag(parts[4 + 2 * N_LABELS], lineno, "excluded")
        augmented = _parse_flag(parts[_BASE_COLUMNS], lineno, "augmented") if len(parts) > _BASE_COLUMNS else False
        if entry_id in seen:
            raise ValidationError(f"line {lineno}: duplicate id {entry_id!r} (first seen on line {seen[entry_id]})")
        seen[entry_id] = lineno
        try:
            entries.append(ManifestEntry(entry_id, source, LabelVector(tuple(bits), tuple(votes)),
                                         speaker, split, excluded, augmented))
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
    return entries


def parse_manifest(path) -> list[ManifestEntry]:
    with open(path, encoding="utf-8") as fh:
        return parse_manifest_lines(fh)


def resolve_source(entry: ManifestEntry, base_dir) -> Path:
    """Relative manifest sources are relative to the manifest's directory."""
    p = Path(entry.source)
    return p if p.is_absolute() else Path(base_dir) / p


# -- label processing ------------------------------------------------------------

RAW_CATEGORIES = ("female", "male", "ambiguous", "adult", "senior", "teenager",
                  "dark", "bright", "rough", "smooth")


@dataclass
class RawEntry:
    """An annotated record before label normalization.

    ``categories`` maps each assigned raw category to its vote count.
    """

    id: str
    source: str
    categories: Mapping[str, int]
    speaker_id: str = ""
    split: str = "train"
    n_annotators: int = N_ANNOTATORS
    negative_votes: Mapping[str, int] = field(default_factory=dict)


def normalize_labels(raw: RawEntry | ManifestEntry) -> ManifestEntry:
    """Map raw categories onto the 8 style labels.

    "senior" is folded into Adult (votes summed and capped, label OR-ed) and an
    "ambiguous" gender marks the entry excluded. A ManifestEntry is passed
    through its raw form, so normalization is idempotent.
    """
    if isinstance(raw, ManifestEntry):
        raw = raw_from_entry(raw)
    n = raw.n_annotators
    bits = [0] * N_LABELS
    votes = [0] * N_LABELS
    excluded = False
    for source, assigned in ((raw.negative_votes, False), (raw.categories, True)):
        for cat, count in source.items():
            key = cat.strip().lower()
            if key not in RAW_CATEGORIES:
                raise ValidationError(f"entry {raw.id!r}: unknown category {cat!r}")
            count = int(count)
            if count < 0 or count > n:
                raise ValidationError(f"entry {raw.id!r}: votes for {cat!r} outside [0, {n}]")
            if key == "ambiguous":
                excluded = excluded or assigned
                continue
            k = label_index("adult" if key == "senior" else key)
            votes[k] = min(n, votes[k] + count)
            if assigned:
                bits[k] = 1
    return ManifestEntry(raw.id, raw.source, LabelVector(tuple(bits), tuple(votes), n),
                         raw.speaker_id, raw.split, excluded)


def raw_from_entry(e: ManifestEntry) -> RawEntry:
    cats = {LABELS[k].lower(): e.label.votes[k] for k in range(N_LABELS) if e.label.labels[k]}
    neg = {LABELS[k].lower(): e.label.votes[k] for k in range(N_LABELS)
           if not e.label.labels[k] and e.label.votes[k]}
    if e.excluded:
        cats["ambiguous"] = 0
    return RawEntry(e.id, e.source, cats, e.speaker_id, e.split, e.label.n_annotators, neg)


def filter_by_agreement(entries: Sequence[ManifestEntry], min_votes: int) -> list[ManifestEntry]:
    """Keep entries whose every positive label has at least ``min_votes`` votes."""
    return [e for e in entries
            if all(v >= min_votes for b, v in zip(e.label.labels, e.label.votes) if b)]


def agreement_ratio(entries: Sequence[ManifestEntry], label: int, min_votes: int) -> float:
    """Among entries positive for ``label``, the fraction with at least ``min_votes`` votes on it."""
    positives = [e for e in entries if e.label.labels[label]]
    if not positives:
        raise UndefinedRatioError(f"no entries are positive for {LABELS[label]}")
    return sum(e.label.votes[label] >= min_votes for e in positives) / len(positives)


# -- synthetic corpus ------------------------------------------------------------

F0_BANDS = {"female": (200.0, 260.0), "male": (100.0, 140.0)}
AM_RATES = {"adult": 3.0, "teenager": 6.0}
TILTS_DB_PER_OCTAVE = {"dark": -9.0, "bright": -3.0}
JITTER = 0.02
NOISE_SNR_DB = 10.0
AM_DEPTH = 0.7
_AXIS_CHOICES = (("female", "male"), ("adult", "teenager"), ("dark", "bright"), ("rough", "smooth"))


@dataclass(frozen=True)
class StyleSpec:
    gender: str
    age: str
    tone: str
    texture: str

    def __post_init__(self):
        for value, choices in zip(self.choices(), _AXIS_CHOICES):
            if value not in choices:
                raise ValidationError(f"style value {value!r} not in {choices}")

    def choices(self) -> tuple[str, str, str, str]:
        return (self.gender, self.age, self.tone, self.texture)

    @property
    def name(self) -> str:
        return "-".join(self.choices())

    def label_vector(self, n_annotators: int = N_ANNOTATORS) -> LabelVector:
        return LabelVector.from_names(self.choices(), n_annotators, n_annotators)

    @classmethod
    def all(cls) -> list["StyleSpec"]:
        return [cls(*combo) for combo in itertools.product(*_AXIS_CHOICES)]


def _child_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def synth_sample(spec: StyleSpec, duration_s: float, seed: int, speaker_seed: int | None = None,
                 sample_rate: int = SAMPLE_RATE) -> tuple[Waveform, LabelVector]:
    """Render a harmonic voice whose measurable properties encode ``spec``.

    Speaker-level traits (f0, level) come from ``speaker_seed`` (default:
    ``seed``); per-utterance detail (harmonic phases, jitter, noise) from ``seed``.
    """
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    speaker_seed = seed if speaker_seed is None else speaker_seed
    spk_rng = np.random.default_rng(_child_seed(speaker_seed, 1))
    rng = np.random.default_rng(_child_seed(seed, 2))
    lo, hi = F0_BANDS[spec.gender]
    f0 = spk_rng.uniform(lo, hi)
    level = 0.1 * spk_rng.uniform(0.8, 1.25)

    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    if spec.texture == "rough":
        n_periods = int(math.ceil(duration_s * f0 * 1.2)) + 2
        dev = np.clip(1.0 + JITTER * rng.standard_normal(n_periods), 0.9, 1.1)
        bounds = np.cumsum(1.0 / (f0 * dev))
        f_inst = f0 * dev[np.searchsorted(bounds, t, side="right")]
    else:
        f_inst = np.full(n, f0)
    phase = 2.0 * np.pi * np.cumsum(f_inst) / sample_rate

    n_harm = max(1, int((0.475 * sample_rate) // (f0 * 1.1)))
    h = np.arange(1, n_harm + 1)
    amps = h ** (TILTS_DB_PER_OCTAVE[spec.tone] / (20.0 * math.log10(2.0)))
    offsets = rng.uniform(0.0, 2.0 * np.pi, n_harm)
    voiced = np.zeros(n)
    for k in range(n_harm):
        voiced += amps[k] * np.sin(h[k] * phase + offsets[k])
    envelope = 1.0 - AM_DEPTH * 0.5 * (1.0 - np.cos(2.0 * np.pi * AM_RATES[spec.age] * t))
    voiced *= envelope
    voiced *= level / max(1e-12, float(np.sqrt(np.mean(voiced ** 2))))
    if spec.texture == "rough":
        noise_rms = level / math.sqrt(10.0 ** (NOISE_SNR_DB / 10.0))
        voiced = voiced + noise_rms * rng.standard_normal(n)
    peak = float(np.max(np.abs(voiced)))
    if peak > 0.99:
        voiced *= 0.99 / peak
    return Waveform(voiced, sample_rate), spec.label_vector()


def _render_job(job) -> None:
    spec, duration_s, seed, speaker_seed, path = job
    w, _ = synth_sample(spec, duration_s, seed, speaker_seed)
    save_wav(path, w)


def synth_corpus(n_per_combination: int, duration_s: float, seed: int, out_dir,
                 n_eval_per_combination: int = 0, imbalance: Mapping[str, float] | None = None,
                 utterances_per_speaker: int = 1, workers: int = 1) -> Path:
    """Write WAV files for all 16 style combinations plus ``manifest.tsv``.

    ``imbalance`` maps a label name to the fraction of ``n_per_combination``
    kept (training split only) for combinations positive for that label.
    Returns the manifest path. Sources are written relative to ``out_dir``.
    """
    if n_per_combination < 1:
        raise ValueError("n_per_combination must be at least 1")
    if utterances_per_speaker < 1:
        raise ValueError("utterances_per_speaker must be at least 1")
    fractions = {label_index(k): float(v) for k, v in (imbalance or {}).items()}
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    entries: list[ManifestEntry] = []
    jobs = []
    for split, split_code, per_combo in (("train", 0, n_per_combination), ("eval", 1, n_eval_per_combination)):
        for c, spec in enumerate(StyleSpec.all()):
            label = spec.label_vector()
            count = per_combo
            if split == "train":
                for k, frac in fractions.items():
                    if label.labels[k]:
                        count = min(count, int(round(per_combo * frac)))
            for j in range(count):
                spk = j // utterances_per_speaker
                entry_id = f"{split}-{spec.name}-{j:04d}"
                rel = f"wav/{entry_id}.wav"
                jobs.append((spec, duration_s, _child_seed(seed, split_code, c, j, 7),
                             _child_seed(seed, split_code, c, spk, 11), str(out_dir / rel)))
                entries.append(ManifestEntry(entry_id, rel, label, f"{split}-{spec.name}-spk{spk:03d}", split))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_render_job, jobs, chunksize=8))
    else:
        for job in jobs:
            _render_job(job)
    return write_manifest(out_dir / "manifest.tsv", entries)


def label_counts(entries: Sequence[ManifestEntry], split: str | None = "train") -> list[int]:
    """Positive counts per label over non-excluded entries (optionally one split)."""
    counts = [0] * N_LABELS
    for e in entries:
        if e.excluded or (split is not None and e.split != split):
            continue
        for k in range(N_LABELS):
            counts[k] += e.label.labels[k]
    return counts

