"""Multi-label training loop: binary cross-entropy, Adam, seeded batching."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .corpus import ManifestEntry, parse_manifest, resolve_source
from .errors import ConfigurationError, DataError, NumericError, ValidationError
from .features import FeatureSequence, crop_or_pad, load_features
from .model import (BUFFER_NAMES, ModelConfig, Params, backward, forward, init_parameters,
                    save_checkpoint, sigmoid)

log = logging.getLogger(__name__)

# labeled substreams fanned out from one root seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_CROP, STREAM_DROPOUT = 1, 2, 3, 4


def substream(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), *map(int, keys)]))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    seed: int = 0
    target_frames: int = 500
    weight_decay: float = 0.0
    clip_norm: float = 0.0  # 0 disables clipping
    normalize_inputs: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def bce_loss(logits, targets) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy with logits, and its gradient w.r.t. the logits."""
    z = np.asarray(logits)
    y = np.asarray(targets)
    if z.shape != y.shape:
        raise ValidationError(f"logits {z.shape} and targets {y.shape} differ in shape")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("targets must be binary")
    y = y.astype(z.dtype)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    return float(per.sum(dtype=np.float64) / n), (sigmoid(z) - y) / n


def adam_step(params: Params, grads: Mapping[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update. Arrays not in ``grads`` are passed through."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    if cfg.clip_norm > 0:
        total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        factor = min(1.0, cfg.clip_norm / (total + 1e-12))
        grads = {n: g * factor for n, g in grads.items()}
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        new_params[name] = (p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(p.dtype)
        new_m[name] = np.asarray(m, dtype=p.dtype)
        new_v[name] = np.asarray(v, dtype=p.dtype)
    return new_params, AdamState(new_m, new_v, t)


# -- data ------------------------------------------------------------------------------


class FeatureStore:
    """Loads and caches features for manifest entries."""

    def __init__(self, base_dir=".", loader: Callable[[Path], FeatureSequence] = load_features):
        self.base_dir = Path(base_dir)
        self.loader = loader
        self._cache: dict[str, FeatureSequence] = {}

    def get(self, entry: ManifestEntry) -> FeatureSequence:
        cached = self._cache.get(entry.id)
        if cached is not None:
            return cached
        try:
            feats = self.loader(resolve_source(entry, self.base_dir))
        except Exception as exc:
            raise DataError(f"entry {entry.id!r}: cannot read {entry.source} ({exc})") from exc
        self._cache[entry.id] = feats
        return feats

    def preload(self, entries: Sequence[ManifestEntry], workers: int = 1) -> None:
        todo = [e for e in entries if e.id not in self._cache]
        if workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(self.get, todo))
        else:
            for e in todo:
                self.get(e)


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray
    targets: np.ndarray


def make_batches(entries: Sequence[ManifestEntry], batch_size: int, seed: int, epoch: int,
                 store: FeatureStore, target_frames: int, random_crop: bool = True) -> Iterator[Batch]:
    """Batches in a permutation keyed by (seed, epoch); the last partial batch is kept."""
    if not entries:
        raise DataError("no entries to batch")
    order = substream(seed, STREAM_SHUFFLE, epoch).permutation(len(entries))
    crop_rng = substream(seed, STREAM_CROP, epoch) if random_crop else None
    for start in range(0, len(order), batch_size):
        chunk = [entries[i] for i in order[start:start + batch_size]]
        feats = np.stack([crop_or_pad(store.get(e), target_frames, crop_rng).frames for e in chunk])
        targets = np.stack([e.label.as_array() for e in chunk])
        yield Batch([e.id for e in chunk], feats, targets)


def input_statistics(features: Sequence[FeatureSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and inverse standard deviation over all frames."""
    total = np.zeros(features[0].dim)
    sq = np.zeros(features[0].dim)
    count = 0
    for f in features:
        x = f.frames.astype(np.float64)
        total += x.sum(axis=0)
        sq += (x * x).sum(axis=0)
        count += x.shape[0]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean * mean, 0.0))
    return mean, 1.0 / np.maximum(std, 1e-3)


def training_entries(entries: Sequence[ManifestEntry]) -> list[ManifestEntry]:
    return [e for e in entries if e.split == "train" and not e.excluded]


def train(cfg: TrainConfig, model_cfg: ModelConfig, manifest, out, workers: int = 1,
          on_epoch: Callable[[dict], None] | None = None) -> Path:
    """Train from a manifest, writing per-epoch checkpoints, a loss log and a run summary.

    Returns the path of ``final.ckpt``.
    """
    manifest = Path(manifest)
    out = Path(out)
    entries = training_entries(parse_manifest(manifest))
    if not entries:
        raise DataError(f"{manifest}: training split is empty")
    store = FeatureStore(manifest.parent)
    store.preload(entries, workers)
    dims = {store.get(e).dim for e in entries}
    if len(dims) != 1:
        raise ConfigurationError(f"training features have mixed dimensions {sorted(dims)}")
    (dim,) = dims
    if model_cfg.input_dim != dim:
        raise ConfigurationError(f"input_dim={model_cfg.input_dim} but features have dimension {dim}")
    if model_cfg.target_frames != cfg.target_frames:
        raise ConfigurationError(
            f"model target_frames={model_cfg.target_frames} differs from crop length {cfg.target_frames}")
    out.mkdir(parents=True, exist_ok=True)

    params = init_parameters(model_cfg, int(substream(cfg.seed, STREAM_INIT).integers(2 ** 31)))
    if cfg.normalize_inputs:
        mean, scale = input_statistics([store.get(e) for e in entries])
        params[BUFFER_NAMES[0]] = mean.astype(np.float32)
        params[BUFFER_NAMES[1]] = scale.astype(np.float32)
    state = AdamState()
    history = []
    log_path = out / "train_log.tsv"
    log_path.write_text("epoch\tmean_loss\twall_s\n")
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        dropout_rng = substream(cfg.seed, STREAM_DROPOUT, epoch) if model_cfg.dropout > 0 else None
        losses, sizes = [], []
        for batch in make_batches(entries, cfg.batch_size, cfg.seed, epoch, store, cfg.target_frames):
            logits, trace = forward(params, model_cfg, batch.features, dropout_rng)
            loss, dlogits = bce_loss(logits, batch.targets)
            if not np.isfinite(loss):
                raise NumericError(f"epoch {epoch}: non-finite loss on batch starting {batch.ids[0]!r}")
            grads = backward(params, model_cfg, trace, dlogits)
            params, state = adam_step(params, grads, state, cfg)
            losses.append(loss)
            sizes.append(len(batch.ids))
        mean_loss = float(np.dot(losses, sizes) / sum(sizes))
        wall = time.perf_counter() - t0
        record = {"epoch": epoch, "mean_loss": mean_loss, "wall_s": wall, "steps": state.t}
        history.append(record)
        with log_path.open("a") as fh:
            fh.write(f"{epoch}\t{mean_loss:.6f}\t{wall:.2f}\n")
        log.info("epoch %d  loss %.5f  %.1fs", epoch, mean_loss, wall)
        save_checkpoint(params, model_cfg, out / f"epoch_{epoch:03d}.ckpt")
        if on_epoch is not None:
            on_epoch(record)
    final = save_checkpoint(params, model_cfg, out / "final.ckpt")
    summary = {
        "manifest": str(manifest),
        "n_train": len(entries),
        "train_config": asdict(cfg),
        "model_config": asdict(model_cfg),
        "epochs": history,
        "final_checkpoint": final.name,
    }
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return final
