"""Command-line entry point: synth, featurize, augment, train, eval.

Settings resolve as command-line flag > ``--config`` JSON file > built-in
default. The JSON file may hold global keys (seed, workers) at top level and
per-subcommand sections, e.g. ``{"seed": 3, "train": {"epochs": 20}}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import augmenter, corpus, evaluator, features, trainer
from .errors import ConfigurationError, SpeechMLCError
from .labels import LABELS, label_index
from .model import ModelConfig

OUTPUT_ROOT_ENV = "SPEECHMLC_OUTPUT_ROOT"

log = logging.getLogger("speechmlc")


class _Opts:
    """Adds flags whose help text carries the built-in default, tracking defaults separately."""

    def __init__(self, parser: argparse.ArgumentParser, defaults: dict):
        self.parser = parser
        self.defaults = defaults

    def add(self, flag: str, default, help: str, type=None, **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        shown = "" if default is None else f" (default: {default})"
        self.parser.add_argument(flag, dest=dest, default=None, type=type, help=help + shown, **kw)


def _resolve(args, defaults: dict, config: dict, section: str) -> dict:
    merged = {}
    scoped = config.get(section, {}) if isinstance(config.get(section, {}), dict) else {}
    for key, default in defaults.items():
        value = getattr(args, key, None)
        if value is None:
            value = scoped.get(key, config.get(key, default))
        merged[key] = value
    return merged


def _output_dir(value, command: str) -> Path:
    if value:
        return Path(value)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        return Path(root) / command
    raise ConfigurationError(f"--out is required (or set {OUTPUT_ROOT_ENV})")


def _parse_mapping(text: str, cast) -> dict[str, float]:
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, value = part.partition("=")
        if not sep:
            raise ConfigurationError(f"expected label=value, got {part!r}")
        label_index(name)
        out[name.strip()] = cast(value)
    return out


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(s: dict) -> int:
    out = _output_dir(s["out"], "synth")
    imbalance = _parse_mapping(s["imbalance"], float) if s["imbalance"] else None
    path = corpus.synth_corpus(int(s["per_combo"]), float(s["duration"]), int(s["seed"]), out,
                               n_eval_per_combination=int(s["eval_per_combo"]), imbalance=imbalance,
                               utterances_per_speaker=int(s["utterances_per_speaker"]),
                               workers=int(s["workers"]))
    n = len(corpus.parse_manifest(path))
    print(f"wrote {n} utterances and {path}")
    return 0


def cmd_featurize(s: dict) -> int:
    out = _output_dir(s["out"], "featurize")
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    if s["manifest"]:
        manifest = Path(s["manifest"])
        entries = corpus.parse_manifest(manifest)
        jobs = [(e, corpus.resolve_source(e, manifest.parent)) for e in entries]
    else:
        jobs = [(None, Path(p)) for p in s["inputs"]]
    if not jobs:
        raise ConfigurationError("nothing to featurize: pass WAV files or --manifest")
    new_entries = []
    for entry, src in jobs:
        name = entry.id if entry is not None else src.stem
        dest = out / f"{name}.smlcf"
        try:
            feats = features.featurize_wav(src)
            features.save_feature_file(dest, feats)
        except (OSError, SpeechMLCError, ValueError) as exc:
            failures.append((str(src), str(exc)))
            print(f"error: {src}: {exc}", file=sys.stderr)
            continue
        if entry is not None:
            new_entries.append(corpus.ManifestEntry(entry.id, dest.name, entry.label, entry.speaker_id,
                                                    entry.split, entry.excluded, entry.augmented))
    if s["manifest"]:
        corpus.write_manifest(out / "manifest.tsv", new_entries)
    print(f"featurized {len(jobs) - len(failures)} of {len(jobs)} files into {out}"
          + (" (partial output)" if failures else ""))
    return 1 if failures else 0


def cmd_augment(s: dict) -> int:
    manifest = Path(s["manifest"])
    out = _output_dir(s["out"], "augment")
    entries = corpus.parse_manifest(manifest)
    train_entries = trainer.training_entries(entries)
    if s["targets"] == "auto":
        targets = augmenter.balanced_targets(train_entries)
    else:
        targets = {label_index(k): int(v) for k, v in _parse_mapping(s["targets"], int).items()}
    plan = augmenter.plan_augmentation(train_entries, targets, float(s["budget_hours"]) * 3600.0,
                                       int(s["seed"]), float(s["item_seconds"]))
    out.mkdir(parents=True, exist_ok=True)
    if not plan.items:
        print("nothing to do: no label is below its target count")
        corpus.write_manifest(out / "manifest.tsv", [_rebase(e, manifest.parent, out) for e in entries])
        return 0
    print(plan.summary())
    store = trainer.FeatureStore(manifest.parent)
    result = augmenter.execute_plan(plan, entries, store.get, int(s["k"]), out / "features",
                                    float(s["pool_seconds"]), relative_to=out)
    merged = [_rebase(e, manifest.parent, out) for e in entries] + result.entries
    corpus.write_manifest(out / "manifest.tsv", merged)
    (out / "skipped.tsv").write_text(result.skip_report())
    print(f"wrote {len(result.entries)} augmented entries to {out / 'manifest.tsv'}"
          + (f"; {len(result.skipped)} skipped (partial output)" if result.skipped else ""))
    return 1 if result.skipped else 0


def _rebase(e: corpus.ManifestEntry, old_base: Path, new_base: Path) -> corpus.ManifestEntry:
    src = corpus.resolve_source(e, old_base)
    rel = os.path.relpath(src.resolve(), new_base.resolve())
    return corpus.ManifestEntry(e.id, rel, e.label, e.speaker_id, e.split, e.excluded, e.augmented)


def cmd_train(s: dict) -> int:
    manifest = Path(s["manifest"])
    out = _output_dir(s["out"], "train")
    entries = trainer.training_entries(corpus.parse_manifest(manifest))
    if not entries:
        raise ConfigurationError(f"{manifest}: training split is empty")
    store = trainer.FeatureStore(manifest.parent)
    first = store.get(entries[0])
    if s["input_dim"] is not None and int(s["input_dim"]) != first.dim:
        raise ConfigurationError(f"--input-dim {s['input_dim']} conflicts with feature dimension {first.dim}")
    target_frames = features.crop_frames(first.frame_hop_s, float(s["crop_seconds"]))
    model_cfg = ModelConfig(d_model=int(s["dim"]), n_layers=int(s["layers"]), n_heads=int(s["heads"]),
                            n_labels=len(LABELS), input_dim=first.dim, ffn_dim=int(s["ffn_dim"] or 0),
                            target_frames=target_frames, dropout=float(s["dropout"]))
    train_cfg = trainer.TrainConfig(learning_rate=float(s["lr"]), batch_size=int(s["batch_size"]),
                                    beta1=float(s["beta1"]), beta2=float(s["beta2"]),
                                    adam_eps=float(s["adam_eps"]), epochs=int(s["epochs"]),
                                    seed=int(s["seed"]), target_frames=target_frames,
                                    weight_decay=float(s["weight_decay"]), clip_norm=float(s["clip_norm"]))

    def report(rec):
        print(f"epoch {rec['epoch']:3d}  loss {rec['mean_loss']:.5f}  {rec['wall_s']:.1f}s", flush=True)

    final = trainer.train(train_cfg, model_cfg, manifest, out, workers=int(s["workers"]), on_epoch=report)
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(s: dict) -> int:
    detect = None
    if s["detect_only"]:
        detect = [label_index(n) for n in s["detect_only"].split(",") if n.strip()]
    report_path = s["out"]
    if report_path is None and os.environ.get(OUTPUT_ROOT_ENV):
        report_path = Path(os.environ[OUTPUT_ROOT_ENV]) / "eval" / "report.json"
        report_path.parent.mkdir(parents=True, exist_ok=True)
    report = evaluator.evaluate(s["checkpoint"], s["manifest"], float(s["threshold"]), report_path,
                                int(s["agreement_split"]), int(s["workers"]), int(s["batch_size"]), detect)
    if report_path is None:
        sys.stdout.write(report.to_json())
    else:
        if report.macro_f1 is not None:
            print(f"macro F1 {report.macro_f1:.4f} over {report.n_samples} samples; report: {report_path}")
        else:
            for name, p in report.detection.items():
                print(f"{name}: detection probability {p:.4f}")
    return 0


# -- parser ----------------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, dict]]:
    parser = argparse.ArgumentParser(prog="speechmlc", description=__doc__.splitlines()[0])
    globals_ = {}
    g = _Opts(parser, globals_)
    g.add("--seed", 0, "root seed for every random stream", type=int)
    g.add("--workers", 1, "worker count for data-parallel stages", type=int)
    parser.add_argument("--config", default=None, help="JSON settings file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    defaults: dict[str, dict] = {"_global": globals_}

    p = sub.add_parser("synth", help="render the synthetic style corpus")
    o = _Opts(p, defaults.setdefault("synth", {}))
    o.add("--out", None, f"output directory (or ${OUTPUT_ROOT_ENV}/synth)")
    o.add("--per-combo", 100, "training utterances per style combination", type=int)
    o.add("--eval-per-combo", 0, "held-out utterances per style combination", type=int)
    o.add("--duration", features.CROP_SECONDS, "utterance length in seconds", type=float)
    o.add("--imbalance", "", "label=fraction list shrinking training counts, e.g. rough=0.2")
    o.add("--utterances-per-speaker", 1, "utterances sharing one synthetic speaker", type=int)

    p = sub.add_parser("featurize", help="compute Mel80 feature files from 16 kHz WAV")
    o = _Opts(p, defaults.setdefault("featurize", {}))
    p.add_argument("inputs", nargs="*", help="WAV files")
    defaults["featurize"]["inputs"] = []
    o.add("--manifest", None, "manifest whose WAV sources are featurized")
    o.add("--out", None, f"output directory (or ${OUTPUT_ROOT_ENV}/featurize)")

    p = sub.add_parser("augment", help="plan and run kNN conversions for deficient labels")
    o = _Opts(p, defaults.setdefault("augment", {}))
    o.add("--manifest", None, "input manifest", required=True)
    o.add("--out", None, f"output directory (or ${OUTPUT_ROOT_ENV}/augment)")
    o.add("--k", augmenter.DEFAULT_K, "neighbours averaged per frame", type=int)
    o.add("--budget-hours", augmenter.DEFAULT_BUDGET_HOURS, "total hours of converted samples", type=float)
    o.add("--pool-seconds", augmenter.POOL_CAP_S, "target speech per speaker pool", type=float)
    o.add("--item-seconds", augmenter.ITEM_SECONDS, "budget charged per conversion", type=float)
    o.add("--targets", "auto", "label=count list, or auto to match the larger label on each axis")

    p = sub.add_parser("train", help="train a model")
    o = _Opts(p, defaults.setdefault("train", {}))
    o.add("--manifest", None, "training manifest", required=True)
    o.add("--out", None, f"run directory (or ${OUTPUT_ROOT_ENV}/train)")
    o.add("--epochs", 10, "passes over the training split", type=int)
    o.add("--lr", 1e-4, "Adam learning rate", type=float)
    o.add("--batch-size", 64, "batch size", type=int)
    o.add("--layers", 4, "decoder layers", type=int)
    o.add("--heads", 8, "attention heads per attention block", type=int)
    o.add("--dim", 128, "model and style-query width", type=int)
    o.add("--ffn-dim", None, "feed-forward width (4 x dim when unset)", type=int)
    o.add("--crop-seconds", features.CROP_SECONDS, "crop length; shorter inputs are zero-padded", type=float)
    o.add("--input-dim", None, "expected feature dimension (inferred when unset)", type=int)
    o.add("--dropout", 0.0, "dropout on sublayer outputs", type=float)
    o.add("--beta1", 0.9, "Adam beta1", type=float)
    o.add("--beta2", 0.999, "Adam beta2", type=float)
    o.add("--adam-eps", 1e-8, "Adam epsilon", type=float)
    o.add("--weight-decay", 0.0, "L2 penalty", type=float)
    o.add("--clip-norm", 0.0, "global gradient-norm clip, 0 disables", type=float)

    p = sub.add_parser("eval", help="score a checkpoint on the eval split")
    o = _Opts(p, defaults.setdefault("eval", {}))
    o.add("--checkpoint", None, "checkpoint file", required=True)
    o.add("--manifest", None, "manifest with an eval split", required=True)
    o.add("--out", None, "report path (stdout when unset)")
    o.add("--threshold", evaluator.DEFAULT_THRESHOLD, "decision threshold", type=float)
    o.add("--agreement-split", evaluator.DEFAULT_VOTE_SPLIT, "votes needed for the high-agreement stratum",
          type=int)
    o.add("--detect-only", None, "comma-separated labels; report only their detection probabilities")
    o.add("--batch-size", 64, "inference batch size", type=int)
    return parser, defaults


COMMANDS = {"synth": cmd_synth, "featurize": cmd_featurize, "augment": cmd_augment,
            "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    parser, defaults = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = {}
        if args.config:
            config = json.loads(Path(args.config).read_text())
            if not isinstance(config, dict):
                raise ConfigurationError(f"{args.config}: top level must be a JSON object")
        settings = _resolve(args, defaults["_global"], config, args.command)
        settings.update(_resolve(args, defaults[args.command], config, args.command))
        return COMMANDS[args.command](settings)
    except (SpeechMLCError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
