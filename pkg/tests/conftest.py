import numpy as np
import pytest

from speechmlc.corpus import LabelVector, ManifestEntry, write_manifest
from speechmlc.features import FeatureSequence, save_feature_file


def feature_corpus(root, n_train=16, n_eval=0, frames=12, dim=6, seed=0, votes=8):
    """Tiny manifest of external-kind feature files whose means encode the labels.

    Label k shifts channel ``k % dim`` by +1 or -1 so a small model can learn it.
    """
    rng = np.random.default_rng(seed)
    (root / "feats").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_train + n_eval):
        bits = [0] * 8
        for axis in range(4):
            bits[2 * axis + int(rng.integers(2))] = 1
        signs = np.array([1.0 if b else -1.0 for b in bits])
        x = rng.normal(scale=0.5, size=(frames, dim))
        for k in range(8):
            x[:, k % dim] += 0.5 * signs[k]
        split = "train" if i < n_train else "eval"
        eid = f"{split}{i:03d}"
        save_feature_file(root / "feats" / f"{eid}.smlcf", FeatureSequence(x, 0.01, "external"))
        v = tuple(votes if b else 0 for b in bits)
        entries.append(ManifestEntry(eid, f"feats/{eid}.smlcf", LabelVector(tuple(bits), v),
                                     f"spk{i % 4}", split))
    write_manifest(root / "manifest.tsv", entries)
    return root / "manifest.tsv", entries


@pytest.fixture
def tiny_corpus(tmp_path):
    return feature_corpus(tmp_path, n_train=16, n_eval=8)
