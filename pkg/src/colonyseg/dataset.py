"""Loading generated datasets from disk, with split files and a read audit.

The train-val/test split (80/20) is materialized at generation time in
splits.json so every later stage agrees on it. DatasetStore records the
path of every file it reads; experiment manifests embed that audit so a
run can prove the test split was never touched during training or model
selection.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .pnm import read_pgm, read_ppm
from .train import Sample

SPLITS_FILE = "splits.json"
MANIFEST_FILE = "manifest.json"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_splits(out_dir, ids, seed: int, test_fraction: float = 0.2) -> dict:
    """Shuffle ids with the seed and split train-val (80%) / test (20%)."""
    ids = list(ids)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5911]))
    order = rng.permutation(len(ids))
    n_test = max(1, int(round(test_fraction * len(ids)))) if len(ids) > 1 else 0
    test = sorted(ids[i] for i in order[:n_test])
    train_val = sorted(ids[i] for i in order[n_test:])
    splits = {"seed": seed, "train_val": train_val, "test": test}
    with open(Path(out_dir) / SPLITS_FILE, "w") as fh:
        json.dump(splits, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return splits


class DatasetStore:
    """Reads samples of a generated dataset, keeping an audit of file reads."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / MANIFEST_FILE
        if not manifest_path.exists():
            raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())
        self.manifest_sha256 = sha256_file(manifest_path)
        self.by_id = {entry["id"]: entry for entry in self.manifest["images"]}
        self.read_log: list[str] = []

    @property
    def ids(self) -> list[str]:
        return [entry["id"] for entry in self.manifest["images"]]

    def splits(self) -> dict:
        path = self.root / SPLITS_FILE
        if not path.exists():
            raise FileNotFoundError(f"no split file at {path}")
        return json.loads(path.read_text())

    def _track(self, name: str) -> Path:
        self.read_log.append(name)
        return self.root / name

    def load_image(self, sample_id: str) -> np.ndarray:
        return read_ppm(self._track(self.by_id[sample_id]["image"]))

    def load_mask(self, sample_id: str) -> np.ndarray:
        return read_pgm(self._track(self.by_id[sample_id]["mask"]))

    def load_sample(self, sample_id: str) -> Sample:
        image = self.load_image(sample_id)
        mask = self.load_mask(sample_id)
        chw = (image.astype(np.float32) / 255.0).transpose(2, 0, 1)
        return Sample(image=np.ascontiguousarray(chw), mask=mask, id=sample_id)

    def load_samples(self, ids) -> list[Sample]:
        return [self.load_sample(i) for i in ids]

    def files_read_for(self, ids) -> set[str]:
        names = set()
        for sample_id in ids:
            entry = self.by_id[sample_id]
            names.update((entry["image"], entry["mask"], entry["scene"]))
        return names & set(self.read_log)
