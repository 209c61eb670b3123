"""Dense pseudo-label distillation: label generation, dense training, sparse fine-tuning."""

from __future__ import annotations

import abc
import hashlib
import json
import logging
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from .config import TrainConfig
from .data.codecs import CodecError, DisparityMap, decode_disparity_png16, encode_disparity_png16
from .data.manifest import DatasetManifest
from .data.sample import StereoSample
from .train import CheckpointMismatchError, TrainResult, TrainSet, load_checkpoint, shape_mismatches, train
from .model import build_model

log = logging.getLogger(__name__)

LABEL_DIVISOR = 256.0


class TeacherOracle(abc.ABC):
    """Anything that maps a stereo sample to a dense disparity map.

    Subclasses implement ``predict``; calling the teacher counts invocations.
    """

    name = "teacher"

    def __init__(self, d_max: float = 192):
        self.d_max = float(d_max)
        self.calls = 0
        self._lock = threading.Lock()

    @abc.abstractmethod
    def predict(self, sample: StereoSample) -> DisparityMap | np.ndarray: ...

    @property
    def descriptor(self) -> str:
        return self.name

    def __call__(self, sample: StereoSample) -> DisparityMap:
        with self._lock:
            self.calls += 1
        out = self.predict(sample)
        return out if isinstance(out, DisparityMap) else DisparityMap.dense(out)


class GtOracleTeacher(TeacherOracle):
    """Returns the sample's dense ground truth."""

    name = "gt-oracle"

    def predict(self, sample):
        if sample.gt is None:
            raise ValueError(f"{sample.id}: gt-oracle teacher needs ground truth")
        return DisparityMap(sample.gt.data.copy(), sample.gt.valid.copy())


def _sample_seed(seed: int, sample_id: str) -> list[int]:
    # stable across processes, unlike hash()
    return [seed, zlib.crc32(sample_id.encode())]


def occlusion_band(disp: np.ndarray, jump: float = 1.0, width: int = 2) -> np.ndarray:
    """Pixels within ``width`` of a horizontal disparity jump larger than ``jump``."""
    edge = np.zeros(disp.shape, bool)
    edge[:, 1:] = np.abs(np.diff(disp, axis=1)) > jump
    edge[:, :-1] |= edge[:, 1:]
    return binary_dilation(edge, iterations=width) if width > 0 else edge


class NoisyGtTeacher(TeacherOracle):
    """Dense gt plus i.i.d. Gaussian noise, with optional extra error in occlusion bands.

    Noise is seeded per sample id so labels do not depend on processing order.
    """

    name = "noisy-gt"

    def __init__(self, sigma: float = 0.25, occlusion_sigma: float = 0.0, seed: int = 0, d_max: float = 192):
        super().__init__(d_max)
        if sigma < 0 or occlusion_sigma < 0:
            raise ValueError("noise levels must be non-negative")
        self.sigma = sigma
        self.occlusion_sigma = occlusion_sigma
        self.seed = seed

    @property
    def descriptor(self) -> str:
        return f"{self.name}(sigma={self.sigma:g}, occlusion_sigma={self.occlusion_sigma:g}, seed={self.seed})"

    def predict(self, sample):
        if sample.gt is None or not sample.gt.valid.all():
            raise ValueError(f"{sample.id}: noisy-gt teacher needs dense ground truth")
        gt = sample.gt.data.astype(np.float64)
        rng = np.random.default_rng(_sample_seed(self.seed, sample.id))
        label = gt + rng.normal(0.0, self.sigma, gt.shape)
        if self.occlusion_sigma > 0:
            band = sample.occlusion if sample.occlusion is not None else occlusion_band(gt)
            label = label + band * rng.normal(0.0, self.occlusion_sigma, gt.shape)
        label = np.clip(label, 1.0 / LABEL_DIVISOR, self.d_max)
        return DisparityMap(label.astype(np.float32), np.ones(gt.shape, bool))


def check_dense(label: DisparityMap, shape, d_max: float) -> str | None:
    """Reason the label is unusable, or None."""
    if tuple(label.shape) != tuple(shape):
        return f"shape {tuple(label.shape)} != input {tuple(shape)}"
    if not label.valid.all():
        return f"{int((~label.valid).sum())} invalid pixels"
    data = label.data
    if not np.isfinite(data).all():
        return "non-finite values"
    if data.min() < 0 or data.max() > d_max:
        return f"values outside [0, {d_max:g}]"
    return None


class PseudoLabelStore:
    """Directory of ``<id>.png`` dense labels (PNG16, divisor 256) plus ``provenance.json``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, sample_id: str) -> Path:
        return self.root / f"{sample_id}.png"

    def __contains__(self, sample_id: str) -> bool:
        return self.path(sample_id).is_file()

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.png"))

    def __len__(self):
        return len(self.ids())

    def get(self, sample_id: str) -> DisparityMap | None:
        """Stored label for ``sample_id``; None if absent or not dense."""
        p = self.path(sample_id)
        if not p.is_file():
            return None
        try:
            label = decode_disparity_png16(p, LABEL_DIVISOR)
        except (CodecError, OSError) as e:
            log.warning("unreadable label %s: %s", p, e)
            return None
        return label if label.valid.all() else None

    def put(self, sample_id: str, label: DisparityMap) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.root / f".{sample_id}.tmp.png"
        encode_disparity_png16(label, tmp, LABEL_DIVISOR)
        tmp.replace(self.path(sample_id))

    @property
    def provenance(self) -> dict:
        p = self.root / "provenance.json"
        return json.loads(p.read_text()) if p.is_file() else {}


def labels_hash(teacher: TeacherOracle, manifest: DatasetManifest) -> str:
    doc = {"teacher": teacher.descriptor, "ids": [e.id for e in manifest.entries], "d_max": teacher.d_max}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def generate_pseudo_labels(teacher: TeacherOracle, manifest: DatasetManifest, out_dir: str | Path,
                           workers: int = 1) -> PseudoLabelStore:
    """Run ``teacher`` over every sample and store one dense label per id.

    Existing readable dense labels of the right size are kept (resume). A
    teacher failure or a non-dense output flags the sample and the run goes on;
    flagged ids are listed in the provenance record.
    """
    store = PseudoLabelStore(out_dir)
    store.root.mkdir(parents=True, exist_ok=True)

    def one(i: int) -> str | None:
        entry = manifest.entries[i]
        sample = manifest.load_sample(i, dense=True)
        existing = store.get(entry.id)
        if existing is not None and existing.shape == sample.shape:
            return None
        try:
            label = teacher(sample)
        except Exception as e:  # a broken sample must not stop the run
            log.warning("teacher failed on %s: %s", entry.id, e)
            return entry.id
        reason = check_dense(label, sample.shape, teacher.d_max)
        if reason is not None:
            log.warning("label for %s rejected: %s", entry.id, reason)
            return entry.id
        store.put(entry.id, label)
        return None

    idx = range(len(manifest))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(i) for i in idx]
    failed = sorted(r for r in results if r is not None)
    prov = {"teacher": teacher.descriptor, "config_hash": labels_hash(teacher, manifest),
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"), "n_samples": len(manifest) - len(failed),
            "n_failed": len(failed), "failed_ids": failed}
    (store.root / "provenance.json").write_text(json.dumps(prov, indent=2))
    return store


def split_steps(total: int) -> tuple[int, int]:
    """Dense : sparse step budget in the ratio 2 : 3."""
    dense = round(total * 2 / 5)
    return dense, total - dense


def distill_train(cfg: TrainConfig, manifest: DatasetManifest, labels: PseudoLabelStore, steps: int,
                  checkpoint_dir=None, model=None) -> TrainResult:
    """Dense stage: train on pseudo-labels with full-validity masks.

    With ``cfg.mix_sparse_gt`` the sparse gt overrides labels where it exists.
    """
    data = TrainSet.from_manifest(manifest, "labels", labels, mix_sparse=cfg.mix_sparse_gt)
    return train(cfg, data, steps, model=model, checkpoint_dir=checkpoint_dir, tag="distill")


def finetune_sparse(checkpoint: str | Path, cfg: TrainConfig, manifest: DatasetManifest, steps: int,
                    checkpoint_dir=None, supervision: str = "sparse") -> TrainResult:
    """Sparse stage: load ``checkpoint`` into a model built from ``cfg`` and keep training.

    Optimizer state and the one-cycle schedule start fresh.
    """
    blob = load_checkpoint(checkpoint)
    model = build_model(cfg.model)
    diffs = shape_mismatches(model, blob["model"])
    if diffs:
        raise CheckpointMismatchError(
            f"checkpoint {checkpoint} does not match the configured model; first mismatch: {diffs[0]}"
            + (f" (+{len(diffs) - 1} more)" if len(diffs) > 1 else ""))
    model.load_state_dict(blob["model"])
    data = TrainSet.from_manifest(manifest, supervision)
    return train(cfg, data, steps, model=model, checkpoint_dir=checkpoint_dir, tag="finetune")


def run_distillation(cfg: TrainConfig, manifest: DatasetManifest, teacher: TeacherOracle, out_dir: str | Path,
                     total_steps: int) -> TrainResult:
    """All three stages with the 2 : 3 dense : sparse split of ``total_steps``."""
    out = Path(out_dir)
    store = generate_pseudo_labels(teacher, manifest, out / "labels")
    dense, sparse = split_steps(total_steps)
    stage2 = distill_train(cfg, manifest, store, dense, checkpoint_dir=out / "dense")
    stage3 = finetune_sparse(stage2.checkpoint, cfg, manifest, sparse, checkpoint_dir=out / "sparse")
    stage3.history = stage2.history + stage3.history
    return stage3
