"""JSON dataset manifests.

A manifest is one JSON document::

    {"root": "...", "split": "train",
     "entries": [{"id": "...", "left_path": "...", "right_path": "...",
                  "disp_path": "...",            # optional, sparse or dense gt
                  "dense_disp_path": "...",      # optional, synthetic only
                  "condition_tag": "day"}]}

Relative paths resolve against ``root``, itself relative to the manifest file.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .codecs import (DisparityMap, decode_disparity_pfm, decode_disparity_png16,
                     encode_disparity_png16, normalize_minmax, read_image, write_image, write_pfm)
from .sample import StereoSample
from .synthetic import SyntheticSceneSpec, generate_synthetic, sparsify

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    id: str
    left_path: str
    right_path: str
    disp_path: str | None = None
    dense_disp_path: str | None = None
    condition_tag: str = "all"


@dataclass
class DatasetManifest:
    root: Path
    split: str = "train"
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.root / q

    def load_sample(self, i: int, dense: bool = False) -> StereoSample:
        """Load entry ``i``; ``dense`` prefers the dense gt file when listed."""
        e = self.entries[i]
        left = read_image(self.resolve(e.left_path))
        right = read_image(self.resolve(e.right_path))
        path = e.dense_disp_path if dense and e.dense_disp_path else e.disp_path
        gt = load_disparity(self.resolve(path)) if path else None
        return StereoSample(left, right, gt, e.condition_tag, e.id,
                            meta={"raw_range": (float(left.min()), float(left.max()))})

    def samples(self, dense: bool = False):
        for i in range(len(self)):
            yield self.load_sample(i, dense)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        try:
            root = self.root.resolve().relative_to(path.parent.resolve())
        except ValueError:
            root = self.root.resolve()
        doc = {"root": str(root), "split": self.split,
               "entries": [{k: v for k, v in asdict(e).items() if v is not None} for e in self.entries]}
        path.write_text(json.dumps(doc, indent=2))


def load_disparity(path: Path) -> DisparityMap:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return decode_disparity_png16(path)
    if suffix == ".pfm":
        return decode_disparity_pfm(path)
    raise ManifestError(f"unsupported disparity format: {path}")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(doc, dict) or not isinstance(doc.get("entries", []), list):
        raise ManifestError(f"{path}: expected an object with an 'entries' list")
    root = Path(doc.get("root", "."))
    if not root.is_absolute():
        root = path.parent / root
    split = doc.get("split", "train")
    if split not in SPLITS:
        raise ManifestError(f"{path}: unknown split {split!r}")
    entries, seen = [], set()
    fields = set(ManifestEntry.__dataclass_fields__)
    for i, raw in enumerate(doc.get("entries", [])):
        if not isinstance(raw, dict):
            raise ManifestError(f"{path}: entry {i} is not an object")
        unknown = set(raw) - fields
        if unknown:
            raise ManifestError(f"{path}: entry {i} has unknown keys {sorted(unknown)}")
        try:
            e = ManifestEntry(**raw)
        except TypeError as exc:
            raise ManifestError(f"{path}: entry {i} is missing required keys ({exc})") from exc
        if e.id in seen:
            raise ManifestError(f"{path}: duplicate id {e.id!r}")
        seen.add(e.id)
        entries.append(e)
    m = DatasetManifest(root, split, entries)
    if check_files:
        for e in entries:
            for key in ("left_path", "right_path", "disp_path", "dense_disp_path"):
                p = getattr(e, key)
                if p is not None and not m.resolve(p).is_file():
                    raise ManifestError(f"{path}: entry {e.id!r}: {key} not found: {m.resolve(p)}")
    return m


CONDITIONS = ("day", "night", "rain")
# per-condition degradation: (noise multiplier, contrast multiplier, extra blur)
CONDITION_STYLE = {"day": (1.0, 1.0, 0.0), "night": (1.0, 0.7, 0.0), "rain": (2.0, 0.85, 0.4)}


def scene_spec_for(index: int, seed: int, base: SyntheticSceneSpec, conditions=CONDITIONS) -> SyntheticSceneSpec:
    tag = conditions[index % len(conditions)]
    noise_k, contrast_k, blur_add = CONDITION_STYLE.get(tag, (1.0, 1.0, 0.0))
    rng = np.random.default_rng([seed, index])
    return SyntheticSceneSpec(
        seed=int(rng.integers(2**31)),
        n_objects=int(rng.integers(max(base.n_objects - 2, 0), base.n_objects + 3)),
        disparity_range=base.disparity_range,
        noise_sigma=base.noise_sigma * noise_k,
        blur_radius=base.blur_radius + blur_add,
        sparsity=base.sparsity,
        texture_amplitude=base.texture_amplitude,
        contrast=base.contrast * contrast_k,
        condition_tag=tag,
        d_max=base.d_max,
    )


def write_synthetic_dataset(out_dir: str | Path, n: int, dims: tuple[int, int],
                            base: SyntheticSceneSpec | None = None, seed: int = 0,
                            split: str = "train", conditions=CONDITIONS) -> Path:
    """Render ``n`` scenes to disk and write ``manifest.json``; returns its path.

    Views are stored min-max normalized as 16-bit PNG. ``disp_path`` holds the
    gt after ``sparsify(base.sparsity)``; ``dense_disp_path`` the dense PFM.
    """
    base = base or SyntheticSceneSpec()
    out = Path(out_dir)
    for sub in ("left", "right", "disp", "disp_dense"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        spec = scene_spec_for(i, seed, base, conditions)
        sid = f"{split}_{i:05d}"
        s = generate_synthetic(spec, dims, sid)
        write_image(out / "left" / f"{sid}.png", normalize_minmax(s.left))
        write_image(out / "right" / f"{sid}.png", normalize_minmax(s.right))
        write_pfm(out / "disp_dense" / f"{sid}.pfm", s.gt.data)
        encode_disparity_png16(sparsify(s.gt, spec.sparsity, spec.seed), out / "disp" / f"{sid}.png")
        entries.append(ManifestEntry(sid, f"left/{sid}.png", f"right/{sid}.png",
                                     f"disp/{sid}.png", f"disp_dense/{sid}.pfm", spec.condition_tag))
    m = DatasetManifest(out, split, entries)
    m.save(out / "manifest.json")
    return out / "manifest.json"


IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg")


def scan_stereo_directory(root: str | Path, left_dir: str, right_dir: str, disp_dir: str | None = None,
                          condition_tag: str = "all", split: str = "train") -> DatasetManifest:
    """Pair files by stem across ``left_dir``/``right_dir``(/``disp_dir``) under ``root``.

    This is the adapter for MS2- and CATS-style layouts: point the three
    sub-directories at the thermal left/right image folders and the disparity
    folder of one sequence or split.
    """
    root = Path(root)
    lefts = {p.stem: p for p in sorted((root / left_dir).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    rights = {p.stem: p for p in sorted((root / right_dir).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    disps = {}
    if disp_dir is not None:
        disps = {p.stem: p for p in sorted((root / disp_dir).iterdir()) if p.suffix.lower() in (".png", ".pfm")}
    entries = []
    for stem in sorted(lefts):
        if stem not in rights:
            log.warning("no right view for %s; skipped", stem)
            continue
        d = disps.get(stem)
        entries.append(ManifestEntry(
            f"{condition_tag}_{stem}" if condition_tag != "all" else stem,
            str(lefts[stem].relative_to(root)), str(rights[stem].relative_to(root)),
            str(d.relative_to(root)) if d else None, None, condition_tag))
    return DatasetManifest(root, split, entries)
