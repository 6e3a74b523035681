"""Scan/volume data model, disk ingest and the preprocessing pipeline.

A dataset on disk is ``<root>/<scan_id>/<MODALITY>/<idx:05d>.png`` (16-bit
grayscale) plus a ``manifest.json`` at the root. Preprocessing segments the
brain, drops near-empty slices, crops to the per-volume union box, resizes to
224x224, replicates to 3 channels and maps per-volume intensities to [-1, 1].
The preprocessed cache mirrors the layout under ``<root>_prep/``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .errors import (
    CorruptSlice,
    DegenerateRegion,
    EmptyVolume,
    IoError,
    ManifestMismatch,
    MissingModality,
    ShapeMismatch,
    VolumeTooLong,
)

logger = logging.getLogger(__name__)

SLICE_SIZE = 224
PAD_VALUE = -1.0
DEFAULT_MIN_AREA_FRAC = 0.02


class Modality(str, Enum):
    FLAIR = "FLAIR"
    T1W = "T1w"
    T1WCE = "T1wCE"
    T2 = "T2"


#: Fixed ordering used everywhere a modality sequence matters (fusion input).
MODALITIES = (Modality.FLAIR, Modality.T1W, Modality.T1WCE, Modality.T2)


@dataclass
class Volume:
    """One modality's ordered slice stack.

    ``pixels`` is ``(n, H, W)`` grayscale on ingest and ``(n, 224, 224, 3)``
    in [-1, 1] after preprocessing; after padding ``n`` equals the padded
    length while ``true_length`` keeps the real slice count.
    """

    modality: Modality
    pixels: np.ndarray
    true_length: int

    @property
    def padded_length(self) -> int:
        return int(self.pixels.shape[0])


@dataclass
class Scan:
    """A four-modality bundle with one volume-level binary label."""

    scan_id: str
    volumes: dict[Modality, Volume]
    label: int

    def one_hot(self) -> np.ndarray:
        return np.array([1 - self.label, self.label], dtype=np.float32)


@dataclass
class ManifestEntry:
    scan_id: str
    label: int
    counts: dict[Modality, int]


@dataclass
class Manifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, scan_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.scan_id == scan_id:
                return e
        raise KeyError(scan_id)

    def labels(self) -> list[int]:
        return [e.label for e in self.entries]

    def scan_ids(self) -> list[str]:
        return [e.scan_id for e in self.entries]


def save_manifest(manifest: Manifest) -> Path:
    path = Path(manifest.root) / "manifest.json"
    payload = [
        {
            "scan_id": e.scan_id,
            "label": int(e.label),
            "counts": {m.value: int(e.counts[m]) for m in MODALITIES},
        }
        for e in manifest.entries
    ]
    try:
        path.write_text(json.dumps(payload, indent=1))
    except OSError as exc:
        raise IoError(f"cannot write manifest: {exc}") from exc
    return path


def load_manifest(root: str | Path) -> Manifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise ManifestMismatch(f"no manifest.json under {root}")
    raw = json.loads(path.read_text())
    entries = []
    seen: set[str] = set()
    for item in raw:
        sid = item["scan_id"]
        if sid in seen:
            raise ManifestMismatch(f"duplicate scan_id {sid!r} in manifest")
        seen.add(sid)
        counts = {m: int(item["counts"][m.value]) for m in MODALITIES}
        entries.append(ManifestEntry(sid, int(item["label"]), counts))
    return Manifest(root, entries)


def _read_gray(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise CorruptSlice(f"unreadable image {path}")
    if img.ndim != 2:
        raise CorruptSlice(f"expected grayscale, got shape {img.shape} in {path}")
    return img.astype(np.float32)


def load_scan(entry: ManifestEntry, root: str | Path) -> Scan:
    """Load one scan's four volumes, slices ordered by numeric filename index."""
    root = Path(root)
    volumes: dict[Modality, Volume] = {}
    for modality in MODALITIES:
        mdir = root / entry.scan_id / modality.value
        if not mdir.is_dir():
            raise MissingModality(f"{entry.scan_id}: no {modality.value} directory")
        files = list(mdir.glob("*.png"))
        try:
            files.sort(key=lambda p: int(p.stem))
        except ValueError as exc:
            raise CorruptSlice(f"non-numeric slice name under {mdir}") from exc
        if not files:
            raise MissingModality(f"{entry.scan_id}/{modality.value}: no slices")
        if len(files) != entry.counts[modality]:
            raise ManifestMismatch(
                f"{entry.scan_id}/{modality.value}: manifest says "
                f"{entry.counts[modality]} slices, found {len(files)}"
            )
        stack = np.stack([_read_gray(f) for f in files])
        volumes[modality] = Volume(modality, stack, len(files))
    return Scan(entry.scan_id, volumes, entry.label)


def _otsu_threshold(values: np.ndarray) -> float:
    """Threshold maximizing between-class variance over a 256-bin histogram."""
    lo = float(values.min())
    hi = float(values.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(values, bins=256, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = np.divide(m0, w0, out=np.zeros_like(m0), where=w0 > 0)
    mu1 = np.divide(m0[-1] - m0, w1, out=np.zeros_like(m0), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(centers[int(np.argmax(between))])


def segment_brain(
    pixels: np.ndarray, min_area_frac: float = DEFAULT_MIN_AREA_FRAC
) -> tuple[int, int, int, int] | None:
    """Locate the brain region of a raw slice.

    Thresholds the slice automatically, keeps the largest 4-connected
    foreground component and returns its tight bounding box as
    ``(row0, col0, row1, col1)`` with exclusive ends, or ``None`` when the
    component covers less than ``min_area_frac`` of the slice.
    """
    if pixels.ndim == 3:
        pixels = pixels[..., 0]
    thr = _otsu_threshold(pixels)
    fg = pixels > thr
    if not fg.any():
        return None
    labels, n = ndimage.label(fg)  # default structure = 4-connectivity
    areas = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(areas)) + 1
    if areas[best - 1] < min_area_frac * pixels.size:
        return None
    rows, cols = np.nonzero(labels == best)
    return int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1


def filter_slices(volume: Volume, min_area_frac: float = DEFAULT_MIN_AREA_FRAC) -> Volume:
    """Drop slices showing no (or a minuscule) brain region, preserving order."""
    keep = [
        i
        for i in range(volume.true_length)
        if segment_brain(volume.pixels[i], min_area_frac) is not None
    ]
    if not keep:
        raise EmptyVolume(f"{volume.modality.value}: all slices filtered out")
    return Volume(volume.modality, volume.pixels[keep], len(keep))


def crop_resize_normalize(
    pixels: np.ndarray,
    bbox: tuple[int, int, int, int],
    intensity_range: tuple[float, float] | None = None,
) -> np.ndarray:
    """Crop to ``bbox``, bilinear-resize to 224x224, replicate to 3 channels
    and map ``intensity_range`` (default: the crop's own min/max) to [-1, 1].
    """
    if pixels.ndim == 3:
        pixels = pixels[..., 0]
    r0, c0, r1, c1 = bbox
    if r1 <= r0 or c1 <= c0:
        raise DegenerateRegion(f"empty crop box {bbox}")
    crop = np.ascontiguousarray(pixels[r0:r1, c0:c1], dtype=np.float32)
    resized = cv2.resize(crop, (SLICE_SIZE, SLICE_SIZE), interpolation=cv2.INTER_LINEAR)
    lo, hi = intensity_range if intensity_range is not None else (
        float(crop.min()),
        float(crop.max()),
    )
    if hi > lo:
        out = (resized - lo) * (2.0 / (hi - lo)) - 1.0
        np.clip(out, -1.0, 1.0, out=out)
    else:
        out = np.zeros_like(resized)
    return np.repeat(out[..., None], 3, axis=2)


def pad_volume(volume: Volume, t: int, strict: bool = True) -> Volume:
    """Append constant -1 slices until the stack has ``t`` slices.

    With ``strict`` a longer volume is an error; otherwise it is
    center-truncated to ``t`` with a warning.
    """
    pixels = volume.pixels
    n = int(pixels.shape[0])
    if n != volume.true_length:
        raise ShapeMismatch(
            f"pad_volume expects an unpadded volume (got {n} slices, l={volume.true_length})"
        )
    if n > t:
        if strict:
            raise VolumeTooLong(f"{volume.modality.value}: {n} slices > t={t}")
        start = (n - t) // 2
        logger.warning(
            "%s: center-truncating %d slices to t=%d", volume.modality.value, n, t
        )
        return Volume(volume.modality, pixels[start : start + t].copy(), t)
    if n == t:
        return Volume(volume.modality, pixels, n)
    pad = np.full((t - n,) + pixels.shape[1:], PAD_VALUE, dtype=pixels.dtype)
    return Volume(volume.modality, np.concatenate([pixels, pad]), n)


def pad_scan(scan: Scan, t_map: dict[Modality, int], strict: bool = True) -> Scan:
    return Scan(
        scan.scan_id,
        {m: pad_volume(v, t_map[m], strict) for m, v in scan.volumes.items()},
        scan.label,
    )


def preprocess_volume(
    volume: Volume, min_area_frac: float = DEFAULT_MIN_AREA_FRAC
) -> tuple[Volume, dict]:
    """Run the full slice pipeline on a raw volume.

    All surviving slices share one crop: the union of their per-slice brain
    boxes, so anatomy stays spatially registered for the sequence model.
    Intensities are normalized by the volume-wide min/max of the cropped
    content.
    """
    boxes = [segment_brain(volume.pixels[i], min_area_frac) for i in range(volume.true_length)]
    keep = [i for i, b in enumerate(boxes) if b is not None]
    if not keep:
        raise EmptyVolume(f"{volume.modality.value}: all slices filtered out")
    r0 = min(boxes[i][0] for i in keep)
    c0 = min(boxes[i][1] for i in keep)
    r1 = max(boxes[i][2] for i in keep)
    c1 = max(boxes[i][3] for i in keep)
    crops = volume.pixels[keep, r0:r1, c0:c1]
    lo, hi = float(crops.min()), float(crops.max())
    slices = np.stack(
        [
            crop_resize_normalize(volume.pixels[i], (r0, c0, r1, c1), (lo, hi))
            for i in keep
        ]
    )
    meta = {
        "kept": keep,
        "crop_box": [r0, c0, r1, c1],
        "intensity_range": [lo, hi],
    }
    return Volume(volume.modality, slices, len(keep)), meta


def preprocess_scan(
    scan: Scan, min_area_frac: float = DEFAULT_MIN_AREA_FRAC
) -> tuple[Scan, dict]:
    volumes = {}
    meta = {}
    for m in MODALITIES:
        volumes[m], meta[m.value] = preprocess_volume(scan.volumes[m], min_area_frac)
    return Scan(scan.scan_id, volumes, scan.label), meta


def to_uint16(normalized: np.ndarray) -> np.ndarray:
    """Encode [-1, 1] floats as full-range uint16 for the PNG cache."""
    return np.round((normalized + 1.0) * (65535.0 / 2.0)).astype(np.uint16)


def from_uint16(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) * (2.0 / 65535.0) - 1.0


def prep_dataset(
    root: str | Path,
    out_root: str | Path | None = None,
    min_area_frac: float = DEFAULT_MIN_AREA_FRAC,
) -> Manifest:
    """Preprocess every scan in ``root`` into the ``<root>_prep`` cache.

    Writes 16-bit grayscale PNGs (channels are identical after replication so
    one channel is stored), an updated manifest with post-filter counts, and
    ``prep_meta.json`` with the thresholds and per-volume crop boxes.
    """
    root = Path(root)
    out_root = Path(out_root) if out_root is not None else root.parent / (root.name + "_prep")
    manifest = load_manifest(root)
    prep_entries = []
    prep_meta: dict = {"source_root": str(root), "min_area_frac": min_area_frac, "volumes": {}}
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        for entry in manifest.entries:
            scan = load_scan(entry, root)
            prepped, meta = preprocess_scan(scan, min_area_frac)
            prep_meta["volumes"][entry.scan_id] = meta
            counts = {}
            for m in MODALITIES:
                vol = prepped.volumes[m]
                mdir = out_root / entry.scan_id / m.value
                mdir.mkdir(parents=True, exist_ok=True)
                for i in range(vol.true_length):
                    ok = cv2.imwrite(
                        str(mdir / f"{i:05d}.png"), to_uint16(vol.pixels[i, :, :, 0])
                    )
                    if not ok:
                        raise IoError(f"failed to write slice under {mdir}")
                counts[m] = vol.true_length
            prep_entries.append(ManifestEntry(entry.scan_id, entry.label, counts))
        out = Manifest(out_root, prep_entries)
        save_manifest(out)
        (out_root / "prep_meta.json").write_text(json.dumps(prep_meta, indent=1))
    except OSError as exc:
        raise IoError(f"cannot write preprocessed cache: {exc}") from exc
    return out


def dataset_stats(manifest: Manifest) -> tuple[dict[Modality, int], list[tuple[str, dict[Modality, int]]]]:
    """Per-modality slice totals and per-scan counts, straight from the manifest."""
    totals = {m: 0 for m in MODALITIES}
    per_scan = []
    for e in manifest.entries:
        per_scan.append((e.scan_id, dict(e.counts)))
        for m in MODALITIES:
            totals[m] += e.counts[m]
    return totals, per_scan


class ScanArrayCache:
    """RAM cache of preprocessed volumes as compact uint16 stacks.

    Loading decodes each PNG once; repeated epochs then only pay the
    uint16 -> float conversion. Safe to share read-only across workers.
    """

    def __init__(self, prep_root: str | Path, manifest: Manifest | None = None):
        self.root = Path(prep_root)
        self.manifest = manifest if manifest is not None else load_manifest(self.root)
        self._entries = {e.scan_id: e for e in self.manifest.entries}
        self._vols: dict[tuple[str, Modality], np.ndarray] = {}

    def label(self, scan_id: str) -> int:
        return self._entries[scan_id].label

    def raw_volume(self, scan_id: str, modality: Modality) -> np.ndarray:
        """(l, 224, 224) uint16 stack for one modality."""
        key = (scan_id, modality)
        if key not in self._vols:
            entry = self._entries[scan_id]
            mdir = self.root / scan_id / modality.value
            stack = []
            for i in range(entry.counts[modality]):
                img = cv2.imread(str(mdir / f"{i:05d}.png"), cv2.IMREAD_UNCHANGED)
                if img is None:
                    raise CorruptSlice(f"missing cached slice {mdir / f'{i:05d}.png'}")
                stack.append(img.astype(np.uint16))
            arr = np.stack(stack)
            if arr.shape[1:] != (SLICE_SIZE, SLICE_SIZE):
                raise ShapeMismatch(f"cached slices are {arr.shape[1:]}, expected 224x224")
            self._vols[key] = arr
        return self._vols[key]

    def volume(self, scan_id: str, modality: Modality) -> np.ndarray:
        """(l, 224, 224) float32 stack in [-1, 1]."""
        return from_uint16(self.raw_volume(scan_id, modality))

    def scan(self, scan_id: str) -> Scan:
        """Full Scan with (l, 224, 224, 3) float volumes (unpadded)."""
        volumes = {}
        for m in MODALITIES:
            gray = self.volume(scan_id, m)
            volumes[m] = Volume(m, np.repeat(gray[..., None], 3, axis=3), gray.shape[0])
        return Scan(scan_id, volumes, self.label(scan_id))
