"""Synthetic mpMRI dataset generator with a planted, learnable class signal.

Each scan is an ellipsoidal "brain" on black background, sliced along z with
a variable slice count per modality. Class-1 scans carry a brighter and
larger interior blob over a contiguous slice range in FLAIR and T2; T1w and
T1wCE blobs are drawn from the same distribution for both classes. The
``separability`` knob scales the class-1 parameter shift (0 = identical class
distributions). A generator ledger records the ground-truth blob parameters
and slice counts for every scan.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .config import SynthConfig
from .data import MODALITIES, Manifest, ManifestEntry, Modality, save_manifest
from .errors import IoError

BLOB_MODALITIES = (Modality.FLAIR, Modality.T2)

# Blob appearance as fractions of full intensity / brain radius. Class 1 adds
# separability * delta on the signal-carrying modalities.
BASE_BLOB_INTENSITY = 0.55
DELTA_BLOB_INTENSITY = 0.28
BASE_BLOB_RADIUS = 0.22
DELTA_BLOB_RADIUS = 0.16
BRAIN_INTENSITY = 0.32


def _render_volume(
    rng: np.random.Generator,
    size: int,
    n_slices: int,
    blob_intensity: float,
    blob_radius_frac: float,
) -> tuple[np.ndarray, dict]:
    """Render one modality's slice stack as uint16 images plus its truth."""
    lead = int(rng.integers(0, 3))
    trail = int(rng.integers(0, 3))
    while n_slices - lead - trail < 4:
        lead = max(0, lead - 1)
        trail = max(0, trail - 1)
    span = n_slices - lead - trail

    cy = size / 2 + rng.uniform(-2, 2)
    cx = size / 2 + rng.uniform(-2, 2)
    a = size * rng.uniform(0.34, 0.42)  # column semi-axis
    b = size * rng.uniform(0.26, 0.34)  # row semi-axis

    blob_len = max(3, int(round(span * rng.uniform(0.4, 0.6))))
    blob_start = lead + int(rng.integers(0, max(1, span - blob_len + 1)))
    bcy = cy + rng.uniform(-0.25, 0.25) * b
    bcx = cx + rng.uniform(-0.25, 0.25) * a

    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    slices = np.zeros((n_slices, size, size), dtype=np.uint16)
    for i in range(lead, n_slices - trail):
        z = ((i - lead + 0.5) / span - 0.5) * 2.0  # [-1, 1] across the brain
        f = float(np.sqrt(max(0.0, 1.0 - z * z)))
        if f <= 0.05:
            continue
        brain = ((rows - cy) / (b * f)) ** 2 + ((cols - cx) / (a * f)) ** 2 <= 1.0
        img = np.zeros((size, size), dtype=np.float64)
        img[brain] = BRAIN_INTENSITY + 0.05 * f + rng.normal(0.0, 0.02, size=int(brain.sum()))
        if blob_start <= i < blob_start + blob_len:
            r = min(blob_radius_frac * min(a, b), 0.8 * f * min(a, b))
            blob = ((rows - bcy) ** 2 + (cols - bcx) ** 2 <= r * r) & brain
            img[blob] = blob_intensity + rng.normal(0.0, 0.02, size=int(blob.sum()))
        slices[i] = np.clip(np.round(img * 65535.0), 0, 65535).astype(np.uint16)
    truth = {
        "lead": lead,
        "trail": trail,
        "blob_intensity": blob_intensity,
        "blob_radius_frac": blob_radius_frac,
        "blob_range": [blob_start, blob_start + blob_len],
    }
    return slices, truth


def generate_synthetic(config: SynthConfig, out_root: str | Path) -> Manifest:
    """Write a full synthetic dataset (slices, manifest, truth ledger)."""
    out_root = Path(out_root)
    rng = np.random.default_rng(config.seed)
    n = config.num_scans
    n_pos = int(round(n * config.label_balance))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)
    children = np.random.SeedSequence(config.seed).spawn(n)

    entries = []
    ledger: dict = {
        "seed": config.seed,
        "separability": config.separability,
        "image_size": config.image_size,
        "scans": {},
    }
    try:
        out_root.mkdir(parents=True, exist_ok=True)
        for idx in range(n):
            scan_id = f"scan{idx:04d}"
            label = int(labels[idx])
            scan_rng = np.random.default_rng(children[idx])
            counts: dict[Modality, int] = {}
            truths = {}
            for m in MODALITIES:
                lo, hi = config.slice_range[m]
                count = int(scan_rng.integers(lo, hi + 1))
                counts[m] = count
                shift = config.separability if (label == 1 and m in BLOB_MODALITIES) else 0.0
                intensity = BASE_BLOB_INTENSITY + shift * DELTA_BLOB_INTENSITY
                radius = BASE_BLOB_RADIUS + shift * DELTA_BLOB_RADIUS
                slices, truth = _render_volume(
                    scan_rng, config.image_size, count, intensity, radius
                )
                truths[m.value] = truth
                mdir = out_root / scan_id / m.value
                mdir.mkdir(parents=True, exist_ok=True)
                for i in range(count):
                    if not cv2.imwrite(str(mdir / f"{i:05d}.png"), slices[i]):
                        raise IoError(f"failed to write {mdir / f'{i:05d}.png'}")
            entries.append(ManifestEntry(scan_id, label, counts))
            ledger["scans"][scan_id] = {
                "label": label,
                "counts": {m.value: counts[m] for m in MODALITIES},
                "volumes": truths,
            }
        manifest = Manifest(out_root, entries)
        save_manifest(manifest)
        (out_root / "synth_truth.json").write_text(json.dumps(ledger, indent=1))
    except OSError as exc:
        raise IoError(f"cannot write synthetic dataset: {exc}") from exc
    return manifest
