"""Training-time geometric transforms, virtual-example mixing and TTA builders.

All randomness comes from a caller-supplied ``numpy.random.Generator`` so every
augmentation is reproducible from a seed; nothing touches global RNG state.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import cv2
import numpy as np

from .data import MODALITIES, Modality, Scan, Volume
from .errors import InvalidParameter, ShapeMismatch

FILL_VALUE = -1.0


@dataclass
class TransformSpec:
    hflip: bool
    rotation_deg: float


@dataclass
class VirtualExample:
    """Convex combination of two transformed scans with a soft label."""

    volumes: dict[Modality, Volume]
    soft_label: np.ndarray
    lam: float
    sources: tuple[str, str]


def sample_transform(
    rng: np.random.Generator, rotation_deg: float, hflip_prob: float
) -> TransformSpec:
    flip = bool(rng.random() < hflip_prob)
    angle = float(rng.uniform(-rotation_deg, rotation_deg)) if rotation_deg > 0 else 0.0
    return TransformSpec(flip, angle)


def hflip(pixels: np.ndarray) -> np.ndarray:
    """Exact horizontal mirror; an involution on any (H, W) or (H, W, C) array."""
    return np.ascontiguousarray(pixels[:, ::-1])


def rotate(pixels: np.ndarray, angle_deg: float, fill: float = FILL_VALUE) -> np.ndarray:
    """Rotate about the image center with bilinear sampling, ``fill`` outside."""
    if angle_deg == 0.0:
        return pixels.copy()
    h, w = pixels.shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle_deg, 1.0)
    border = (fill,) * (pixels.shape[2] if pixels.ndim == 3 else 1)
    return cv2.warpAffine(
        pixels,
        m,
        (w, h),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=border,
    )


def apply_transform(pixels: np.ndarray, spec: TransformSpec) -> np.ndarray:
    out = hflip(pixels) if spec.hflip else pixels
    out = rotate(out, spec.rotation_deg)
    if out is pixels:
        out = pixels.copy()
    return out


def transform_slices(
    stack: np.ndarray,
    true_length: int,
    rng: np.random.Generator,
    rotation_deg: float,
    hflip_prob: float,
) -> np.ndarray:
    """Give each real slice its own independently sampled transform.

    Slices at indices >= ``true_length`` are padding and pass through
    untouched. Values are re-clamped to [-1, 1] afterwards.
    """
    out = stack.copy()
    for i in range(true_length):
        spec = sample_transform(rng, rotation_deg, hflip_prob)
        out[i] = apply_transform(stack[i], spec)
    np.clip(out[:true_length], -1.0, 1.0, out=out[:true_length])
    return out


def geometric_transform(
    volume: Volume,
    rng: np.random.Generator,
    rotation_deg: float = 15.0,
    hflip_prob: float = 0.5,
) -> Volume:
    pixels = transform_slices(volume.pixels, volume.true_length, rng, rotation_deg, hflip_prob)
    return Volume(volume.modality, pixels, volume.true_length)


def transform_scan(
    scan: Scan,
    rng: np.random.Generator,
    rotation_deg: float = 15.0,
    hflip_prob: float = 0.5,
) -> Scan:
    return Scan(
        scan.scan_id,
        {
            m: geometric_transform(scan.volumes[m], rng, rotation_deg, hflip_prob)
            for m in MODALITIES
        },
        scan.label,
    )


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Mixing coefficient drawn from Beta(alpha, alpha)."""
    if alpha <= 0:
        raise InvalidParameter(f"mix alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def mix_scans(scan_i: Scan, scan_j: Scan, lam: float) -> VirtualExample:
    """Elementwise convex combination of two padded scans and their labels.

    The mix keeps real content wherever either source has it, so its true
    length per modality is the max of the sources'.
    """
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameter(f"lambda must lie in [0, 1], got {lam}")
    volumes = {}
    for m in MODALITIES:
        a, b = scan_i.volumes[m], scan_j.volumes[m]
        if a.pixels.shape != b.pixels.shape:
            raise ShapeMismatch(
                f"{m.value}: {a.pixels.shape} vs {b.pixels.shape} (pad both scans first)"
            )
        mixed = lam * a.pixels + (1.0 - lam) * b.pixels
        volumes[m] = Volume(m, mixed, max(a.true_length, b.true_length))
    soft = lam * scan_i.one_hot() + (1.0 - lam) * scan_j.one_hot()
    return VirtualExample(volumes, soft, lam, (scan_i.scan_id, scan_j.scan_id))


def _whole_scan_version(scan: Scan, flip: bool, angle: float) -> Scan:
    """One TTA version: the same flip/rotation applied to every real slice of
    every modality; padding slices are copied through."""
    volumes = {}
    for m in MODALITIES:
        vol = scan.volumes[m]
        out = vol.pixels.copy()
        for i in range(vol.true_length):
            s = hflip(vol.pixels[i]) if flip else vol.pixels[i]
            out[i] = rotate(s, angle) if angle != 0.0 else s
        np.clip(out[: vol.true_length], -1.0, 1.0, out=out[: vol.true_length])
        volumes[m] = Volume(m, out, vol.true_length)
    return Scan(scan.scan_id, volumes, scan.label)


def tta_versions(
    scan: Scan,
    rng: np.random.Generator,
    rotation_deg: float = 15.0,
    force_identity: bool = False,
) -> list[Scan]:
    """The original scan plus flipped, rotated and flipped+rotated copies.

    Unlike training transforms, one flip/rotation is shared by all slices and
    modalities within a version so each version shows consistent anatomy. The
    rotation angle is a single draw from ``rng``. ``force_identity`` degrades
    every transform to the identity (four copies of the input), which pins the
    aggregation contract in tests.
    """
    if force_identity:
        return [copy.deepcopy(scan) for _ in range(4)]
    angle = float(rng.uniform(-rotation_deg, rotation_deg)) if rotation_deg > 0 else 0.0
    original = copy.deepcopy(scan)
    flipped = _whole_scan_version(scan, True, 0.0)
    rotated = _whole_scan_version(scan, False, angle)
    both = _whole_scan_version(scan, True, angle)
    return [original, flipped, rotated, both]
